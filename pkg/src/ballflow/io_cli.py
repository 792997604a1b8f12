"""Command-line surface: steady-family reports, simulation runs, inequality
reports, and post-hoc diagnosis of emitted CSV series.

Exit codes: 0 ok, 2 configuration error, 3 vacuum regime/breach, 4 blow-up,
5 I/O error.  All floating-point text is written with 17 significant digits
so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import struct
import sys
import time

import numpy as np

from . import __version__
from . import diagnostics as diag
from .dynamics import (BlowUpError, PerturbationState, SimConfig,
                       VacuumBreachError, run)
from .geometry import GridTooCoarseError, build_meridian_grid
from .korn import build_korn_report
from .steady import (SteadyStateParams, VacuumRegimeError, sample_steady,
                     solve_center_density, steady_residual, total_mass,
                     vacuum_threshold_mass)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VACUUM = 3
EXIT_BLOWUP = 4
EXIT_IO = 5


class ConfigError(ValueError):
    pass


def fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# Checkpoint container: little-endian, versioned, bit-faithful round trip.
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"BALLFLOW"
_CKPT_VERSION = 1
# header after magic+version: nr, ntheta (u32), mode flag (u8), pad (3 bytes),
# gamma, mu, lambda, omega, rho_center, time (f64), seed (u64), followed by
# q, v_r, v_theta, v_phi as little-endian float64 C-order arrays.
_HDR = struct.Struct("<II B 3x 6d Q")


def write_checkpoint(path, state: PerturbationState, config: SimConfig):
    p = config.params
    mode_flag = 1 if config.mode == "linearized" else 0
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    blob += _HDR.pack(config.nr, config.ntheta, mode_flag,
                      p.gamma, p.mu, p.lam, p.omega_bar, p.rho_center,
                      state.t, config.seed)
    for arr in state.fields:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))
    return path


def read_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    if version != _CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    nr, ntheta, mode_flag, gamma, mu, lam, omega, rho_center, t, seed = (
        _HDR.unpack_from(blob, off)
    )
    off += _HDR.size
    fields = []
    count = nr * ntheta
    for _ in range(4):
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        fields.append(arr.reshape(nr, ntheta).copy())
        off += count * 8
    params = SteadyStateParams(gamma=gamma, mu=mu, lam=lam, omega_bar=omega,
                               rho_center=rho_center)
    state = PerturbationState(t, *fields)
    meta = {"mode": "linearized" if mode_flag else "nonlinear",
            "seed": seed, "nr": nr, "ntheta": ntheta}
    return state, params, meta


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def format_row(row: dict) -> str:
    return ",".join(fmt(row[c]) for c in diag.CSV_COLUMNS)


def write_csv(path, rows):
    with open(path, "w") as f:
        f.write(",".join(diag.CSV_COLUMNS) + "\n")
        for row in rows:
            f.write(format_row(row) + "\n")
    return path


def read_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header != list(diag.CSV_COLUMNS):
            raise ConfigError(f"{path}: unexpected CSV columns {header}")
        data = []
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise ConfigError(f"{path}: malformed CSV row {line!r}")
            data.append([float(x) for x in parts])
    if not data:
        raise ConfigError(f"{path}: empty CSV")
    arr = np.array(data)
    return {c: arr[:, i] for i, c in enumerate(diag.CSV_COLUMNS)}


class FileSink:
    """Streams diagnostics rows and checkpoints for a simulation run."""

    def __init__(self, outdir, tag="run"):
        self.outdir = outdir
        self.tag = tag
        self.csv_path = outdir / f"{tag}.csv"
        self._fh = open(self.csv_path, "w")
        self._fh.write(",".join(diag.CSV_COLUMNS) + "\n")
        self.files = [self.csv_path]
        self._n_ckpt = 0

    def on_row(self, row):
        self._fh.write(format_row(row) + "\n")

    def on_checkpoint(self, state, config):
        self._n_ckpt += 1
        path = self.outdir / f"{self.tag}_ckpt_{self._n_ckpt:04d}.bin"
        write_checkpoint(path, state, config)
        self.files.append(path)
        return path

    def close(self):
        self._fh.close()


def write_manifest(path, config_echo, files, wall_seconds):
    entries = []
    for f in files:
        h = hashlib.sha256()
        with open(f, "rb") as fh:
            h.update(fh.read())
        entries.append({"path": str(f), "sha256": h.hexdigest(),
                        "bytes": f.stat().st_size})
    manifest = {
        "version": __version__,
        "config": config_echo,
        "wall_seconds": wall_seconds,
        "files": entries,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# ---------------------------------------------------------------------------
# Config files: line-oriented key = value with # comments
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "gamma": float, "mu": float, "lambda": float, "omega": float,
    "rho_center": float, "mass": float,
    "nr": int, "ntheta": int, "t_end": float,
    "cfl_acoustic": float, "cfl_viscous": float,
    "mode": str, "output_interval": float, "checkpoint_interval": float,
    "seed": int, "amplitude": float, "shape": str,
}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return out


def build_sim_config(raw: dict) -> SimConfig:
    grid_n = int(raw.get("nr", 64))
    grid_nt = int(raw.get("ntheta", 64))
    if "rho_center" in raw and "mass" in raw:
        raise ConfigError("give rho_center or mass, not both")
    rho_center = raw.get("rho_center")
    if rho_center is None and "mass" in raw:
        grid = build_meridian_grid(grid_n, grid_nt)
        rho_center = solve_center_density(
            raw["mass"], raw.get("omega", 0.0), raw.get("gamma", 2.0), grid
        )
    if rho_center is None:
        rho_center = 1.0
    try:
        params = SteadyStateParams(
            gamma=raw.get("gamma", 2.0),
            mu=raw.get("mu", 1.0),
            lam=raw.get("lambda", 1.0),
            omega_bar=raw.get("omega", 0.0),
            rho_center=rho_center,
        )
        return SimConfig(
            params=params,
            nr=grid_n,
            ntheta=grid_nt,
            t_end=raw.get("t_end", 1.0),
            cfl_acoustic=raw.get("cfl_acoustic", 0.4),
            cfl_viscous=raw.get("cfl_viscous", 0.25),
            mode=raw.get("mode", "nonlinear"),
            output_interval=raw.get("output_interval", 0.05),
            checkpoint_interval=raw.get("checkpoint_interval", 0.0),
            seed=int(raw.get("seed", 0)),
            amplitude=raw.get("amplitude", 0.0),
            shape=raw.get("shape", "smooth-poly"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _parse_grid(spec: str):
    try:
        nr_s, nt_s = spec.lower().split("x")
        return int(nr_s), int(nt_s)
    except ValueError as exc:
        raise ConfigError(f"bad grid spec {spec!r}, expected NRxNT") from exc


def cli_steady(args, out) -> int:
    nr, nt = _parse_grid(args.grid)
    grid = build_meridian_grid(nr, nt)
    threshold = vacuum_threshold_mass(args.omega, args.gamma, grid)
    if args.mass is not None:
        rho_center = solve_center_density(args.mass, args.omega, args.gamma,
                                          grid)
        mass = args.mass
    else:
        rho_center = args.rho_center
        params0 = SteadyStateParams(args.gamma, args.mu, args.lam,
                                    args.omega, rho_center)
        mass = total_mass(params0, grid)
    params = SteadyStateParams(args.gamma, args.mu, args.lam, args.omega,
                               rho_center)
    field = sample_steady(params, grid)
    cont, mom = steady_residual(field, params, grid)
    record = {
        "gamma": args.gamma, "mu": args.mu, "lambda": args.lam,
        "omega": args.omega,
        "rho_center": rho_center, "mass": mass,
        "vacuum_threshold_mass": threshold,
        "min_density": float(np.min(field.rho_bar)),
        "max_density": float(np.max(field.rho_bar)),
        "continuity_residual": cont, "momentum_residual": mom,
        "grid": [nr, nt],
    }
    if args.json:
        json.dump(record, out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        out.write("rotating steady state\n")
        for key in ("gamma", "mu", "lambda", "omega", "rho_center", "mass",
                    "vacuum_threshold_mass", "min_density", "max_density",
                    "continuity_residual", "momentum_residual"):
            out.write(f"  {key:24s} {fmt(record[key])}\n")
        out.write(f"  {'grid':24s} {nr}x{nt}\n")
    return EXIT_OK


def cli_simulate(args, out) -> int:
    from pathlib import Path

    raw = {}
    if args.config is not None:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        raw.update(parse_config_text(text))
    for key in ("t_end", "seed", "amplitude", "mode", "omega", "gamma",
                "output_interval"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            raw[key] = val
    if args.grid is not None:
        raw["nr"], raw["ntheta"] = _parse_grid(args.grid)
    config = build_sim_config(raw)

    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sink = FileSink(outdir, tag=args.tag)
    t0 = time.perf_counter()
    config_echo = {**raw, "rho_center": config.params.rho_center}
    try:
        result = run(config, sink=sink)
    except (VacuumBreachError, BlowUpError):
        raise
    finally:
        sink.close()
        wall = time.perf_counter() - t0
        write_manifest(outdir / f"{args.tag}_manifest.json", config_echo,
                       sink.files, wall)
    out.write(f"completed {result.steps} steps (dt={fmt(result.dt)}) "
              f"-> {sink.csv_path}\n")
    return EXIT_OK


def cli_korn(args, out) -> int:
    if args.degree < 1:
        raise ConfigError("--degree must be at least 1")
    nr, nt = _parse_grid(args.grid)
    grid = build_meridian_grid(nr, nt)
    rep = build_korn_report(args.degree, grid)
    record = {
        "korn01_constant": rep.korn01_constant,
        "pm_constant": rep.pm_constant,
        "poincare_constant": rep.poincare_constant,
        "degeneracy": [list(pair) for pair in rep.degeneracy],
        "trial_degree": rep.degree,
        "trial_dims": rep.dims,
        "grid": list(rep.grid),
    }
    if args.json:
        json.dump(record, out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        out.write("inequality constants (trial-space lower bounds)\n")
        out.write(f"  gradient-vs-strain    {fmt(rep.korn01_constant)}"
                  f"   (dim {rep.dims['korn01']})\n")
        out.write(f"  poincare-morrey       {fmt(rep.pm_constant)}"
                  f"   (dim {rep.dims['pm']})\n")
        out.write(f"  tangent poincare      {fmt(rep.poincare_constant)}"
                  f"   (dim {rep.dims['poincare']})\n")
        out.write("  rigid-rotation degeneracy (strain energy, gradient energy):\n")
        for i, (e, k) in enumerate(rep.degeneracy):
            out.write(f"    phi{i + 1}: {fmt(e)}  {fmt(k)}\n")
    return EXIT_OK


def cli_diagnose(args, out) -> int:
    cols = read_csv(args.csv)
    t, e0 = cols["t"], cols["E0"]
    window = None
    if args.window is not None:
        try:
            lo, hi = (float(x) for x in args.window.split(","))
        except ValueError as exc:
            raise ConfigError("--window expects 'lo,hi'") from exc
        window = (lo, hi)
    try:
        fit = diag.fit_decay_rate(t, e0, window=window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    drifts = {}
    for name in ("mass", "L1", "L2", "L3"):
        series = cols[name]
        scale = max(abs(series[0]), abs(cols["L3"][0]), 1e-30)
        drifts[name] = float(np.max(np.abs(series - series[0])) / scale)
    res = cols["residual"]
    res_max = float(np.nanmax(res)) if np.any(np.isfinite(res)) else math.nan
    record = {
        "sigma": fit.sigma, "r_squared": fit.r_squared,
        "window": list(fit.window), "samples": fit.samples,
        "drifts": drifts, "max_residual": res_max,
    }
    if args.json:
        json.dump(record, out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        out.write("trajectory diagnosis\n")
        out.write(f"  sigma                 {fmt(fit.sigma)}\n")
        out.write(f"  r_squared             {fmt(fit.r_squared)}\n")
        out.write(f"  fit window            [{fmt(fit.window[0])}, "
                  f"{fmt(fit.window[1])}] ({fit.samples} samples)\n")
        for name, val in drifts.items():
            out.write(f"  {name + ' drift':22s}{fmt(val)}\n")
        out.write(f"  max identity residual {fmt(res_max)}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="ballflow",
        description="Compressible slip-wall flow laboratory in the unit ball",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("steady", help="rotating steady-state family record")
    ps.add_argument("--gamma", type=float, required=True)
    ps.add_argument("--omega", type=float, required=True)
    ps.add_argument("--mu", type=float, default=1.0)
    ps.add_argument("--lam", "--lambda", dest="lam", type=float, default=1.0)
    group = ps.add_mutually_exclusive_group(required=True)
    group.add_argument("--mass", type=float)
    group.add_argument("--rho-center", dest="rho_center", type=float)
    ps.add_argument("--grid", default="64x64")
    ps.add_argument("--json", action="store_true")

    pr = sub.add_parser("simulate", help="run the perturbation evolution")
    pr.add_argument("config", nargs="?", default=None,
                    help="key = value config file")
    pr.add_argument("--outdir", default="out")
    pr.add_argument("--tag", default="run")
    pr.add_argument("--t-end", dest="t_end", type=float)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--amplitude", type=float)
    pr.add_argument("--mode", choices=("nonlinear", "linearized"))
    pr.add_argument("--omega", type=float)
    pr.add_argument("--gamma", type=float)
    pr.add_argument("--grid")
    pr.add_argument("--output-interval", dest="output_interval", type=float)

    pk = sub.add_parser("korn", help="inequality-constant report")
    pk.add_argument("--grid", default="64x64")
    pk.add_argument("--degree", type=int, default=4)
    pk.add_argument("--json", action="store_true")

    pd = sub.add_parser("diagnose", help="fit decay rate and drifts from CSV")
    pd.add_argument("csv")
    pd.add_argument("--window", default=None, help="lo,hi fit window")
    pd.add_argument("--json", action="store_true")
    return ap


def main(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "steady": cli_steady,
        "simulate": cli_simulate,
        "korn": cli_korn,
        "diagnose": cli_diagnose,
    }
    try:
        return handlers[args.command](args, out)
    except (VacuumRegimeError, VacuumBreachError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VACUUM
    except BlowUpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ConfigError, GridTooCoarseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
