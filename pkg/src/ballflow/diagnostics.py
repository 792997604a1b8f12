"""Conserved quantities, the basic energy/dissipation pair, the discrete
energy-identity residual, anisotropic frame-derivative norms, and decay-rate
fitting.

Everything here is read-only over snapshots and uses the edge-aware meridian
operators from geometry, independent of the stepping kernels, so the identity
residual genuinely measures discrete consistency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import MeridianGrid, integrate
from .steady import SteadyStateField, SteadyStateParams

CSV_COLUMNS = ("t", "mass", "L1", "L2", "L3", "E0", "D0", "residual")


@dataclass(frozen=True)
class ConservedQuantities:
    t: float
    mass: float
    L: tuple  # (L1, L2, L3)


@dataclass(frozen=True)
class EnergyReport:
    t: float
    E0: float
    D0: float
    identity_residual: float = math.nan


@dataclass(frozen=True)
class DecayFit:
    sigma: float
    r_squared: float
    window: tuple
    samples: int


@dataclass(frozen=True)
class AnisotropicNorms:
    grad_t_q: float
    grad_n_q: float
    grad_t_v: float
    grad_n_v: float
    grad_psi_q: float
    grad_psi_v: float
    c_q: float
    c_v: float


def conserved_quantities(state, steady: SteadyStateField,
                         grid: MeridianGrid) -> ConservedQuantities:
    """Mass and angular momentum of the full fields.

    The phi_1/phi_2 moments of an axisymmetric (mode 0) field vanish under
    the analytic azimuthal integral carried by the quadrature weights, so L1
    and L2 are exactly zero in this representation.
    """
    rho = steady.rho_bar + state.q
    mass = integrate(rho, grid)
    p3 = geo.phi3_theta_component(grid)
    l3 = integrate(rho * (steady.u_phi_bar + state.vp) * p3, grid)
    return ConservedQuantities(t=state.t, mass=mass, L=(0.0, 0.0, l3))


def basic_energy(state, steady: SteadyStateField, params: SteadyStateParams,
                 grid: MeridianGrid, mode: str = "nonlinear") -> EnergyReport:
    """E0 = 1/2 int rho |v|^2 + (gamma/2) int rho_b^(gamma-2) q^2 and the
    dissipation D0 = int (mu/2)|grad v + grad v^T|^2 + lam |div v|^2."""
    q, vr, vt, vp = state.fields
    rho = steady.rho_bar if mode == "linearized" else steady.rho_bar + q
    g = params.gamma
    e0 = 0.5 * integrate(rho * (vr**2 + vt**2 + vp**2), grid) + (
        g / 2.0
    ) * integrate(steady.rho_bar ** (g - 2.0) * q**2, grid)
    d0 = integrate(
        0.5 * params.mu * geo.strain_square(vr, vt, vp, grid)
        + params.lam * geo.divergence(vr, vt, grid) ** 2,
        grid,
    )
    return EnergyReport(t=state.t, E0=e0, D0=d0)


def identity_terms(state, steady: SteadyStateField, params: SteadyStateParams,
                   grid: MeridianGrid, mode: str = "nonlinear") -> dict:
    """Named right-hand-side integrals of the basic energy identity (l = 0).

    Keys: transport (q^2 against the steady-weight gradient), compress
    (q^2 div v), g1_pair, mass_flux_pair ( (d_t q + div(rho_b v)) |v|^2 / 2 ),
    force_pair ( (F2+G2) . v ).  In linearized mode only force_pair with the
    linear force survives.
    """
    q, vr, vt, vp = state.fields
    g = params.gamma
    om = params.omega_bar
    rc, sin_c, cos_c, cot_c = grid.rc, grid.sin_t, grid.cos_t, grid.cot_t
    rho_b = steady.rho_bar
    linear = mode == "linearized"

    cor_r = 2.0 * om * sin_c * vp * np.ones(grid.shape)
    cor_t = 2.0 * om * cos_c * vp
    cor_p = -2.0 * om * (sin_c * vr + cos_c * vt)
    f2_dot_v = -rho_b * (cor_r * vr + cor_t * vt + cor_p * vp)

    if linear:
        return {
            "transport": 0.0,
            "compress": 0.0,
            "g1_pair": 0.0,
            "mass_flux_pair": 0.0,
            "force_pair": integrate(f2_dot_v, grid),
        }

    divv = geo.divergence(vr, vt, grid)
    vsq = vr**2 + vt**2 + vp**2

    # analytic gradient of rho_b^(gamma-2) along the cylindrical radius
    a = (g - 1.0) / (2.0 * g) * om**2
    s = rc * sin_c
    grad_w = (g - 2.0) * 2.0 * a * s / ((g - 1.0) * rho_b)
    v_dot_s = vr * sin_c + vt * cos_c
    transport = 0.5 * g * integrate(q**2 * grad_w * v_dot_s, grid)

    w_gm2 = rho_b ** (g - 2.0)
    compress = 0.5 * g * integrate(w_gm2 * q**2 * divv, grid)
    g1_pair = -g * integrate(w_gm2 * q**2 * divv, grid)

    dq_r, dq_t = geo.grad_scalar(q, grid)
    mass_flux = -(vr * dq_r + vt * dq_t) - q * divv
    mass_flux_pair = 0.5 * integrate(mass_flux * vsq, grid)

    # G2 . v: nonlinear remainder gradient plus the quadratic advection
    phat = q * (2.0 * rho_b + q) if g == 2.0 else rho_b**g * np.expm1(
        g * np.log1p(q / rho_b)
    )
    rem = phat - g * rho_b ** (g - 1.0) * q
    drem_r, drem_t = geo.grad_scalar(rem, grid)

    m = rc * sin_c
    avv_r = (
        vr * geo.d_dr(vr, grid)
        + vt * geo.d_dtheta(vr, grid) / rc
        - (vt**2 + vp**2) / rc
    )
    avv_t = (
        vr * geo.d_dr(vt, grid)
        + vt * geo.d_dtheta(vt, grid) / rc
        + (vr * vt - cot_c * vp**2) / rc
    )
    avv_p = (
        vr * geo.d_dr(m * vp, grid) + vt * geo.d_dtheta(m * vp, grid) / rc
    ) / m
    g2_dot_v = (
        -(drem_r * vr + drem_t * vt)
        - q * ((cor_r + avv_r) * vr + (cor_t + avv_t) * vt
               + (cor_p + avv_p) * vp)
    )
    force_pair = integrate(f2_dot_v + g2_dot_v, grid)

    return {
        "transport": transport,
        "compress": compress,
        "g1_pair": g1_pair,
        "mass_flux_pair": mass_flux_pair,
        "force_pair": force_pair,
    }


def identity_rhs_total(state, steady, params, grid, mode="nonlinear") -> float:
    return float(sum(identity_terms(state, steady, params, grid, mode).values()))


def energy_identity_residual(snapshots, steady: SteadyStateField,
                             params: SteadyStateParams, grid: MeridianGrid,
                             mode: str = "nonlinear"):
    """|dE0/dt + D0 - RHS| at interior snapshots of a uniformly spaced window.

    Returns (times, residuals) for the interior samples.  Requires at least
    three snapshots with uniform spacing.
    """
    if len(snapshots) < 3:
        raise ValueError("need at least 3 consecutive snapshots")
    times = np.array([s.t for s in snapshots])
    hs = np.diff(times)
    if np.max(np.abs(hs - hs[0])) > 1e-9 * max(hs[0], 1.0):
        raise ValueError("snapshot spacing is not uniform")
    h = hs[0]
    reports = [basic_energy(s, steady, params, grid, mode) for s in snapshots]
    e0 = np.array([rep.E0 for rep in reports])
    out_t, out_r = [], []
    for i in range(1, len(snapshots) - 1):
        de = (e0[i + 1] - e0[i - 1]) / (2.0 * h)
        rhs_tot = identity_rhs_total(snapshots[i], steady, params, grid, mode)
        out_t.append(times[i])
        out_r.append(abs(de + reports[i].D0 - rhs_tot))
    return np.array(out_t), np.array(out_r)


class IdentityRecorder:
    """Incremental residual bookkeeping for the run loop.

    push() ingests snapshots in time order and fills each row's residual once
    its successor arrives (centered differences); first/last rows keep NaN.
    """

    def __init__(self, steady, params, grid, mode):
        self.steady = steady
        self.params = params
        self.grid = grid
        self.mode = mode
        self.rows = []
        self._e0 = []
        self._d0 = []
        self._rhs = []
        self._flushed = 0

    def push(self, state):
        cq = conserved_quantities(state, self.steady, self.grid)
        en = basic_energy(state, self.steady, self.params, self.grid, self.mode)
        rhs_tot = identity_rhs_total(state, self.steady, self.params,
                                     self.grid, self.mode)
        row = {
            "t": state.t, "mass": cq.mass,
            "L1": cq.L[0], "L2": cq.L[1], "L3": cq.L[2],
            "E0": en.E0, "D0": en.D0, "residual": math.nan,
        }
        self.rows.append(row)
        self._e0.append(en.E0)
        self._d0.append(en.D0)
        self._rhs.append(rhs_tot)
        n = len(self.rows)
        if n >= 3:
            i = n - 2
            h = self.rows[i + 1]["t"] - self.rows[i]["t"]
            de = (self._e0[i + 1] - self._e0[i - 1]) / (2.0 * h)
            self.rows[i]["residual"] = abs(de + self._d0[i] - self._rhs[i])
        return row

    def flush_ready(self):
        ready = len(self.rows) - 1  # last row may still gain a residual
        out = self.rows[self._flushed : max(self._flushed, ready)]
        self._flushed = max(self._flushed, ready)
        return out

    def flush_all(self):
        out = self.rows[self._flushed :]
        self._flushed = len(self.rows)
        return out


def anisotropic_norms(state, grid: MeridianGrid) -> AnisotropicNorms:
    """Squared frame-derivative and cutoff-weighted gradient norms.

    For a mode-0 scalar the tangential energy sums to the colatitude
    derivative, sum_i |grad_{phi_i} f|^2 = r^2 |grad f|^2 - |grad_N f|^2;
    vectors are treated per Cartesian component via the row split of
    |grad v|^2.
    """
    q, vr, vt, vp = state.fields
    rc = grid.rc
    dq_r = geo.d_dr(q, grid)
    dq_t = geo.d_dtheta(q, grid)

    gt_q = integrate(dq_t**2, grid)
    gn_q = integrate((rc * dq_r) ** 2, grid)

    row_r, row_t, row_p = geo.grad_vector_rows(vr, vt, vp, grid)
    gn_v = integrate(rc**2 * row_r, grid)
    gt_v = integrate(rc**2 * (row_t + row_p), grid)

    psi = geo.cutoff_psi_radial(rc) * np.ones(grid.shape)
    dpsi = geo.cutoff_psi_grad_radial(rc) * np.ones(grid.shape)
    gpsi_q = integrate((psi * dq_r + q * dpsi) ** 2 + (psi * dq_t / rc) ** 2,
                       grid)
    vsq = vr**2 + vt**2 + vp**2
    dv_half_r = vr * geo.d_dr(vr, grid) + vt * geo.d_dr(vt, grid) + vp * geo.d_dr(vp, grid)
    gpsi_v = integrate(
        psi**2 * (row_r + row_t + row_p) + 2.0 * psi * dpsi * dv_half_r
        + dpsi**2 * vsq,
        grid,
    )

    gq = integrate(dq_r**2 + (dq_t / rc) ** 2, grid)
    gv = integrate(row_r + row_t + row_p, grid)
    denom_q = gpsi_q + gt_q + gn_q
    denom_v = gpsi_v + gt_v + gn_v
    c_q = gq / denom_q if denom_q > 0.0 else 0.0
    c_v = gv / denom_v if denom_v > 0.0 else 0.0
    return AnisotropicNorms(
        grad_t_q=gt_q, grad_n_q=gn_q, grad_t_v=gt_v, grad_n_v=gn_v,
        grad_psi_q=gpsi_q, grad_psi_v=gpsi_v, c_q=c_q, c_v=c_v,
    )


def fit_decay_rate(times, e0, window=None, floor: float = 1e-30) -> DecayFit:
    """Least-squares exponential rate of an E0 series.

    Fits a line to (t, log E0) over the window (default: the second half of
    the series), excluding samples at or below the positivity floor.
    sigma = -slope; r_squared reports fit quality.
    """
    times = np.asarray(times, dtype=np.float64)
    e0 = np.asarray(e0, dtype=np.float64)
    if window is None:
        t0 = times[0] + 0.5 * (times[-1] - times[0])
        window = (t0, times[-1])
    lo, hi = window
    mask = (times >= lo) & (times <= hi) & (e0 > floor) & np.isfinite(e0)
    if int(np.sum(mask)) < 4:
        raise ValueError(
            f"insufficient samples: {int(np.sum(mask))} usable in window "
            f"[{lo:g}, {hi:g}]"
        )
    t = times[mask]
    y = np.log(e0[mask])
    A = np.stack([t, np.ones_like(t)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    fitted = A @ coef
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 and ss_res == 0.0 else 1.0 - ss_res / ss_tot
    r2 = min(max(r2, 0.0), 1.0)
    return DecayFit(sigma=-float(coef[0]), r_squared=r2,
                    window=(float(lo), float(hi)), samples=int(np.sum(mask)))
