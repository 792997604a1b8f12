"""Time evolution of the perturbation system on the meridian grid.

The state is (q, v_r, v_theta, v_phi): density perturbation and velocity
perturbation in spherical components, axisymmetric with swirl.  The tendency
is the full compressible operator minus its steady-state balance, written so
the zero perturbation is an exact discrete equilibrium (no steady residual is
ever evaluated).

Pole/origin treatment: cell centers avoid the coordinate singularities and
ghost reflections close the stencils, but explicit stepping would still be
throttled by grid-scale colatitude modes on the innermost rings, where the
physical arc length r*dtheta collapses.  Rings near the origin therefore keep
only a Legendre band of colatitude modes, with bandwidth growing linearly in
r (a standard polar-grid treatment).  Smooth fields lose nothing measurable;
the stable step recovers the dr-based viscous bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import lpmv

from . import _kernels
from .geometry import MeridianGrid, integrate
from .steady import SteadyStateField, SteadyStateParams, sample_steady

FILTER_BAND_SLOPE = 2.0  # kept colatitude modes per ring index


class VacuumBreachError(RuntimeError):
    """Density went non-positive during generation or stepping."""


class BlowUpError(RuntimeError):
    """Non-finite values or runaway density perturbation detected."""


@dataclass(frozen=True)
class PerturbationState:
    t: float
    q: np.ndarray
    vr: np.ndarray
    vt: np.ndarray
    vp: np.ndarray

    @property
    def fields(self):
        return self.q, self.vr, self.vt, self.vp

    def copy(self):
        return PerturbationState(self.t, self.q.copy(), self.vr.copy(),
                                 self.vt.copy(), self.vp.copy())


@dataclass(frozen=True)
class RHSBreakdown:
    """Term-by-term tendency decomposition.

    Summing (cont_div + cont_adv + g1) gives the q tendency and
    (pressure + viscous + f2 + advection + g2_adv) the velocity tendency,
    exactly as stepped.  pressure_split re-evaluates the pressure force the
    split way, gamma rho_b grad(rho_b^(gamma-2) q) + grad(R), as a
    cross-check; remainder holds the pointwise R field.
    """

    cont_div: np.ndarray
    cont_adv: np.ndarray
    g1: np.ndarray
    pressure: tuple
    viscous: tuple
    f2: tuple
    advection: tuple
    g2_adv: tuple
    pressure_split: tuple
    remainder: np.ndarray

    def q_tendency(self):
        return self.cont_div + self.cont_adv + self.g1

    def v_tendency(self):
        out = []
        for i in range(3):
            out.append(self.pressure[i] + self.viscous[i] + self.f2[i]
                       + self.advection[i] + self.g2_adv[i])
        return tuple(out)


@dataclass(frozen=True)
class SimConfig:
    params: SteadyStateParams
    nr: int = 64
    ntheta: int = 64
    t_end: float = 1.0
    cfl_acoustic: float = 0.4
    cfl_viscous: float = 0.25
    mode: str = "nonlinear"  # or "linearized"
    output_interval: float = 0.05
    checkpoint_interval: float = 0.0  # 0 disables periodic checkpoints
    seed: int = 0
    amplitude: float = 0.0
    shape: str = "smooth-poly"

    def __post_init__(self):
        if not (0.0 < self.cfl_acoustic < 1.0 and 0.0 < self.cfl_viscous < 1.0):
            raise ValueError("CFL safety factors must lie in (0, 1)")
        if self.t_end < 0.0:
            raise ValueError("t_end must be nonnegative")
        if self.mode not in ("nonlinear", "linearized"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.output_interval <= 0.0:
            raise ValueError("output_interval must be positive")


# ---------------------------------------------------------------------------
# Static stencil data
# ---------------------------------------------------------------------------

class _FilterPack:
    """Near-origin colatitude band limiter.

    q and v_phi rings keep Legendre / associated-Legendre bands of width
    growing linearly in the ring index.  The spheroidal pair (v_r, v_theta)
    is projected jointly: where the non-smooth pairing at degree l would
    carry a viscous reaction ~ (l+1)(l+2) (2 mu + lam) / r^2 beyond the
    explicit-step budget, only the pairing realizable by smooth fields at
    leading order, (l P_l, d_theta P_l), is kept.  The suppressed content is
    O(r^2)-relatively small in smooth fields, matching the scheme order.
    """

    def __init__(self, grid: MeridianGrid):
        nt = grid.ntheta
        x = np.cos(grid.theta)
        w = np.sin(grid.theta)
        l_cap = int(2.0 * nt / np.pi)
        # (l+1)(l+2) <= anti_budget * (j+1/2)^2 frees both pairings; the
        # budget mirrors dt ~ cfl * dr^2 / (2 mu + lam) against RK4's real
        # axis, with a safety factor.
        anti_budget = 8.0

        rings = []
        basis_q, dual_q, basis_p, dual_p = [], [], [], []
        basis_j, dual_j = [], []
        dtp = np.stack(
            [lpmv(1, l, x) for l in range(1, l_cap + 2)], axis=1
        )  # P_l^1 ~ -sin * P_l'; spans the same space as d_theta P_l
        for j in range(grid.nr):
            l_keep = max(1, int(math.floor(FILTER_BAND_SLOPE * (j + 0.5))))
            if l_keep >= l_cap:
                break
            rings.append(j)
            Vq = np.stack([lpmv(0, l, x) for l in range(l_keep + 1)], axis=1)
            Vp = dtp[:, :l_keep]
            basis_q.append(_orthonormal(Vq, w))
            dual_q.append(_dual(basis_q[-1], w))
            basis_p.append(_orthonormal(Vp, w))
            dual_p.append(_dual(basis_p[-1], w))

            all_free = (l_keep + 1.0) * (l_keep + 2.0) <= anti_budget * (
                j + 0.5
            ) ** 2
            if all_free:
                # separate band projections suffice; flag with empty joint
                basis_j.append(np.zeros((2 * nt, 0)))
                dual_j.append(np.zeros((2 * nt, 0)))
                continue
            cols = []
            if j >= 1:
                cols.append(np.concatenate([np.ones(nt), np.zeros(nt)]))
            for l in range(1, l_keep + 1):
                pl = lpmv(0, l, x)
                # d_theta P_l(cos theta) = P_l^1 with the Condon-Shortley sign
                dpl = lpmv(1, l, x)
                free = (l + 1.0) * (l + 2.0) <= anti_budget * (j + 0.5) ** 2
                if free:
                    cols.append(np.concatenate([pl, np.zeros(nt)]))
                    cols.append(np.concatenate([np.zeros(nt), dpl]))
                else:
                    cols.append(np.concatenate([l * pl, dpl]))
            Vj = np.stack(cols, axis=1)
            w2 = np.concatenate([w, w])
            basis_j.append(_orthonormal(Vj, w2))
            dual_j.append(_dual(basis_j[-1], w2))

        self.rings = rings
        self.basis_q = basis_q
        self.dual_q = dual_q
        self.basis_p = basis_p
        self.dual_p = dual_p
        self.basis_j = basis_j
        self.dual_j = dual_j

        n = len(rings)
        self.rings_arr = np.array(rings, dtype=np.int64)
        self.nmodes_q_arr = np.array([b.shape[1] for b in basis_q], dtype=np.int64)
        self.nmodes_p_arr = np.array([b.shape[1] for b in basis_p], dtype=np.int64)
        self.nmodes_j_arr = np.array([b.shape[1] for b in basis_j], dtype=np.int64)
        lq = max((b.shape[1] for b in basis_q), default=1)
        lp = max((b.shape[1] for b in basis_p), default=1)
        lj = max((b.shape[1] for b in basis_j), default=1)
        self.basis_q_arr = np.zeros((n, nt, lq))
        self.dual_q_arr = np.zeros((n, nt, lq))
        self.basis_p_arr = np.zeros((n, nt, lp))
        self.dual_p_arr = np.zeros((n, nt, lp))
        self.basis_j_arr = np.zeros((n, 2 * nt, lj))
        self.dual_j_arr = np.zeros((n, 2 * nt, lj))
        for i in range(n):
            self.basis_q_arr[i, :, : basis_q[i].shape[1]] = basis_q[i]
            self.dual_q_arr[i, :, : basis_q[i].shape[1]] = dual_q[i]
            self.basis_p_arr[i, :, : basis_p[i].shape[1]] = basis_p[i]
            self.dual_p_arr[i, :, : basis_p[i].shape[1]] = dual_p[i]
            self.basis_j_arr[i, :, : basis_j[i].shape[1]] = basis_j[i]
            self.dual_j_arr[i, :, : basis_j[i].shape[1]] = dual_j[i]

    def project_state(self, q, vr, vt, vp):
        _kernels.apply_ring_filter((q, vr, vt, vp), self)


def _orthonormal(V, w):
    """W-orthonormal column span of V (QR of the weighted columns)."""
    A = np.sqrt(w)[:, None] * V
    Q, R = np.linalg.qr(A)
    keep = np.abs(np.diag(R)) > 1e-10 * np.abs(R).max()
    return Q[:, keep] / np.sqrt(w)[:, None]


def _dual(V, w):
    G = V.T @ (w[:, None] * V)
    return (w[:, None] * V) @ np.linalg.inv(G)


class StencilStatics:
    """Precomputed metric/steady arrays on the padded grid plus workspaces."""

    def __init__(self, grid: MeridianGrid, params: SteadyStateParams,
                 use_filter: bool = True):
        self.grid = grid
        nr, nt = grid.nr, grid.ntheta
        self.dr = grid.dr
        self.dtheta = grid.dtheta
        self.gamma = params.gamma
        self.mu = params.mu
        self.lam = params.lam
        self.omega = params.omega_bar

        self.r_pad = (np.arange(nr + 4) - 1.5) * grid.dr
        th_pad = (np.arange(nt + 4) - 1.5) * grid.dtheta
        self.sin_pad = np.sin(th_pad)
        self.cos_pad = np.cos(th_pad)
        with np.errstate(divide="ignore"):
            self.inv_r_pad = np.where(self.r_pad != 0.0, 1.0 / self.r_pad, 0.0)
            self.inv_sin_pad = 1.0 / self.sin_pad
        self.cot_pad = self.cos_pad * self.inv_sin_pad

        s2 = (self.r_pad[:, None] * self.sin_pad[None, :]) ** 2
        g = params.gamma
        base = params.rho_center ** (g - 1.0) + (g - 1.0) / (2.0 * g) * (
            params.omega_bar**2
        ) * s2
        self.rho_bar_pad = base ** (1.0 / (g - 1.0))
        self.rho_gamma_pad = self.rho_bar_pad**g
        self.c2_bar_pad = g * self.rho_bar_pad ** (g - 1.0)
        self.ubar_pad = (
            -params.omega_bar * self.r_pad[:, None] * self.sin_pad[None, :]
        )

        rc = grid.rc
        sin_c, cos_c = grid.sin_t, grid.cos_t
        om2 = params.omega_bar**2
        self.cf_r = np.ascontiguousarray(-om2 * rc * sin_c**2 * np.ones(grid.shape))
        self.cf_t = np.ascontiguousarray(-om2 * rc * sin_c * cos_c * np.ones(grid.shape))

        self.wall_c1 = (2.0 + grid.dr) / (2.0 - grid.dr)
        self.wall_c2 = (2.0 + 3.0 * grid.dr) / (2.0 - 3.0 * grid.dr)

        # face coordinates for the flux-form viscous operator; the r = 0 and
        # sin(theta) = 0 faces carry no flux
        self.r_face = np.arange(nr + 1) * grid.dr
        self.sin_face = np.sin(np.arange(nt + 1) * grid.dtheta)
        self.sin_face[0] = 0.0
        self.sin_face[-1] = 0.0

        # workspaces
        self.ws_frr = np.zeros((nr + 1, nt))
        self.ws_frt = np.zeros_like(self.ws_frr)
        self.ws_frp = np.zeros_like(self.ws_frr)
        self.ws_gtr = np.zeros((nr, nt + 1))
        self.ws_gtt = np.zeros_like(self.ws_gtr)
        self.ws_gtp = np.zeros_like(self.ws_gtr)
        self.ws_phat = np.zeros((nr + 4, nt + 4))
        self.ws_pw = np.zeros((nr + 4, nt + 4))
        self.ws_flr = np.zeros((nr + 1, nt))
        self.ws_flt = np.zeros((nr, nt + 1))

        self.fpack = _FilterPack(grid) if use_filter else None

    def min_rho_bar(self):
        return float(np.min(self.rho_bar_pad[2:-2, 2:-2]))


_STATICS_CACHE: dict = {}


def _statics_for(grid: MeridianGrid, params: SteadyStateParams,
                 use_filter: bool = True) -> StencilStatics:
    key = (grid.nr, grid.ntheta, params, use_filter)
    st = _STATICS_CACHE.get(key)
    if st is None:
        st = StencilStatics(grid, params, use_filter)
        _STATICS_CACHE[key] = st
    return st


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def apply_slip_bc(state_fields, grid: MeridianGrid, params: SteadyStateParams):
    """Padded copies of (q, v_r, v_theta, v_phi) with all ghost closures.

    Wall ghosts impose v_r = 0 at r = 1 (odd image), zero tangential stress
    for v_theta/v_phi (slope-even image), and a homogeneous normal gradient
    for q; origin/axis ghosts are the spherical parity reflections.
    """
    st = _statics_for(grid, params)
    nr, nt = grid.shape
    pads = tuple(np.empty((nr + 4, nt + 4)) for _ in range(4))
    _kernels.fill_ghosts(state_fields, pads, st.wall_c1, st.wall_c2)
    return pads


def _tendency_into(st: StencilStatics, pads, outs, mode_flag):
    _kernels.stage_tendency(pads, outs, st, mode_flag)


def rhs(state: PerturbationState, steady: SteadyStateField,
        params: SteadyStateParams, mode: str = "nonlinear",
        grid: MeridianGrid | None = None) -> RHSBreakdown:
    """Full tendency decomposition (diagnostic path, pure numpy).

    Raises VacuumBreachError if the total density is non-positive anywhere.
    """
    if grid is None:
        raise ValueError("rhs requires the grid")
    st = _statics_for(grid, params)
    q, vr, vt, vp = state.fields
    rho = steady.rho_bar + q
    if np.min(rho) <= 0.0:
        j, k = np.unravel_index(int(np.argmin(rho)), rho.shape)
        raise VacuumBreachError(
            f"vacuum breach at cell (j={j}, k={k}), "
            f"r={grid.r[j]:.4f}, theta={grid.theta[k]:.4f}"
        )
    linear = mode == "linearized"
    pads = apply_slip_bc(state.fields, grid, params)
    qp, vrp, vtp, vpp = pads
    dr, dth = grid.dr, grid.dtheta

    def DR(a):
        return (a[3:-1, 2:-2] - a[1:-3, 2:-2]) / (2.0 * dr)

    def DT(a):
        return (a[2:-2, 3:-1] - a[2:-2, 1:-3]) / (2.0 * dth)

    rc, sin_c, cos_c, cot_c = grid.rc, grid.sin_t, grid.cos_t, grid.cot_t
    rho_b = steady.rho_bar

    cont_div = -(
        DR(st.rho_bar_pad * vrp)
        + 2.0 * rho_b * vr / rc
        + (DT(st.rho_bar_pad * vtp) + cot_c * rho_b * vt) / rc
    )
    divv = DR(vrp) + 2.0 * vr / rc + (DT(vtp) + cot_c * vt) / rc
    if linear:
        cont_adv = np.zeros(grid.shape)
        g1 = np.zeros(grid.shape)
    else:
        cont_adv = -(vr * DR(qp) + vt * DT(qp) / rc)
        g1 = -q * divv

    inv_rho = 1.0 / (rho_b if linear else rho)

    # pressure (unsplit) and its split-form cross-check
    if linear:
        phat_pad = st.c2_bar_pad * qp
    elif params.gamma == 2.0:
        phat_pad = qp * (2.0 * st.rho_bar_pad + qp)
    else:
        phat_pad = st.rho_gamma_pad * np.expm1(
            params.gamma * np.log1p(qp / st.rho_bar_pad)
        )
    pres = (
        -inv_rho * (DR(phat_pad) + q * st.cf_r),
        -inv_rho * (DT(phat_pad) / rc + q * st.cf_t),
        np.zeros(grid.shape),
    )
    g = params.gamma
    remainder = phat_pad[2:-2, 2:-2] - g * rho_b ** (g - 1.0) * q
    rem_pad = phat_pad - g * st.rho_bar_pad ** (g - 1.0) * qp
    lin_pad = g * st.rho_bar_pad ** (g - 2.0) * qp
    pressure_split = (
        -inv_rho * (g * rho_b * DR(lin_pad) + DR(rem_pad)),
        -inv_rho * (g * rho_b * DT(lin_pad) / rc + DT(rem_pad) / rc),
        np.zeros(grid.shape),
    )

    visc = _viscous_force(st, pads)
    viscous = tuple(inv_rho * comp for comp in visc)

    om = params.omega_bar
    cor = (
        2.0 * om * sin_c * vp * np.ones(grid.shape),
        2.0 * om * cos_c * vp,
        -2.0 * om * (sin_c * vr + cos_c * vt),
    )
    rho_fac = rho_b * inv_rho

    # swirl parts via the angular-momentum flux pairing (see _kernels): the
    # flux of rho w m splits linearly over {rho_b ubar, rho_b v_phi, q w} m,
    # matching the F2 / advection / G2 roles term by term.
    m_pad = st.r_pad[:, None] * st.sin_pad[None, :]
    m_c = m_pad[2:-2, 2:-2]
    kq_full = cont_div + cont_adv + g1
    rho_m = rho_b if linear else rho

    def ell_div(pw_pad):
        rfc = st.r_face[:, None]
        nr_, nt_ = grid.shape
        flr = (
            0.5 * (vrp[1 : nr_ + 2, 2 : nt_ + 2] + vrp[2 : nr_ + 3, 2 : nt_ + 2])
            * 0.5 * (pw_pad[1 : nr_ + 2, 2 : nt_ + 2]
                     + pw_pad[2 : nr_ + 3, 2 : nt_ + 2])
            * rfc**2
        )
        flt = (
            0.5 * (vtp[2 : nr_ + 2, 1 : nt_ + 2] + vtp[2 : nr_ + 2, 2 : nt_ + 3])
            * 0.5 * (pw_pad[2 : nr_ + 2, 1 : nt_ + 2]
                     + pw_pad[2 : nr_ + 2, 2 : nt_ + 3])
            * st.sin_face[None, :]
        )
        return (flr[1:, :] - flr[:-1, :]) / grid.dr / rc**2 + (
            flt[:, 1:] - flt[:, :-1]
        ) / grid.dtheta / (rc * sin_c)

    f2_p = (-ell_div(st.rho_bar_pad * st.ubar_pad * m_pad)
            - kq_full * st.ubar_pad[2:-2, 2:-2] * m_c) / (rho_m * m_c)
    f2 = (-rho_fac * cor[0], -rho_fac * cor[1], f2_p)

    if linear:
        zero = np.zeros(grid.shape)
        advection = (zero, zero.copy(), zero.copy())
        g2_adv = (zero.copy(), zero.copy(), zero.copy())
    else:
        avv_r = vr * DR(vrp) + vt * DT(vrp) / rc - (vt**2 + vp**2) / rc
        avv_t = (
            vr * DR(vtp) + vt * DT(vtp) / rc + (vr * vt - cot_c * vp**2) / rc
        )
        adv_p = (-ell_div(st.rho_bar_pad * vpp * m_pad)
                 - kq_full * vp * m_c) / (rho_m * m_c)
        g2_p = -ell_div(qp * (st.ubar_pad + vpp) * m_pad) / (rho_m * m_c)
        q_fac = q * inv_rho
        advection = (-rho_fac * avv_r, -rho_fac * avv_t, adv_p)
        g2_adv = (-q_fac * (cor[0] + avv_r), -q_fac * (cor[1] + avv_t), g2_p)

    return RHSBreakdown(
        cont_div=cont_div, cont_adv=cont_adv, g1=g1,
        pressure=pres, viscous=viscous, f2=f2, advection=advection,
        g2_adv=g2_adv, pressure_split=pressure_split, remainder=remainder,
    )


def _viscous_force(st: StencilStatics, pads):
    """div S(v) on the core (staggered flux form; see _kernels)."""
    return _kernels.viscous_force_numpy(pads, st)


def stable_dt(state: PerturbationState, steady: SteadyStateField,
              params: SteadyStateParams, grid: MeridianGrid,
              cfl_acoustic: float = 0.4, cfl_viscous: float = 0.25,
              use_filter: bool = True) -> float:
    """Acoustic/viscous explicit step bound.

    h is the smallest physical cell extent in the meridian metric.  With the
    near-origin band limiter active the effective colatitude spacing is
    r * pi / l_keep(r) >= dr * pi / band_slope, so h reduces to dr; without
    it the r_min * dtheta arc applies.
    """
    rho = steady.rho_bar + state.q
    rho_min = float(np.min(rho))
    if rho_min <= 0.0:
        raise VacuumBreachError("non-positive density in stable_dt")
    c_max = math.sqrt(params.gamma * float(np.max(rho)) ** (params.gamma - 1.0))
    u_max = float(
        np.max(
            np.sqrt(state.vr**2 + state.vt**2 + (steady.u_phi_bar + state.vp) ** 2)
        )
    )
    if use_filter:
        h_theta = grid.dr * np.pi / FILTER_BAND_SLOPE
    else:
        h_theta = float(grid.r[0]) * grid.dtheta
    h = min(grid.dr, h_theta)
    dt_ac = cfl_acoustic * h / (u_max + c_max)
    dt_visc = cfl_viscous * h * h * rho_min / (2.0 * params.mu + params.lam)
    return min(dt_ac, dt_visc)


class Stepper:
    """Reusable RK4 stepper bound to one (grid, params, mode)."""

    def __init__(self, grid: MeridianGrid, params: SteadyStateParams,
                 mode: str = "nonlinear", use_filter: bool = True):
        self.grid = grid
        self.params = params
        self.mode = mode
        self.mode_flag = (_kernels.MODE_LINEARIZED if mode == "linearized"
                          else _kernels.MODE_NONLINEAR)
        self.st = _statics_for(grid, params, use_filter)
        nr, nt = grid.shape
        self._pads = tuple(np.zeros((nr + 4, nt + 4)) for _ in range(4))
        self._k = tuple(np.zeros((nr, nt)) for _ in range(4))
        self._acc = tuple(np.zeros((nr, nt)) for _ in range(4))
        self._ycur = tuple(np.zeros((nr, nt)) for _ in range(4))

    def _eval(self, y4, forcing=None, t=0.0):
        _kernels.fill_ghosts(y4, self._pads, self.st.wall_c1, self.st.wall_c2)
        _kernels.stage_tendency(self._pads, self._k, self.st, self.mode_flag)
        if self.st.fpack is not None:
            _kernels.apply_ring_filter(self._k, self.st.fpack)
        if forcing is not None:
            fq, fvr, fvt, fvp = forcing(t)
            self._k[0][:] += fq
            self._k[1][:] += fvr
            self._k[2][:] += fvt
            self._k[3][:] += fvp

    def _check(self, y4, qmax=None):
        q = y4[0]
        rho_min = self.st.min_rho_bar()
        if qmax is None:
            qmax = float(np.max(np.abs(q)))
        if not math.isfinite(qmax):
            raise BlowUpError("non-finite state detected")
        if qmax > 10.0 * rho_min:
            raise BlowUpError(
                f"density perturbation {qmax:.3g} exceeds 10x min steady "
                f"density {rho_min:.3g}"
            )
        if qmax >= rho_min:  # only then can the density reach zero
            rho = self.st.rho_bar_pad[2:-2, 2:-2] + q
            if float(np.min(rho)) <= 0.0:
                j, k = np.unravel_index(int(np.argmin(rho)), q.shape)
                raise VacuumBreachError(
                    f"vacuum breach at cell (j={j}, k={k}), "
                    f"r={self.grid.r[j]:.4f}, theta={self.grid.theta[k]:.4f}"
                )

    def _check_full(self, y4):
        if not all(np.all(np.isfinite(a)) for a in y4):
            raise BlowUpError("non-finite state detected")
        self._check(y4)

    def step_arrays(self, y4, dt, t, forcing=None):
        """One RK4 step in place on the tuple of core arrays."""
        if forcing is None and _kernels.HAS_FUSED_STEP:
            qmax = _kernels.rk4_step(y4, self._pads, self._k, self._acc,
                                     self._ycur, self.st, self.st.fpack,
                                     self.mode_flag, dt)
            self._nstep = getattr(self, "_nstep", 0) + 1
            if self._nstep % 16 == 0:
                self._check_full(y4)
            else:
                self._check(y4, qmax)
            return
        k, acc, ycur = self._k, self._acc, self._ycur
        self._eval(y4, forcing, t)
        for a, ki in zip(acc, k):
            a[:] = ki
        for yc, y0, ki in zip(ycur, y4, k):
            np.multiply(ki, 0.5 * dt, out=yc)
            yc += y0
        self._eval(ycur, forcing, t + 0.5 * dt)
        for a, ki in zip(acc, k):
            a += 2.0 * ki
        for yc, y0, ki in zip(ycur, y4, k):
            np.multiply(ki, 0.5 * dt, out=yc)
            yc += y0
        self._eval(ycur, forcing, t + 0.5 * dt)
        for a, ki in zip(acc, k):
            a += 2.0 * ki
        for yc, y0, ki in zip(ycur, y4, k):
            np.multiply(ki, dt, out=yc)
            yc += y0
        self._eval(ycur, forcing, t + dt)
        for a, ki in zip(acc, k):
            a += ki
        for y0, a in zip(y4, acc):
            y0 += (dt / 6.0) * a
        self._check_full(y4)


def step(state: PerturbationState, steady: SteadyStateField,
         params: SteadyStateParams, dt: float, mode: str = "nonlinear",
         grid: MeridianGrid | None = None, forcing=None) -> PerturbationState:
    """Advance one RK4 step (convenience wrapper; builds a stepper)."""
    if grid is None:
        raise ValueError("step requires the grid")
    stepper = Stepper(grid, params, mode)
    y4 = tuple(a.copy() for a in state.fields)
    stepper.step_arrays(y4, dt, state.t, forcing)
    return PerturbationState(state.t + dt, *y4)


# ---------------------------------------------------------------------------
# Initial data generator
# ---------------------------------------------------------------------------

def make_initial_perturbation(amplitude: float, steady: SteadyStateField,
                              grid: MeridianGrid, seed: int = 0,
                              shape: str = "smooth-poly",
                              params: SteadyStateParams | None = None
                              ) -> PerturbationState:
    """Smooth random admissible initial data.

    The raw fields are low-degree polynomials in (r^2, r cos theta) assembled
    so each velocity component has the right parity at the axis and origin
    and v_r vanishes on the boundary sphere.  The density bump is then
    shifted to add zero mass and the swirl receives a rigid-rotation
    correction so every angular-momentum component matches the steady state.
    """
    if params is None:
        params = steady.params
    if amplitude < 0.0:
        raise ValueError("amplitude must be nonnegative")
    min_rho = float(np.min(steady.rho_bar))
    if amplitude >= min_rho:
        raise VacuumBreachError(
            f"amplitude {amplitude:.3g} reaches the minimum steady density "
            f"{min_rho:.3g}; vacuum would appear"
        )
    if shape not in ("smooth-poly",):
        raise ValueError(f"unknown perturbation shape {shape!r}")

    nr, nt = grid.shape
    if amplitude == 0.0:
        zero = np.zeros(grid.shape)
        return PerturbationState(0.0, zero, zero.copy(), zero.copy(),
                                 zero.copy())

    rng = np.random.default_rng(np.random.PCG64(seed))
    rc, sin_c, cos_c = grid.rc, grid.sin_t, grid.cos_t
    r2 = rc**2 * np.ones(grid.shape)
    z = rc * cos_c
    s2 = rc**2 * sin_c**2

    def poly(max_deg):
        out = np.zeros(grid.shape)
        for a in range(max_deg + 1):
            for b in range(max_deg + 1 - a):
                out += rng.uniform(-1.0, 1.0) * r2**a * z**b
        return out

    q0 = poly(3)
    A = poly(2)
    B = poly(2)
    C = poly(2)
    damp = 1.0 - r2
    vr0 = damp * (rc * A * sin_c**2 + B * cos_c)
    vt0 = damp * (rc * A * sin_c * cos_c - B * sin_c)
    vp0 = rc * sin_c * C

    q0 *= amplitude / max(np.max(np.abs(q0)), 1e-300)
    vmax = max(np.max(np.abs(vr0)), np.max(np.abs(vt0)), np.max(np.abs(vp0)))
    scale = amplitude / max(vmax, 1e-300)
    vr0 *= scale
    vt0 *= scale
    vp0 *= scale

    st = _statics_for(grid, params)
    if st.fpack is not None:
        st.fpack.project_state(q0, vr0, vt0, vp0)

    # zero added mass
    q0 -= integrate(q0, grid) / grid.volume()
    if float(np.min(steady.rho_bar + q0)) <= 0.0:
        raise VacuumBreachError("perturbation drives density non-positive")

    # match angular momentum: solve the phi_3 Gram equation for the rigid
    # correction (phi_1/phi_2 moments vanish identically at mode 0)
    rho = steady.rho_bar + q0
    p3 = -(rc * sin_c) * np.ones(grid.shape)
    defect = integrate(rho * (steady.u_phi_bar + vp0) * p3, grid) - integrate(
        steady.rho_bar * steady.u_phi_bar * p3, grid
    )
    gram = integrate(rho * p3 * p3, grid)
    delta3 = -defect / gram
    vp0 += delta3 * p3

    return PerturbationState(0.0, q0, vr0, vt0, vp0)


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    config: SimConfig
    rows: list            # diagnostic rows (dicts), one per output tick
    final_state: PerturbationState
    dt: float
    steps: int
    checkpoints: list = field(default_factory=list)


def run(config: SimConfig, sink=None, initial_state: PerturbationState | None = None,
        start_tick: int = 0) -> RunResult:
    """Step to t_end, emitting diagnostics at the output cadence.

    sink, when given, must provide on_row(row_dict) and may provide
    on_checkpoint(state, config) -> value appended to the checkpoint list.
    Deterministic for a fixed (config, backend).
    """
    from . import diagnostics as diag

    grid_obj = _grid_for(config)
    steady = sample_steady(config.params, grid_obj)
    if initial_state is None:
        state0 = make_initial_perturbation(
            config.amplitude, steady, grid_obj, seed=config.seed,
            shape=config.shape, params=config.params,
        )
    else:
        state0 = initial_state

    dt0 = stable_dt(state0, steady, config.params, grid_obj,
                    config.cfl_acoustic, config.cfl_viscous)
    n_sub = max(1, math.ceil(round(config.output_interval / dt0, 12)))
    dt = config.output_interval / n_sub
    n_ticks = int(round(config.t_end / config.output_interval))
    if abs(n_ticks * config.output_interval - config.t_end) > 1e-9 * max(
        1.0, config.t_end
    ):
        raise ValueError("t_end must be a multiple of output_interval")

    stepper = Stepper(grid_obj, config.params, config.mode)
    y4 = tuple(a.copy() for a in state0.fields)

    ckpt_every = 0
    if config.checkpoint_interval > 0.0:
        ckpt_every = max(
            1, int(round(config.checkpoint_interval / config.output_interval))
        )

    rows = []
    checkpoints = []
    recorder = diag.IdentityRecorder(steady, config.params, grid_obj,
                                     config.mode)

    def emit(tick):
        t = (start_tick + tick) * config.output_interval
        state = PerturbationState(t, *(a.copy() for a in y4))
        row = recorder.push(state)
        rows.append(row)
        if sink is not None:
            flushed = recorder.flush_ready()
            for r in flushed:
                sink.on_row(r)
        if (
            ckpt_every
            and sink is not None
            and hasattr(sink, "on_checkpoint")
            and tick > 0
            and tick % ckpt_every == 0
        ):
            checkpoints.append(sink.on_checkpoint(state, config))
        return state

    emit(0)
    steps = 0
    try:
        for tick in range(1, n_ticks + 1):
            t_base = (start_tick + tick - 1) * config.output_interval
            for i in range(n_sub):
                stepper.step_arrays(y4, dt, t_base + i * dt)
                steps += 1
            emit(tick)
    finally:
        if sink is not None:
            for r in recorder.flush_all():
                sink.on_row(r)

    final = PerturbationState((start_tick + n_ticks) * config.output_interval,
                              *(a.copy() for a in y4))
    return RunResult(config=config, rows=recorder.rows, final_state=final,
                     dt=dt, steps=steps, checkpoints=checkpoints)


def _grid_for(config: SimConfig) -> MeridianGrid:
    from .geometry import build_meridian_grid

    return build_meridian_grid(config.nr, config.ntheta)
