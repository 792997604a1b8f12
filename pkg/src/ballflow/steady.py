"""Uniformly rotating steady states of the compressible flow in the unit ball.

The family is explicit: rigid swirl u = omega * (x2, -x1, 0) and a density
that balances the centrifugal force,

    rho(s) = (rho_center^(g-1) + (g-1)/(2g) * omega^2 * s^2)^(1/(g-1)),

with s the cylindrical radius.  Mass bookkeeping for the family uses a
Gauss-Legendre tensor rule (node counts follow the grid) so thresholds are
resolved far below the bisection tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import MeridianGrid, d_dr, d_dtheta, integrate


class VacuumRegimeError(ValueError):
    """Total mass is too small for a non-vacuum rotating profile."""


@dataclass(frozen=True)
class SteadyStateParams:
    gamma: float
    mu: float
    lam: float
    omega_bar: float
    rho_center: float

    def __post_init__(self):
        if self.gamma <= 1.0:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if self.mu <= 0.0 or self.lam <= 0.0:
            raise ValueError("viscosities mu, lambda must be positive")
        if self.omega_bar < 0.0:
            raise ValueError("omega_bar must be nonnegative")
        if self.rho_center <= 0.0:
            raise ValueError("rho_center must be positive (non-vacuum profile)")


def steady_density(s, params: SteadyStateParams):
    """Density profile as a function of cylindrical radius s in [0, 1]."""
    s = np.asarray(s, dtype=np.float64)
    g = params.gamma
    base = params.rho_center ** (g - 1.0) + (g - 1.0) / (2.0 * g) * (
        params.omega_bar**2
    ) * s**2
    return base ** (1.0 / (g - 1.0))


def steady_velocity(point, params: SteadyStateParams) -> np.ndarray:
    """Cartesian rigid-swirl velocity omega * (x2, -x1, 0)."""
    x = np.asarray(point, dtype=np.float64)
    return params.omega_bar * np.array([x[1], -x[0], 0.0])


def steady_swirl(grid: MeridianGrid, params: SteadyStateParams) -> np.ndarray:
    """Azimuthal component on the grid: u_phi = -omega * r sin(theta)."""
    return -params.omega_bar * grid.rc * grid.sin_t * np.ones(grid.shape)


@dataclass(frozen=True)
class SteadyStateField:
    params: SteadyStateParams
    rho_bar: np.ndarray       # (nr, ntheta)
    u_phi_bar: np.ndarray     # swirl; u_r = u_theta = 0
    pressure_bar: np.ndarray  # rho_bar^gamma

    @property
    def min_density(self) -> float:
        return float(np.min(self.rho_bar))


def sample_steady(params: SteadyStateParams, grid: MeridianGrid) -> SteadyStateField:
    s = grid.rc * grid.sin_t
    rho = steady_density(s, params) * np.ones(grid.shape)
    return SteadyStateField(
        params=params,
        rho_bar=rho,
        u_phi_bar=steady_swirl(grid, params),
        pressure_bar=rho**params.gamma,
    )


def _gauss_nodes(grid: MeridianGrid):
    """Tensor Gauss-Legendre nodes/weights on (0,1) x (0,pi), ball measure."""
    xr, wr = np.polynomial.legendre.leggauss(grid.nr)
    xt, wt = np.polynomial.legendre.leggauss(grid.ntheta)
    r = 0.5 * (xr + 1.0)
    wr = 0.5 * wr
    t = 0.5 * np.pi * (xt + 1.0)
    wt = 0.5 * np.pi * wt
    w2d = 2.0 * np.pi * np.outer(r**2 * wr, np.sin(t) * wt)
    return r[:, None], t[None, :], w2d


def _profile_mass(rho_center: float, omega_bar: float, gamma: float,
                  grid: MeridianGrid) -> float:
    r, t, w = _gauss_nodes(grid)
    s = r * np.sin(t)
    base = rho_center ** (gamma - 1.0) + (gamma - 1.0) / (2.0 * gamma) * (
        omega_bar**2
    ) * s**2
    return float(np.sum(base ** (1.0 / (gamma - 1.0)) * w))


def total_mass(params: SteadyStateParams, grid: MeridianGrid) -> float:
    return _profile_mass(params.rho_center, params.omega_bar, params.gamma, grid)


def vacuum_threshold_mass(omega_bar: float, gamma: float,
                          grid: MeridianGrid) -> float:
    """Mass of the marginal profile with rho_center = 0.

    Below this total mass the rotating profile would open a vacuum region
    around the axis; the laboratory refuses such configurations.
    """
    if omega_bar == 0.0:
        return 0.0
    r, t, w = _gauss_nodes(grid)
    s = r * np.sin(t)
    base = (gamma - 1.0) / (2.0 * gamma) * omega_bar**2 * s**2
    return float(np.sum(base ** (1.0 / (gamma - 1.0)) * w))


def solve_center_density(mass: float, omega_bar: float, gamma: float,
                         grid: MeridianGrid, rel_tol: float = 1e-10) -> float:
    """Invert total_mass for rho_center by bisection (mass is monotone)."""
    threshold = vacuum_threshold_mass(omega_bar, gamma, grid)
    if mass <= threshold:
        raise VacuumRegimeError(
            f"vacuum regime: total mass {mass:.6g} is at or below the "
            f"non-vacuum threshold {threshold:.6g} for omega={omega_bar:.6g}"
        )

    def mass_of(rc):
        return _profile_mass(rc, omega_bar, gamma, grid)

    lo = 1e-12
    hi = 1.0
    while mass_of(hi) < mass:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("bisection bracket exploded; mass target invalid")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass_of(mid) < mass:
            lo = mid
        else:
            hi = mid
        if abs(mass_of(mid) - mass) <= rel_tol * mass:
            return mid
    return 0.5 * (lo + hi)


def steady_residual(field: SteadyStateField, params: SteadyStateParams,
                    grid: MeridianGrid):
    """Discrete L2 residuals of the steady continuity and momentum equations.

    For a mode-0 swirl the continuity residual vanishes identically; the
    momentum residual measures how well the sampled profile balances the
    numerical pressure gradient against the (algebraic) centrifugal term, so
    it is pure truncation error for the exact family.
    """
    rho, up = field.rho_bar, field.u_phi_bar
    press = rho**params.gamma

    # div(rho u) has only the azimuthal derivative, which is zero at mode 0.
    cont = np.zeros(grid.shape)

    # rho (u . grad u) reduces to the centrifugal acceleration, algebraic in
    # the swirl; the strain of a rigid swirl vanishes in quotient form, and
    # for a general swirl profile S(u) contributes through S_rp and S_tp.
    adv_r = -rho * up**2 / grid.rc
    adv_t = -rho * up**2 * grid.cot_t / grid.rc

    dp_dr = d_dr(press, grid)
    dp_dt = d_dtheta(press, grid) / grid.rc

    mu = params.mu
    s_rp = mu * (d_dr(up, grid) - up / grid.rc)
    s_tp = mu * grid.sin_t * d_dtheta(up / grid.sin_t, grid) / grid.rc
    div_s_p = (
        d_dr(s_rp, grid)
        + d_dtheta(s_tp, grid) / grid.rc
        + (3.0 * s_rp + 2.0 * grid.cot_t * s_tp) / grid.rc
    )

    res_r = adv_r + dp_dr
    res_t = adv_t + dp_dt
    res_p = -div_s_p

    mom = np.sqrt(integrate(res_r**2 + res_t**2 + res_p**2, grid))
    return float(np.sqrt(integrate(cont**2, grid))), float(mom)
