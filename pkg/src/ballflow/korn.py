"""Numerical estimation of the inequality suite: the gradient-vs-strain
inequality, the rigid-motion-deflated Poincare-Morrey inequality, the tangent
Poincare inequality, and the conservation-based ledger that controls the full
velocity gradient for admissible perturbations.

Constants are estimated by maximizing Rayleigh quotients over explicit finite
trial spaces of polynomial vector fields, assembled with a tensor quadrature
on the meridian grid (exact in azimuth, midpoint in r and colatitude).  The
estimates are lower bounds of the true best constants and are reported with
the trial-space dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from scipy.linalg import eigh

from . import geometry as geo
from .geometry import MeridianGrid, integrate
from .steady import SteadyStateField


class HypothesisError(ValueError):
    """An inequality's admissibility hypothesis is not met."""


# ---------------------------------------------------------------------------
# Monomial calculus: fields are dicts {(a, b, c): coef} per component.
# ---------------------------------------------------------------------------

def _mono_mul(m1, m2):
    out = {}
    for e1, c1 in m1.items():
        for e2, c2 in m2.items():
            e = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2])
            out[e] = out.get(e, 0.0) + c1 * c2
    return out


def _mono_diff(m, axis):
    out = {}
    for e, c in m.items():
        if e[axis] == 0:
            continue
        enew = list(e)
        enew[axis] -= 1
        out[tuple(enew)] = out.get(tuple(enew), 0.0) + c * e[axis]
    return out


def _mono_scale(m, s):
    return {e: c * s for e, c in m.items()}


def _mono_add(*ms):
    out = {}
    for m in ms:
        for e, c in m.items():
            out[e] = out.get(e, 0.0) + c
    return out


_X = ({(1, 0, 0): 1.0}, {(0, 1, 0): 1.0}, {(0, 0, 1): 1.0})


@dataclass(frozen=True)
class PolyField:
    """Vector field with polynomial Cartesian components."""

    comps: tuple  # three monomial dicts
    label: str = ""

    def grad(self):
        """9 monomial dicts, [i][j] = d V_i / d x_j."""
        return [[_mono_diff(self.comps[i], j) for j in range(3)]
                for i in range(3)]


def frame_polyfield(kind: str) -> PolyField:
    if kind == "N":
        return PolyField(comps=_X, label="N")
    i = {"phi1": 0, "phi2": 1, "phi3": 2}[kind]
    e = [{}, {}, {}]
    # x cross e_i
    j, k = (i + 1) % 3, (i + 2) % 3
    e[j] = _mono_scale(_X[k], -1.0)
    e[k] = dict(_X[j])
    return PolyField(comps=tuple(e), label=kind)


# ---------------------------------------------------------------------------
# Ball quadrature of monomials: separable midpoint rule in (r, theta), exact
# azimuthal integral.
# ---------------------------------------------------------------------------

class BallQuadrature:
    """integral over B1 of x1^a x2^b x3^c via tensor midpoint sums."""

    def __init__(self, grid: MeridianGrid, max_degree: int):
        self.grid = grid
        n = max_degree + 3
        r, th = grid.r, grid.theta
        self._Ir = np.array([np.sum(r ** (p + 2)) * grid.dr
                             for p in range(n + 1)])
        s, c = np.sin(th), np.cos(th)
        self._It = np.array([[np.sum(s ** (ab + 1) * c ** cc) * grid.dtheta
                              for cc in range(n + 1)] for ab in range(n + 1)])

    @staticmethod
    def _iphi(a, b):
        if a % 2 or b % 2:
            return 0.0
        # int_0^2pi cos^a sin^b = 2 pi (a-1)!!(b-1)!!/(a+b)!!
        num = 1.0
        for m in range(a - 1, 0, -2):
            num *= m
        for m in range(b - 1, 0, -2):
            num *= m
        den = 1.0
        for m in range(a + b, 0, -2):
            den *= m
        return 2.0 * np.pi * num / den

    def monomial(self, e) -> float:
        a, b, c = e
        return self._Ir[a + b + c] * self._It[a + b][c] * self._iphi(a, b)

    def poly(self, m) -> float:
        return sum(coef * self.monomial(e) for e, coef in m.items())


def _exact_theta(ab, c):
    # int_0^pi sin^(ab+1) cos^c dtheta, even c
    return math.gamma((ab + 2) / 2) * math.gamma((c + 1) / 2) / math.gamma(
        (ab + c + 3) / 2
    )


def exact_ball_integral(m) -> float:
    """Exact ball integral of a monomial dict (independent reference)."""
    total = 0.0
    for (a, b, c), coef in m.items():
        if a % 2 or b % 2 or c % 2:
            continue
        total += coef * BallQuadrature._iphi(a, b) * _exact_theta(a + b, c) / (
            a + b + c + 3
        )
    return total


# ---------------------------------------------------------------------------
# Trial spaces and Gram assembly
# ---------------------------------------------------------------------------

def poly_vector_basis(degree: int):
    """All monomial fields x^alpha e_i with |alpha| <= degree."""
    basis = []
    for comp in range(3):
        for deg in range(degree + 1):
            for combo in combinations_with_replacement(range(3), deg):
                e = [0, 0, 0]
                for ax in combo:
                    e[ax] += 1
                comps = [{}, {}, {}]
                comps[comp] = {tuple(e): 1.0}
                basis.append(PolyField(comps=tuple(comps),
                                       label=f"x^{tuple(e)} e{comp + 1}"))
    return basis


def tangent_vector_basis(degree: int):
    """Tangent trial fields: x cross grad(h) plus (1 - |x|^2) bubbles.

    Both families satisfy V . n = 0 on the unit sphere exactly by
    construction, so no penalty enforcement is needed.
    """
    basis = []
    for deg in range(1, degree + 2):
        for combo in combinations_with_replacement(range(3), deg):
            e = [0, 0, 0]
            for ax in combo:
                e[ax] += 1
            h = {tuple(e): 1.0}
            gh = [_mono_diff(h, ax) for ax in range(3)]
            comps = (
                _mono_add(_mono_mul(_X[1], gh[2]),
                          _mono_scale(_mono_mul(_X[2], gh[1]), -1.0)),
                _mono_add(_mono_mul(_X[2], gh[0]),
                          _mono_scale(_mono_mul(_X[0], gh[2]), -1.0)),
                _mono_add(_mono_mul(_X[0], gh[1]),
                          _mono_scale(_mono_mul(_X[1], gh[0]), -1.0)),
            )
            if all(not c for c in comps):
                continue
            basis.append(PolyField(comps=comps, label=f"x cross grad x^{tuple(e)}"))
    bubble = {(0, 0, 0): 1.0, (2, 0, 0): -1.0, (0, 2, 0): -1.0, (0, 0, 2): -1.0}
    for comp in range(3):
        for deg in range(min(degree - 1, 2) + 1):
            for combo in combinations_with_replacement(range(3), deg):
                e = [0, 0, 0]
                for ax in combo:
                    e[ax] += 1
                comps = [{}, {}, {}]
                comps[comp] = _mono_mul(bubble, {tuple(e): 1.0})
                basis.append(PolyField(comps=tuple(comps),
                                       label=f"(1-r^2) x^{tuple(e)} e{comp + 1}"))
    return basis


def _max_degree(basis):
    deg = 0
    for f in basis:
        for m in f.comps:
            for e in m:
                deg = max(deg, sum(e))
    return deg


def assemble_forms(basis, grid: MeridianGrid):
    """Gram matrices (M, K, E): mass, gradient, and symmetric-strain forms."""
    nb = len(basis)
    quad = BallQuadrature(grid, 2 * _max_degree(basis))
    grads = [f.grad() for f in basis]
    M = np.zeros((nb, nb))
    K = np.zeros((nb, nb))
    E = np.zeros((nb, nb))
    for a in range(nb):
        for b in range(a, nb):
            m = sum(
                quad.poly(_mono_mul(basis[a].comps[i], basis[b].comps[i]))
                for i in range(3)
                if basis[a].comps[i] and basis[b].comps[i]
            )
            k = sum(
                quad.poly(_mono_mul(grads[a][i][j], grads[b][i][j]))
                for i in range(3)
                for j in range(3)
                if grads[a][i][j] and grads[b][i][j]
            )
            e = 0.0
            for i in range(3):
                for j in range(3):
                    sa = _mono_add(grads[a][i][j], grads[a][j][i])
                    sb = _mono_add(grads[b][i][j], grads[b][j][i])
                    if sa and sb:
                        e += quad.poly(_mono_mul(sa, sb))
            M[a, b] = M[b, a] = m
            K[a, b] = K[b, a] = k
            E[a, b] = E[b, a] = e
    return M, K, E


def _rigid_projection_matrices(basis, grid: MeridianGrid):
    """Gram of V - P_S V from the phi_i projection coefficients."""
    quad = BallQuadrature(grid, _max_degree(basis) + 1)
    phis = [frame_polyfield(k) for k in ("phi1", "phi2", "phi3")]
    G = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            G[i, j] = sum(
                quad.poly(_mono_mul(phis[i].comps[c], phis[j].comps[c]))
                for c in range(3)
                if phis[i].comps[c] and phis[j].comps[c]
            )
    B = np.zeros((len(basis), 3))
    for a, f in enumerate(basis):
        for i in range(3):
            B[a, i] = sum(
                quad.poly(_mono_mul(f.comps[c], phis[i].comps[c]))
                for c in range(3)
                if f.comps[c] and phis[i].comps[c]
            )
    coef = np.linalg.solve(G, B.T).T  # per-field projection coefficients
    return coef, G


@dataclass(frozen=True)
class KornReport:
    korn01_constant: float
    pm_constant: float
    poincare_constant: float
    degeneracy: tuple        # ((E(phi_i), |grad phi_i|^2) for i = 1..3)
    sample_count: int
    grid: tuple
    degree: int
    dims: dict


def symmetric_gradient_energy(v, grid: MeridianGrid) -> float:
    """Strain energy of a mode-0 grid field (delegates to geometry)."""
    return geo.symmetric_gradient_energy(v, grid)


def rigid_degeneracy_check(grid: MeridianGrid):
    """(E(phi_i), |grad phi_i|^2) pairs certifying that strain energy cannot
    control the gradient of rigid rotations on the ball."""
    quad = BallQuadrature(grid, 2)
    out = []
    for kind in ("phi1", "phi2", "phi3"):
        f = frame_polyfield(kind)
        g = f.grad()
        e = 0.0
        k = 0.0
        for i in range(3):
            for j in range(3):
                s = _mono_add(g[i][j], g[j][i])
                if s:
                    e += quad.poly(_mono_mul(s, s))
                if g[i][j]:
                    k += quad.poly(_mono_mul(g[i][j], g[i][j]))
        out.append((e, k))
    return tuple(out)


def estimate_korn01_constant(degree: int, grid: MeridianGrid,
                             return_dim: bool = False):
    """max of |grad V|^2 / (E(V) + |V|^2) over polynomial fields."""
    if degree < 1:
        raise ValueError("trial degree must be at least 1")
    basis = poly_vector_basis(degree)
    M, K, E = assemble_forms(basis, grid)
    vals = eigh(K, E + M, eigvals_only=True)
    c = float(vals[-1])
    return (c, len(basis)) if return_dim else c


def _deflated_max(A, B, threshold=1e-10):
    """max x^T A x / x^T B x over the B-positive subspace."""
    w, Q = np.linalg.eigh(B)
    keep = w > threshold * max(w.max(), 1.0)
    if not np.any(keep):
        raise HypothesisError("empty admissible trial family")
    Qk = Q[:, keep] / np.sqrt(w[keep])
    Ak = Qk.T @ A @ Qk
    vals = np.linalg.eigvalsh(Ak)
    return float(vals[-1]), int(np.sum(keep))


def estimate_pm_constant(degree: int, grid: MeridianGrid,
                         return_dim: bool = False):
    """max of |V - P_S V|^2 / E(V) over tangent fields, rigid modes deflated.

    Trial members whose strain energy falls below the kernel threshold are
    rigid motions and are excluded (they contribute 0/0).
    """
    if degree < 1:
        raise ValueError("trial degree must be at least 1")
    basis = tangent_vector_basis(degree)
    M, K, E = assemble_forms(basis, grid)
    coef, G = _rigid_projection_matrices(basis, grid)
    M_defl = M - coef @ G @ coef.T
    # normalize trial members so the kernel threshold is scale-free
    scale = np.sqrt(np.diag(M))
    S = np.diag(1.0 / scale)
    c, dim = _deflated_max(S @ M_defl @ S, S @ E @ S)
    return (c, dim) if return_dim else c


def estimate_poincare_constant(degree: int, grid: MeridianGrid,
                               return_dim: bool = False):
    """max of |V|^2 / |grad V|^2 over tangent fields."""
    if degree < 1:
        raise ValueError("trial degree must be at least 1")
    basis = tangent_vector_basis(degree)
    M, K, _ = assemble_forms(basis, grid)
    scale = np.sqrt(np.diag(M))
    S = np.diag(1.0 / scale)
    c, dim = _deflated_max(S @ M @ S, S @ K @ S)
    return (c, dim) if return_dim else c


def build_korn_report(degree: int, grid: MeridianGrid) -> KornReport:
    c1, d1 = estimate_korn01_constant(degree, grid, return_dim=True)
    c2, d2 = estimate_pm_constant(degree, grid, return_dim=True)
    c3, d3 = estimate_poincare_constant(degree, grid, return_dim=True)
    return KornReport(
        korn01_constant=c1,
        pm_constant=c2,
        poincare_constant=c3,
        degeneracy=rigid_degeneracy_check(grid),
        sample_count=grid.nr * grid.ntheta,
        grid=(grid.nr, grid.ntheta),
        degree=degree,
        dims={"korn01": d1, "pm": d2, "poincare": d3},
    )


# ---------------------------------------------------------------------------
# Conservation-based ledger for admissible perturbations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KornTypeLedger:
    lhs: float               # |grad(u - ubar)|^2
    rhs_strain: float        # |grad u + grad u^T|^2
    rhs_steady_coupling: float   # |ubar|^2 |rho - rhobar|^2
    rhs_quadratic: float     # |rho - rhobar|^2 |u - ubar|^2
    constant: float
    satisfied: bool
    momentum_defect: float

    @property
    def rhs_total(self):
        return self.rhs_strain + self.rhs_steady_coupling + self.rhs_quadratic


def verify_korn_type(q, v, steady: SteadyStateField, constant: float,
                     grid: MeridianGrid, tol: float = 1e-8) -> KornTypeLedger:
    """Evaluate both sides of the conservation-based gradient inequality.

    The perturbation must carry the same angular momentum as the steady flow
    (the inequality's hypothesis); violations beyond tol * |L_steady| raise
    HypothesisError and no verdict is produced.  The mean-velocity term is
    dropped, as the inequality permits.
    """
    vr, vt, vp = v
    p3 = geo.phi3_theta_component(grid)
    rho = steady.rho_bar + q
    l3 = integrate(rho * (steady.u_phi_bar + vp) * p3, grid)
    l3_steady = integrate(steady.rho_bar * steady.u_phi_bar * p3, grid)
    defect = abs(l3 - l3_steady)
    scale = max(abs(l3_steady), 1.0)
    if defect > tol * scale:
        raise HypothesisError(
            f"hypothesis not met: angular momentum defect {defect:.3e} "
            f"exceeds {tol:.1e} x {scale:.3e}"
        )
    lhs = integrate(geo.grad_vector_square(vr, vt, vp, grid), grid)
    rhs_strain = integrate(geo.strain_square(vr, vt, vp, grid), grid)
    rhs_steady = integrate(steady.u_phi_bar**2 * q**2, grid)
    rhs_quad = integrate(q**2 * (vr**2 + vt**2 + vp**2), grid)
    total = rhs_strain + rhs_steady + rhs_quad
    return KornTypeLedger(
        lhs=lhs,
        rhs_strain=rhs_strain,
        rhs_steady_coupling=rhs_steady,
        rhs_quadratic=rhs_quad,
        constant=constant,
        satisfied=bool(lhs <= constant * total),
        momentum_defect=defect,
    )
