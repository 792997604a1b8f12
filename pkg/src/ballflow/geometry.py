"""Geometry of the unit ball: meridian quadrature grid, the tangential/normal
frame fields, cutoff function, discrete derivatives and the rigid-motion
projection.

Axisymmetric fields live on a cell-centered (r, theta) grid over the meridian
half-disk.  Cell centers are offset by half a step so no sample sits on the
origin, the poles, or the boundary sphere.  Vector fields are stored in
spherical components (u_r, u_theta, u_phi); the azimuthal direction is carried
analytically (mode 0 with swirl).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FRAME_KINDS = ("phi1", "phi2", "phi3", "N")

# x -> A x representation of the frame fields (phi_i(x) = x cross e_i).
_FRAME_MATRICES = {
    "phi1": np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
    "phi2": np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]),
    "phi3": np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]),
    "N": np.eye(3),
}


class GridTooCoarseError(ValueError):
    """Raised when a grid has too few cells for the stencils used here."""


@dataclass(frozen=True)
class MeridianGrid:
    """Cell-centered (r, theta) quadrature grid on the meridian half-disk.

    weights[j, k] = 2 pi r_j^2 sin(theta_k) dr dtheta is the volume of the
    axisymmetric cell, so sum(f * weights) approximates the ball integral.
    """

    nr: int
    ntheta: int
    dr: float
    dtheta: float
    r: np.ndarray          # (nr,)
    theta: np.ndarray      # (ntheta,)
    weights: np.ndarray    # (nr, ntheta)
    # broadcastable helpers
    rc: np.ndarray = field(repr=False, default=None)       # r as column (nr, 1)
    sin_t: np.ndarray = field(repr=False, default=None)    # (1, ntheta)
    cos_t: np.ndarray = field(repr=False, default=None)
    cot_t: np.ndarray = field(repr=False, default=None)

    @property
    def shape(self):
        return (self.nr, self.ntheta)

    def scalar(self, fill=0.0):
        return np.full(self.shape, fill, dtype=np.float64)

    def volume(self):
        return float(np.sum(self.weights))


def build_meridian_grid(nr: int, ntheta: int) -> MeridianGrid:
    if nr < 4 or ntheta < 4:
        raise GridTooCoarseError(
            f"grid too coarse: need nr, ntheta >= 4, got ({nr}, {ntheta})"
        )
    dr = 1.0 / nr
    dtheta = np.pi / ntheta
    r = (np.arange(nr) + 0.5) * dr
    theta = (np.arange(ntheta) + 0.5) * dtheta
    weights = 2.0 * np.pi * dr * dtheta * np.outer(r**2, np.sin(theta))
    return MeridianGrid(
        nr=nr,
        ntheta=ntheta,
        dr=dr,
        dtheta=dtheta,
        r=r,
        theta=theta,
        weights=weights,
        rc=r[:, None],
        sin_t=np.sin(theta)[None, :],
        cos_t=np.cos(theta)[None, :],
        cot_t=(np.cos(theta) / np.sin(theta))[None, :],
    )


def integrate(f: np.ndarray, grid: MeridianGrid) -> float:
    """Ball integral of an axisymmetric scalar sampled on the grid."""
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    return float(np.sum(f * grid.weights))


def evaluate_frame(kind: str, point) -> np.ndarray:
    """phi_i(x) = x cross e_i, N(x) = x, evaluated at a Cartesian point."""
    if kind not in FRAME_KINDS:
        raise ValueError(f"unknown frame kind {kind!r}")
    x = np.asarray(point, dtype=np.float64)
    return _FRAME_MATRICES[kind] @ x


def cutoff_psi_radial(rho):
    """Radial cutoff: 1 on |x|<=1/2, 0 on |x|>=3/4, quintic in between.

    The transition is the unique quintic with value/slope/curvature matched at
    both ends; its slope peaks at 15/(8*1/4) = 7.5, within the |grad psi| <= 8
    budget.
    """
    rho = np.asarray(rho, dtype=np.float64)
    xi = np.clip((rho - 0.5) / 0.25, 0.0, 1.0)
    return 1.0 - xi**3 * (10.0 - 15.0 * xi + 6.0 * xi**2)


def cutoff_psi(point) -> float:
    x = np.asarray(point, dtype=np.float64)
    return float(cutoff_psi_radial(np.sqrt(np.sum(x * x))))


def cutoff_psi_grad_radial(rho):
    """d psi / d|x|, for cutoff-weighted gradient norms."""
    rho = np.asarray(rho, dtype=np.float64)
    xi = (rho - 0.5) / 0.25
    inside = (xi > 0.0) & (xi < 1.0)
    xi = np.clip(xi, 0.0, 1.0)
    dpsi = -(30.0 * xi**2 - 60.0 * xi**3 + 30.0 * xi**4) / 0.25
    return np.where(inside, dpsi, 0.0)


# ---------------------------------------------------------------------------
# Meridian finite differences (diagnostic closure: centered interior,
# second-order one-sided at the first/last rings).
# ---------------------------------------------------------------------------

def d_dr(f: np.ndarray, grid: MeridianGrid) -> np.ndarray:
    return np.gradient(f, grid.dr, axis=0, edge_order=2)


def d_dtheta(f: np.ndarray, grid: MeridianGrid) -> np.ndarray:
    return np.gradient(f, grid.dtheta, axis=1, edge_order=2)


def directional_derivative(f: np.ndarray, kind: str, grid: MeridianGrid) -> np.ndarray:
    """Frame derivative of an axisymmetric scalar, traced on the phi=0 meridian.

    For axisymmetric f the phi3 derivative vanishes identically and
    N . grad f = r d_r f.  The phi1/phi2 derivatives of an axisymmetric scalar
    carry a sin/cos azimuthal factor; on the phi=0 plane phi1 gives zero and
    phi2 gives -d_theta f.
    """
    if kind == "phi3":
        return np.zeros_like(f)
    if kind == "N":
        return grid.rc * d_dr(f, grid)
    if kind == "phi1":
        return np.zeros_like(f)
    if kind == "phi2":
        return -d_dtheta(f, grid)
    raise ValueError(f"unknown frame kind {kind!r}")


# ---------------------------------------------------------------------------
# Spherical-component calculus for axisymmetric (mode 0 + swirl) fields.
# ---------------------------------------------------------------------------

def grad_scalar(f, grid):
    """(d_r f, (1/r) d_theta f) of an axisymmetric scalar."""
    return d_dr(f, grid), d_dtheta(f, grid) / grid.rc


def divergence(vr, vt, grid):
    """div v for v = (v_r, v_theta, v_phi); the swirl does not contribute."""
    return (
        d_dr(vr, grid)
        + 2.0 * vr / grid.rc
        + (d_dtheta(vt, grid) + grid.cot_t * vt) / grid.rc
    )


def strain_tensor(vr, vt, vp, grid):
    """Components of grad v + (grad v)^T for an axisymmetric vector field.

    Returns (Drr, Dtt, Dpp, Drt, Drp, Dtp).  The theta-phi shear is computed
    from the quotient form sin(theta) d_theta(v_phi / sin(theta)) so rigid
    rotations have exactly zero strain on the grid.
    """
    rc, sin_t, cot_t = grid.rc, grid.sin_t, grid.cot_t
    drr = d_dr(vr, grid)
    drt = d_dr(vt, grid)
    drp = d_dr(vp, grid)
    dtr = d_dtheta(vr, grid)
    dtt = d_dtheta(vt, grid)

    Drr = 2.0 * drr
    Dtt = 2.0 * (dtt / rc + vr / rc)
    Dpp = 2.0 * (vr + cot_t * vt) / rc
    Drt = drt + dtr / rc - vt / rc
    Drp = drp - vp / rc
    Dtp = sin_t * d_dtheta(vp / sin_t, grid) / rc
    return Drr, Dtt, Dpp, Drt, Drp, Dtp


def strain_square(vr, vt, vp, grid):
    """|grad v + (grad v)^T|^2 pointwise."""
    Drr, Dtt, Dpp, Drt, Drp, Dtp = strain_tensor(vr, vt, vp, grid)
    return Drr**2 + Dtt**2 + Dpp**2 + 2.0 * (Drt**2 + Drp**2 + Dtp**2)


def symmetric_gradient_energy(v, grid: MeridianGrid) -> float:
    """E(v) = integral of |grad v + (grad v)^T|^2 over the ball."""
    vr, vt, vp = v
    return integrate(strain_square(vr, vt, vp, grid), grid)


def grad_vector_rows(vr, vt, vp, grid):
    """Row sums of |grad v|^2 split by derivative direction.

    Returns (row_r, row_t, row_p) with |grad v|_F^2 = row_r + row_t + row_p;
    row_r collects the radial derivatives (so the normal-derivative energy is
    r^2 * row_r) and row_t + row_p the tangential/curvature part.
    """
    rc, sin_t, cot_t = grid.rc, grid.sin_t, grid.cot_t
    row_r = d_dr(vr, grid) ** 2 + d_dr(vt, grid) ** 2 + d_dr(vp, grid) ** 2
    row_t = (
        ((d_dtheta(vr, grid) - vt) / rc) ** 2
        + ((d_dtheta(vt, grid) + vr) / rc) ** 2
        + (d_dtheta(vp, grid) / rc) ** 2
    )
    row_p = (
        (vp / rc) ** 2
        + (cot_t * vp / rc) ** 2
        + ((vr + cot_t * vt) / rc) ** 2
    )
    return row_r, row_t, row_p


def grad_vector_square(vr, vt, vp, grid):
    row_r, row_t, row_p = grad_vector_rows(vr, vt, vp, grid)
    return row_r + row_t + row_p


def phi3_theta_component(grid: MeridianGrid) -> np.ndarray:
    """u_phi component of phi3 = x cross e3: phi3 = -r sin(theta) e_phi."""
    return -(grid.rc * grid.sin_t) * np.ones(grid.shape)


def rigid_field(coeffs, grid: MeridianGrid):
    """Mode-0 spherical components of sum_i b_i phi_i.

    phi1 and phi2 have no axisymmetric part, so only b_3 contributes.
    """
    b3 = coeffs[2]
    zero = np.zeros(grid.shape)
    return zero, zero.copy(), b3 * phi3_theta_component(grid)


def project_rigid(v, grid: MeridianGrid):
    """L^2 projection of a mode-0 vector field onto span{phi_1, phi_2, phi_3}.

    Solves the 3x3 Gram system; for axisymmetric input the phi_1/phi_2
    moments vanish identically, so only the swirl component projects.
    Returns (b, residual_components).
    """
    vr, vt, vp = v
    p3 = phi3_theta_component(grid)
    gram = np.zeros((3, 3))
    g_diag = integrate(p3 * p3, grid)  # = int |phi_i|^2 by symmetry
    gram[0, 0] = gram[1, 1] = gram[2, 2] = g_diag
    rhs = np.array([0.0, 0.0, integrate(vp * p3, grid)])
    try:
        b = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:  # cannot happen on a valid grid
        raise RuntimeError("singular rigid-motion Gram matrix") from exc
    residual = (vr.copy(), vt.copy(), vp - b[2] * p3)
    return b, residual


# ---------------------------------------------------------------------------
# Commutators of frame derivatives.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommutatorField:
    """Vector field phi_{a,b} with [grad_a, grad_b] f = phi_{a,b} . grad f."""

    matrix: np.ndarray

    def __call__(self, point):
        return self.matrix @ np.asarray(point, dtype=np.float64)

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.matrix == 0.0))

    def match_frame(self):
        """Return (sign, kind) if the field is +-phi_i or +-N, else None."""
        for kind, mat in _FRAME_MATRICES.items():
            if np.array_equal(self.matrix, mat):
                return 1, kind
            if np.array_equal(self.matrix, -mat):
                return -1, kind
        return None


def commutator_field(kind_a: str, kind_b: str) -> CommutatorField:
    """Commutator of two frame derivatives.

    All frame fields are linear, x -> A x, and for linear fields
    (a . grad)b - (b . grad)a = (B A - A B) x.
    """
    A = _FRAME_MATRICES[kind_a]
    B = _FRAME_MATRICES[kind_b]
    return CommutatorField(matrix=B @ A - A @ B)


# ---------------------------------------------------------------------------
# Full 3-D frame derivatives on a (r, theta, phi) tensor grid.  Used for the
# discrete commutator and integration-by-parts checks, which need
# non-axisymmetric test functions.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BallGrid3D:
    base: MeridianGrid
    nphi: int
    dphi: float
    phi: np.ndarray

    @property
    def shape(self):
        return (self.base.nr, self.base.ntheta, self.nphi)

    def cartesian(self):
        """x1, x2, x3 arrays of shape (nr, ntheta, nphi)."""
        g = self.base
        r = g.r[:, None, None]
        st = np.sin(g.theta)[None, :, None]
        ct = np.cos(g.theta)[None, :, None]
        cp = np.cos(self.phi)[None, None, :]
        sp = np.sin(self.phi)[None, None, :]
        return r * st * cp, r * st * sp, r * ct * np.ones_like(cp)

    def weights3d(self):
        g = self.base
        w = np.outer(g.r**2, np.sin(g.theta)) * g.dr * g.dtheta * self.dphi
        return np.repeat(w[:, :, None], self.nphi, axis=2)


def build_ball_grid_3d(nr: int, ntheta: int, nphi: int) -> BallGrid3D:
    base = build_meridian_grid(nr, ntheta)
    if nphi < 4:
        raise GridTooCoarseError(f"grid too coarse: need nphi >= 4, got {nphi}")
    dphi = 2.0 * np.pi / nphi
    phi = (np.arange(nphi) + 0.5) * dphi
    return BallGrid3D(base=base, nphi=nphi, dphi=dphi, phi=phi)


def _frame_spherical_components(kind: str, grid3: BallGrid3D):
    """(a_r, a_theta, a_phi) of a frame field on the 3-D grid."""
    g = grid3.base
    r = g.r[:, None, None]
    st = np.sin(g.theta)[None, :, None]
    ct = np.cos(g.theta)[None, :, None]
    cp = np.cos(grid3.phi)[None, None, :]
    sp = np.sin(grid3.phi)[None, None, :]
    zero = np.zeros(grid3.shape)
    if kind == "N":
        return r * np.ones_like(st * cp), zero, zero
    if kind == "phi1":
        return zero, r * sp * np.ones_like(ct), r * ct * cp
    if kind == "phi2":
        return zero, -r * cp * np.ones_like(ct), r * ct * sp
    if kind == "phi3":
        return zero, zero, -r * st * np.ones_like(cp)
    raise ValueError(f"unknown frame kind {kind!r}")


def frame_derivative_3d(f: np.ndarray, kind: str, grid3: BallGrid3D) -> np.ndarray:
    """grad_a f = a_r d_r f + (a_theta/r) d_theta f + (a_phi/(r sin)) d_phi f.

    Centered differences inside, second-order one-sided at the r/theta edges.
    The azimuthal derivative is spectral (the phi grid is uniform periodic),
    which keeps the 1/sin(theta) metric factor from amplifying phi truncation
    error near the poles.
    """
    g = grid3.base
    ar, at, ap = _frame_spherical_components(kind, grid3)
    df_dr = np.gradient(f, g.dr, axis=0, edge_order=2)
    df_dt = np.gradient(f, g.dtheta, axis=1, edge_order=2)
    k = np.fft.rfftfreq(grid3.nphi, d=1.0 / grid3.nphi)
    df_dp = np.fft.irfft(1j * k * np.fft.rfft(f, axis=2), n=grid3.nphi, axis=2)
    r = g.r[:, None, None]
    rst = r * np.sin(g.theta)[None, :, None]
    return ar * df_dr + (at / r) * df_dt + (ap / rst) * df_dp


def integrate_3d(f: np.ndarray, grid3: BallGrid3D) -> float:
    return float(np.sum(f * grid3.weights3d()))
