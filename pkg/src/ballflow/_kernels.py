"""Hot kernels for the time stepper: ghost fill, stage tendency, ring filter.

Two interchangeable backends live here:

* a pure-numpy implementation (array slicing), the readable reference;
* numba @njit mirrors of the same arithmetic, used by default.

Selection: numba is used when it imports cleanly unless the environment
variable ``BALLFLOW_DISABLE_NUMBA`` is set to a truthy value, in which case
the numpy path runs.  ``BACKEND`` records the choice.

Layout conventions
------------------
Perturbation fields are (nr, ntheta) cell-centered arrays.  Kernels work on
padded copies with two ghost rings per side, so padded index J maps to radius
(J - 1.5) * dr and padded K to colatitude (K - 1.5) * dtheta.  Ghost closures:

* origin (r < 0): value at (-r, theta) is the value at (r, pi - theta), with
  sign flips for u_r and u_phi (the spherical basis flips crossing the
  center);
* axis (theta < 0 or > pi): theta-mirror, with sign flips for u_theta, u_phi;
* wall (r > 1): q mirrors evenly (zero normal gradient), u_r mirrors oddly
  (impermeability), u_theta/u_phi mirror with the slope factor
  (2 + (2m-1) dr) / (2 - (2m-1) dr) that zeroes the tangential viscous
  stress mu*(d_r u - u/r) at the interface r = 1.

The viscous force is assembled in staggered flux form: stresses at cell
faces from compact differences, then face-area-weighted differences.  That
keeps grid-scale (checkerboard) modes damped, makes the colatitude part a
proper Sturm-Liouville form (no spurious pole anti-dissipation), and imposes
the zero-tangential-stress wall condition exactly at the r = 1 faces.  The
origin (r = 0) and axis (sin theta = 0) faces carry no flux by metric.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("BALLFLOW_DISABLE_NUMBA", "").strip().lower()
_NUMBA_WANTED = _DISABLE not in ("1", "true", "yes", "on")

MODE_NONLINEAR = 0
MODE_LINEARIZED = 1


# ---------------------------------------------------------------------------
# Pure numpy backend
# ---------------------------------------------------------------------------

def fill_ghosts_numpy(core4, pad4, wall_c1, wall_c2):
    """Copy core fields into padded arrays and populate ghost rings."""
    q, vr, vt, vp = core4
    qp, vrp, vtp, vpp = pad4
    nr, nt = q.shape
    for arr, src in ((qp, q), (vrp, vr), (vtp, vt), (vpp, vp)):
        arr[2 : nr + 2, 2 : nt + 2] = src

    flip = slice(nt + 1, 1, -1)  # theta-reversal of the interior columns
    # origin: rows 1, 0 mirror rows 2, 3 with theta flip
    for arr, sgn in ((qp, 1.0), (vrp, -1.0), (vtp, 1.0), (vpp, -1.0)):
        arr[1, 2 : nt + 2] = sgn * arr[2, flip]
        arr[0, 2 : nt + 2] = sgn * arr[3, flip]
    # wall: rows nr+2, nr+3 mirror rows nr+1, nr
    qp[nr + 2, 2 : nt + 2] = qp[nr + 1, 2 : nt + 2]
    qp[nr + 3, 2 : nt + 2] = qp[nr, 2 : nt + 2]
    vrp[nr + 2, 2 : nt + 2] = -vrp[nr + 1, 2 : nt + 2]
    vrp[nr + 3, 2 : nt + 2] = -vrp[nr, 2 : nt + 2]
    for arr in (vtp, vpp):
        arr[nr + 2, 2 : nt + 2] = wall_c1 * arr[nr + 1, 2 : nt + 2]
        arr[nr + 3, 2 : nt + 2] = wall_c2 * arr[nr, 2 : nt + 2]
    # axis columns (applied to every padded row, covering corners)
    for arr, sgn in ((qp, 1.0), (vrp, 1.0), (vtp, -1.0), (vpp, -1.0)):
        arr[:, 1] = sgn * arr[:, 2]
        arr[:, 0] = sgn * arr[:, 3]
        arr[:, nt + 2] = sgn * arr[:, nt + 1]
        arr[:, nt + 3] = sgn * arr[:, nt]


def viscous_force_numpy(pads, st):
    """div S(v) on the core cells, staggered flux form.

    Returns (f_r, f_theta, f_phi).  st supplies padded metric arrays and the
    face radii/sines (see StencilStatics).
    """
    _, vrp, vtp, vpp = pads
    nr = st.cf_r.shape[0]
    nt = st.cf_r.shape[1]
    dr, dth = st.dr, st.dtheta
    mu, lam = st.mu, st.lam

    # cell slabs adjacent to r-faces: L = padded rows 1..nr+1, R = 2..nr+2
    L = slice(1, nr + 2)
    R = slice(2, nr + 3)
    C = slice(2, nt + 2)
    rf = st.r_face[:, None]          # (nr+1, 1), r = 0 .. 1
    r_cells = st.r_pad[:, None]
    ir_cells = st.inv_r_pad[:, None]
    sin_c = st.sin_pad[None, C]
    sin_kp = st.sin_pad[None, 3 : nt + 3]
    sin_km = st.sin_pad[None, 1 : nt + 1]

    vr_L, vr_R = vrp[L, C], vrp[R, C]
    vt_L, vt_R = vtp[L, C], vtp[R, C]
    vp_L, vp_R = vpp[L, C], vpp[R, C]

    # theta-part of div v at the cells flanking r-faces
    def theta_div(rows):
        # pure theta part, the 1/r metric is applied at the face radius
        return (
            st.sin_pad[None, 3 : nt + 3] * vtp[rows, 3 : nt + 3]
            - st.sin_pad[None, 1 : nt + 1] * vtp[rows, 1 : nt + 1]
        ) / (2.0 * dth) / st.sin_pad[None, C]

    def dth_c(arr, rows):
        return (arr[rows, 3 : nt + 3] - arr[rows, 1 : nt + 1]) / (2.0 * dth)

    frr = (
        2.0 * mu * rf**2 * (vr_R - vr_L) / dr
        + lam * (
            (r_cells[R] ** 2 * vr_R - r_cells[L] ** 2 * vr_L) / dr
            + rf * 0.5 * (theta_div(L) + theta_div(R))
        )
    )
    frt = mu * (
        rf**3 * (vt_R - vt_L) / dr
        - rf**2 * 0.5 * (vt_R + vt_L)
        + rf**2 * 0.5 * (dth_c(vrp, L) + dth_c(vrp, R))
    )
    frp = mu * (rf**3 * (vp_R - vp_L) / dr - rf**2 * 0.5 * (vp_R + vp_L))

    # theta faces: D = padded cols 1..nt+1, U = 2..nt+2 at core rows
    RC = slice(2, nr + 2)
    D = slice(1, nt + 2)
    U = slice(2, nt + 3)
    sin_f = st.sin_face[None, :]     # (1, nt+1), zero at both poles
    r_core = st.r_pad[RC][:, None]
    ir_core = st.inv_r_pad[RC][:, None]
    sin_D = st.sin_pad[None, D]
    sin_U = st.sin_pad[None, U]
    isin_D = st.inv_sin_pad[None, D]
    isin_U = st.inv_sin_pad[None, U]

    vr_D, vr_U = vrp[RC, D], vrp[RC, U]
    vt_D, vt_U = vtp[RC, D], vtp[RC, U]
    vp_D, vp_U = vpp[RC, D], vpp[RC, U]

    def dr_c(arr, cols):
        return (arr[3 : nr + 3, cols] - arr[1 : nr + 1, cols]) / (2.0 * dr)

    def r_div(cols):
        rows_p = slice(3, nr + 3)
        rows_m = slice(1, nr + 1)
        return (
            st.r_pad[rows_p][:, None] ** 2 * vrp[rows_p, cols]
            - st.r_pad[rows_m][:, None] ** 2 * vrp[rows_m, cols]
        ) / (2.0 * dr) * ir_core**2

    gtr = sin_f * mu * (
        (vr_U - vr_D) / dth * ir_core
        + 0.5 * (dr_c(vtp, D) + dr_c(vtp, U))
        - 0.5 * (vt_D + vt_U) * ir_core
    )
    gtt = (
        2.0 * mu * sin_f * ((vt_U - vt_D) / dth + 0.5 * (vr_D + vr_U)) * ir_core
        + lam * sin_f * 0.5 * (r_div(D) + r_div(U))
        + lam * (sin_U * vt_U - sin_D * vt_D) / dth * ir_core
    )
    # rigid-exact quotient with harmonic-mean sine weights; the plain
    # vp/sin quotient has O(1/dth^3) stiffness at pole cells.  Pole faces
    # carry no flux (sin_f = 0) but their ghost sine sum vanishes too, so
    # guard the denominator.
    sin_sum = sin_U + sin_D
    safe = np.where(np.abs(sin_sum) > 1e-300, sin_sum, 1.0)
    gtp = (
        2.0 * mu * sin_f**2 * (vp_U * sin_D - vp_D * sin_U)
        / safe / dth * ir_core
    )

    # assembly on the core
    r2 = r_core**2
    r3 = r_core**3
    sinc = st.sin_pad[None, C]
    cotc = st.cot_pad[None, C]
    isinc = st.inv_sin_pad[None, C]
    vr_c = vrp[RC, C]
    vt_c = vtp[RC, C]
    divv_c = (
        dr_c(vrp, C) + 2.0 * vr_c * ir_core
        + (dth_c(vtp, RC) + cotc * vt_c) * ir_core
    )
    s_tt_c = 2.0 * mu * (dth_c(vtp, RC) + vr_c) * ir_core + lam * divv_c
    s_pp_c = 2.0 * mu * (vr_c + cotc * vt_c) * ir_core + lam * divv_c

    f_r = (
        (frr[1:, :] - frr[:-1, :]) / (r2 * dr)
        + (gtr[:, 1:] - gtr[:, :-1]) / dth * ir_core * isinc
        - (s_tt_c + s_pp_c) * ir_core
    )
    f_t = (
        (frt[1:, :] - frt[:-1, :]) / (r3 * dr)
        + (gtt[:, 1:] - gtt[:, :-1]) / dth * ir_core * isinc
        - cotc * s_pp_c * ir_core
    )
    f_p = (
        (frp[1:, :] - frp[:-1, :]) / (r3 * dr)
        + (gtp[:, 1:] - gtp[:, :-1]) / dth * ir_core * isinc**2
    )
    return f_r, f_t, f_p


def stage_tendency_numpy(pad4, out4, st, mode):
    """Tendency of (q, v_r, v_theta, v_phi) from padded inputs."""
    qp, vrp, vtp, vpp = pad4
    kq, kvr, kvt, kvp = out4
    nr, nt = kq.shape
    dr, dth = st.dr, st.dtheta
    gamma, mu, lam, omega = st.gamma, st.mu, st.lam, st.omega

    C = (slice(2, nr + 2), slice(2, nt + 2))

    def DR(a):
        return (a[3 : nr + 3, 2 : nt + 2] - a[1 : nr + 1, 2 : nt + 2]) / (2.0 * dr)

    def DT(a):
        return (a[2 : nr + 2, 3 : nt + 3] - a[2 : nr + 2, 1 : nt + 1]) / (2.0 * dth)

    rc = st.r_pad[2 : nr + 2][:, None]
    irc = st.inv_r_pad[2 : nr + 2][:, None]
    sinc = st.sin_pad[None, 2 : nt + 2]
    cosc = st.cos_pad[None, 2 : nt + 2]
    cotc = st.cot_pad[None, 2 : nt + 2]
    isinc = st.inv_sin_pad[None, 2 : nt + 2]

    rho_b = st.rho_bar_pad[C]
    q_c = qp[C]
    vr_c = vrp[C]
    vt_c = vtp[C]
    vp_c = vpp[C]
    rho = rho_b + q_c

    # pressure field
    if mode == MODE_LINEARIZED:
        phat = st.c2_bar_pad * qp
        inv_rho = 1.0 / rho_b
    else:
        if gamma == 2.0:
            phat = qp * (2.0 * st.rho_bar_pad + qp)
        else:
            phat = st.rho_gamma_pad * np.expm1(
                gamma * np.log1p(qp / st.rho_bar_pad)
            )
        inv_rho = 1.0 / rho

    pres_r = -inv_rho * (DR(phat) + q_c * st.cf_r)
    pres_t = -inv_rho * (DT(phat) * irc + q_c * st.cf_t)

    cor_r = 2.0 * omega * sinc * vp_c
    cor_t = 2.0 * omega * cosc * vp_c
    cor_p = -2.0 * omega * (sinc * vr_c + cosc * vt_c)

    div_rhov = (
        DR(st.rho_bar_pad * vrp)
        + 2.0 * rho_b * vr_c * irc
        + (DT(st.rho_bar_pad * vtp) + cotc * rho_b * vt_c) * irc
    )

    f_r, f_t, f_p = viscous_force_numpy(pad4, st)

    if mode == MODE_LINEARIZED:
        kq[:] = -div_rhov
        adv_r = adv_t = 0.0
    else:
        divv = DR(vrp) + 2.0 * vr_c * irc + (DT(vtp) + cotc * vt_c) * irc
        adv_r = vr_c * DR(vrp) + vt_c * DT(vrp) * irc - (vt_c**2 + vp_c**2) * irc
        adv_t = (
            vr_c * DR(vtp) + vt_c * DT(vtp) * irc
            + (vr_c * vt_c - cotc * vp_c**2) * irc
        )
        kq[:] = -div_rhov - (vr_c * DR(qp) + vt_c * DT(qp) * irc) - q_c * divv

    # azimuthal momentum through the angular-momentum flux: the transport
    # tendency of rho * w * m (m = r sin theta, w = total swirl) is a face
    # flux divergence whose volume sum telescopes to the (vanishing) wall,
    # axis, and origin fluxes; pairing it with the scheme's own q tendency
    # keeps the total angular momentum conserved to the filter/round-off
    # level while remaining a consistent advective form pointwise.
    m_pad = st.r_pad[:, None] * st.sin_pad[None, :]
    if mode == MODE_LINEARIZED:
        Pw = st.rho_bar_pad * st.ubar_pad * m_pad
        rho_m = st.rho_bar_pad[C]
    else:
        Pw = (st.rho_bar_pad + qp) * (st.ubar_pad + vpp) * m_pad
        rho_m = rho
    nr_, nt_ = kq.shape
    rfc = st.r_face[:, None]
    flr = (
        0.5 * (vrp[1 : nr_ + 2, 2 : nt_ + 2] + vrp[2 : nr_ + 3, 2 : nt_ + 2])
        * 0.5 * (Pw[1 : nr_ + 2, 2 : nt_ + 2] + Pw[2 : nr_ + 3, 2 : nt_ + 2])
        * rfc**2
    )
    flt = (
        0.5 * (vtp[2 : nr_ + 2, 1 : nt_ + 2] + vtp[2 : nr_ + 2, 2 : nt_ + 3])
        * 0.5 * (Pw[2 : nr_ + 2, 1 : nt_ + 2] + Pw[2 : nr_ + 2, 2 : nt_ + 3])
        * st.sin_face[None, :]
    )
    div_l = (flr[1:, :] - flr[:-1, :]) / dr * irc**2 + (
        flt[:, 1:] - flt[:, :-1]
    ) / dth * irc * isinc
    m_c = m_pad[C]
    # the q-tendency pairing is linear in the perturbation when linearized
    w_c = st.ubar_pad[C] if mode == MODE_LINEARIZED else st.ubar_pad[C] + vp_c

    kvr[:] = -cor_r - adv_r + pres_r + inv_rho * f_r
    kvt[:] = -cor_t - adv_t + pres_t + inv_rho * f_t
    kvp[:] = (-div_l - kq * w_c * m_c) / (rho_m * m_c) + inv_rho * f_p


def apply_ring_filter_numpy(fields, fpack):
    """Project near-origin rings onto their smooth colatitude bands.

    q keeps a Legendre band, v_phi an associated-Legendre band, and the
    spheroidal pair (v_r, v_theta) is projected jointly so only pairings
    realizable by smooth fields survive where the grid cannot afford the
    stiff complement.
    """
    if fpack is None:
        return
    kq, kvr, kvt, kvp = fields
    nt = kq.shape[1]
    for idx, j in enumerate(fpack.rings):
        Vq = fpack.basis_q[idx]
        Dq = fpack.dual_q[idx]
        kq[j, :] = Vq @ (Dq.T @ kq[j, :])
        Vp = fpack.basis_p[idx]
        Dp = fpack.dual_p[idx]
        kvp[j, :] = Vp @ (Dp.T @ kvp[j, :])
        Vj = fpack.basis_j[idx]
        if Vj.shape[1]:
            Dj = fpack.dual_j[idx]
            stacked = np.concatenate([kvr[j, :], kvt[j, :]])
            proj = Vj @ (Dj.T @ stacked)
            kvr[j, :] = proj[:nt]
            kvt[j, :] = proj[nt:]
        else:
            kvr[j, :] = Vq @ (Dq.T @ kvr[j, :])
            kvt[j, :] = Vp @ (Dp.T @ kvt[j, :])


# ---------------------------------------------------------------------------
# Numba backend
# ---------------------------------------------------------------------------

NUMBA_AVAILABLE = False
if _NUMBA_WANTED:
    try:
        from numba import njit, prange

        NUMBA_AVAILABLE = True
    except ImportError:  # pragma: no cover - exercised via the env flag
        NUMBA_AVAILABLE = False

if NUMBA_AVAILABLE:

    @njit(cache=True, fastmath=True)
    def _fill_ghosts_kernel(q, vr, vt, vp, qp, vrp, vtp, vpp, c1, c2):
        nr, nt = q.shape
        for j in range(nr):
            for k in range(nt):
                qp[j + 2, k + 2] = q[j, k]
                vrp[j + 2, k + 2] = vr[j, k]
                vtp[j + 2, k + 2] = vt[j, k]
                vpp[j + 2, k + 2] = vp[j, k]
        for k in range(2, nt + 2):
            kf = nt + 3 - k
            qp[1, k] = qp[2, kf]
            qp[0, k] = qp[3, kf]
            vrp[1, k] = -vrp[2, kf]
            vrp[0, k] = -vrp[3, kf]
            vtp[1, k] = vtp[2, kf]
            vtp[0, k] = vtp[3, kf]
            vpp[1, k] = -vpp[2, kf]
            vpp[0, k] = -vpp[3, kf]
            qp[nr + 2, k] = qp[nr + 1, k]
            qp[nr + 3, k] = qp[nr, k]
            vrp[nr + 2, k] = -vrp[nr + 1, k]
            vrp[nr + 3, k] = -vrp[nr, k]
            vtp[nr + 2, k] = c1 * vtp[nr + 1, k]
            vtp[nr + 3, k] = c2 * vtp[nr, k]
            vpp[nr + 2, k] = c1 * vpp[nr + 1, k]
            vpp[nr + 3, k] = c2 * vpp[nr, k]
        for j in range(nr + 4):
            qp[j, 1] = qp[j, 2]
            qp[j, 0] = qp[j, 3]
            qp[j, nt + 2] = qp[j, nt + 1]
            qp[j, nt + 3] = qp[j, nt]
            vrp[j, 1] = vrp[j, 2]
            vrp[j, 0] = vrp[j, 3]
            vrp[j, nt + 2] = vrp[j, nt + 1]
            vrp[j, nt + 3] = vrp[j, nt]
            vtp[j, 1] = -vtp[j, 2]
            vtp[j, 0] = -vtp[j, 3]
            vtp[j, nt + 2] = -vtp[j, nt + 1]
            vtp[j, nt + 3] = -vtp[j, nt]
            vpp[j, 1] = -vpp[j, 2]
            vpp[j, 0] = -vpp[j, 3]
            vpp[j, nt + 2] = -vpp[j, nt + 1]
            vpp[j, nt + 3] = -vpp[j, nt]

    @njit(cache=True, fastmath=True, parallel=True)
    def _stage_kernel(qp, vrp, vtp, vpp, kq, kvr, kvt, kvp,
                      r_pad, inv_r_pad, sin_pad, cos_pad, cot_pad, inv_sin_pad,
                      r_face, sin_face,
                      rho_bar_pad, rho_gamma_pad, c2_bar_pad, ubar_pad,
                      cf_r, cf_t,
                      frr, frt, frp, gtr, gtt, gtp, phat, pw, fl_r, fl_t,
                      dr, dth, gamma, mu, lam, omega, mode):
        nr, nt = kq.shape
        i2dr = 1.0 / (2.0 * dr)
        i2dt = 1.0 / (2.0 * dth)
        idr = 1.0 / dr
        idt = 1.0 / dth

        # pass 1: pointwise pressure and angular-momentum density
        for J in prange(nr + 4):
            for K in range(nt + 4):
                rb = rho_bar_pad[J, K]
                qv = qp[J, K]
                if mode == MODE_LINEARIZED:
                    phat[J, K] = c2_bar_pad[J, K] * qv
                    pw[J, K] = rb * ubar_pad[J, K] * r_pad[J] * sin_pad[K]
                else:
                    if gamma == 2.0:
                        phat[J, K] = qv * (2.0 * rb + qv)
                    else:
                        phat[J, K] = rho_gamma_pad[J, K] * np.expm1(
                            gamma * np.log1p(qv / rb)
                        )
                    pw[J, K] = (
                        (rb + qv) * (ubar_pad[J, K] + vpp[J, K])
                        * r_pad[J] * sin_pad[K]
                    )

        # pass 2a: radial-face viscous fluxes, f = 0..nr at padded (f+1, f+2)
        for f in prange(nr + 1):
            rfv = r_face[f]
            rf2 = rfv * rfv
            rf3 = rf2 * rfv
            JL = f + 1
            JR = f + 2
            rL2 = r_pad[JL] * r_pad[JL]
            rR2 = r_pad[JR] * r_pad[JR]
            irL = inv_r_pad[JL]
            irR = inv_r_pad[JR]
            for k in range(nt):
                K = k + 2
                vrL = vrp[JL, K]
                vrR = vrp[JR, K]
                vtL = vtp[JL, K]
                vtR = vtp[JR, K]
                vpL = vpp[JL, K]
                vpR = vpp[JR, K]
                tdivL = (
                    sin_pad[K + 1] * vtp[JL, K + 1]
                    - sin_pad[K - 1] * vtp[JL, K - 1]
                ) * i2dt * inv_sin_pad[K]
                tdivR = (
                    sin_pad[K + 1] * vtp[JR, K + 1]
                    - sin_pad[K - 1] * vtp[JR, K - 1]
                ) * i2dt * inv_sin_pad[K]
                frr[f, k] = (
                    2.0 * mu * rf2 * (vrR - vrL) * idr
                    + lam * (
                        (rR2 * vrR - rL2 * vrL) * idr
                        + rfv * 0.5 * (tdivL + tdivR)
                    )
                )
                dvrtL = (vrp[JL, K + 1] - vrp[JL, K - 1]) * i2dt
                dvrtR = (vrp[JR, K + 1] - vrp[JR, K - 1]) * i2dt
                frt[f, k] = mu * (
                    rf3 * (vtR - vtL) * idr
                    - rf2 * 0.5 * (vtR + vtL)
                    + rf2 * 0.5 * (dvrtL + dvrtR)
                )
                frp[f, k] = mu * (
                    rf3 * (vpR - vpL) * idr - rf2 * 0.5 * (vpR + vpL)
                )
                fl_r[f, k] = (
                    rf2 * 0.25 * (vrL + vrR) * (pw[JL, K] + pw[JR, K])
                )

        # pass 2b: colatitude-face viscous fluxes, g = 0..nt at (j, g+1/g+2)
        for j in prange(nr):
            J = j + 2
            ir = inv_r_pad[J]
            ir2 = ir * ir
            for g in range(nt + 1):
                sf = sin_face[g]
                KD = g + 1
                KU = g + 2
                vrD = vrp[J, KD]
                vrU = vrp[J, KU]
                vtD = vtp[J, KD]
                vtU = vtp[J, KU]
                vpD = vpp[J, KD]
                vpU = vpp[J, KU]
                drvtD = (vtp[J + 1, KD] - vtp[J - 1, KD]) * i2dr
                drvtU = (vtp[J + 1, KU] - vtp[J - 1, KU]) * i2dr
                gtr[j, g] = sf * mu * (
                    (vrU - vrD) * idt * ir
                    + 0.5 * (drvtD + drvtU)
                    - 0.5 * (vtD + vtU) * ir
                )
                rdivD = (
                    r_pad[J + 1] * r_pad[J + 1] * vrp[J + 1, KD]
                    - r_pad[J - 1] * r_pad[J - 1] * vrp[J - 1, KD]
                ) * i2dr * ir2
                rdivU = (
                    r_pad[J + 1] * r_pad[J + 1] * vrp[J + 1, KU]
                    - r_pad[J - 1] * r_pad[J - 1] * vrp[J - 1, KU]
                ) * i2dr * ir2
                gtt[j, g] = (
                    2.0 * mu * sf * ((vtU - vtD) * idt + 0.5 * (vrD + vrU)) * ir
                    + lam * sf * 0.5 * (rdivD + rdivU)
                    + lam * (sin_pad[KU] * vtU - sin_pad[KD] * vtD) * idt * ir
                )
                if sf == 0.0:
                    gtp[j, g] = 0.0
                else:
                    gtp[j, g] = 2.0 * mu * sf * sf * (
                        vpU * sin_pad[KD] - vpD * sin_pad[KU]
                    ) / (sin_pad[KU] + sin_pad[KD]) * idt * ir
                fl_t[j, g] = (
                    sf * 0.25 * (vtD + vtU) * (pw[J, KD] + pw[J, KU])
                )

        # pass 3: assemble tendencies on the core
        for j in prange(nr):
            J = j + 2
            ir = inv_r_pad[J]
            ir2 = ir * ir
            ir3 = ir2 * ir
            for k in range(nt):
                K = k + 2
                ct = cot_pad[K]
                sn = sin_pad[K]
                cs = cos_pad[K]
                isn = inv_sin_pad[K]
                q_c = qp[J, K]
                vr_c = vrp[J, K]
                vt_c = vtp[J, K]
                vp_c = vpp[J, K]
                rho_c = rho_bar_pad[J, K] + q_c

                dvt_t = (vtp[J, K + 1] - vtp[J, K - 1]) * i2dt
                dvr_r = (vrp[J + 1, K] - vrp[J - 1, K]) * i2dr
                divv = dvr_r + 2.0 * vr_c * ir + (dvt_t + ct * vt_c) * ir
                s_tt_c = 2.0 * mu * (dvt_t + vr_c) * ir + lam * divv
                s_pp_c = 2.0 * mu * (vr_c + ct * vt_c) * ir + lam * divv

                f_r = (
                    (frr[j + 1, k] - frr[j, k]) * idr * ir2
                    + (gtr[j, k + 1] - gtr[j, k]) * idt * ir * isn
                    - (s_tt_c + s_pp_c) * ir
                )
                f_t = (
                    (frt[j + 1, k] - frt[j, k]) * idr * ir3
                    + (gtt[j, k + 1] - gtt[j, k]) * idt * ir * isn
                    - ct * s_pp_c * ir
                )
                f_p = (
                    (frp[j + 1, k] - frp[j, k]) * idr * ir3
                    + (gtp[j, k + 1] - gtp[j, k]) * idt * ir * isn * isn
                )

                dphat_r = (phat[J + 1, K] - phat[J - 1, K]) * i2dr
                dphat_t = (phat[J, K + 1] - phat[J, K - 1]) * i2dt * ir
                inv_rho = (
                    1.0 / rho_bar_pad[J, K]
                    if mode == MODE_LINEARIZED
                    else 1.0 / rho_c
                )
                pres_r = -inv_rho * (dphat_r + q_c * cf_r[j, k])
                pres_t = -inv_rho * (dphat_t + q_c * cf_t[j, k])

                cor_r = 2.0 * omega * sn * vp_c
                cor_t = 2.0 * omega * cs * vp_c
                cor_p = -2.0 * omega * (sn * vr_c + cs * vt_c)

                div_rhov = (
                    (
                        rho_bar_pad[J + 1, K] * vrp[J + 1, K]
                        - rho_bar_pad[J - 1, K] * vrp[J - 1, K]
                    ) * i2dr
                    + 2.0 * rho_bar_pad[J, K] * vr_c * ir
                    + (
                        (
                            rho_bar_pad[J, K + 1] * vtp[J, K + 1]
                            - rho_bar_pad[J, K - 1] * vtp[J, K - 1]
                        ) * i2dt
                        + ct * rho_bar_pad[J, K] * vt_c
                    ) * ir
                )

                if mode == MODE_LINEARIZED:
                    kq[j, k] = -div_rhov
                    adv_r = 0.0
                    adv_t = 0.0
                    rho_m = rho_bar_pad[J, K]
                else:
                    dq_r = (qp[J + 1, K] - qp[J - 1, K]) * i2dr
                    dq_t = (qp[J, K + 1] - qp[J, K - 1]) * i2dt * ir
                    dvr_t = (vrp[J, K + 1] - vrp[J, K - 1]) * i2dt
                    dvt_r = (vtp[J + 1, K] - vtp[J - 1, K]) * i2dr
                    adv_r = (
                        vr_c * dvr_r
                        + vt_c * dvr_t * ir
                        - (vt_c * vt_c + vp_c * vp_c) * ir
                    )
                    adv_t = (
                        vr_c * dvt_r
                        + vt_c * dvt_t * ir
                        + (vr_c * vt_c - ct * vp_c * vp_c) * ir
                    )
                    kq[j, k] = (
                        -div_rhov - (vr_c * dq_r + vt_c * dq_t) - q_c * divv
                    )
                    rho_m = rho_c

                # swirl tendency from the angular-momentum flux divergence,
                # paired with this cell's q tendency (see numpy reference)
                div_l = (fl_r[j + 1, k] - fl_r[j, k]) * idr * ir * ir + (
                    fl_t[j, k + 1] - fl_t[j, k]
                ) * idt * ir * isn
                m_c = r_pad[J] * sn
                if mode == MODE_LINEARIZED:
                    w_c = ubar_pad[J, K]
                else:
                    w_c = ubar_pad[J, K] + vp_c

                kvr[j, k] = -cor_r - adv_r + pres_r + inv_rho * f_r
                kvt[j, k] = -cor_t - adv_t + pres_t + inv_rho * f_t
                kvp[j, k] = (
                    (-div_l - kq[j, k] * w_c * m_c) / (rho_m * m_c)
                    + inv_rho * f_p
                )

    @njit(cache=True, fastmath=True)
    def _project_ring(arr, j, basis, dual, idx, nm, nt):
        coef = np.zeros(nm)
        for m in range(nm):
            acc = 0.0
            for k in range(nt):
                acc += dual[idx, k, m] * arr[j, k]
            coef[m] = acc
        for k in range(nt):
            acc = 0.0
            for m in range(nm):
                acc += basis[idx, k, m] * coef[m]
            arr[j, k] = acc

    @njit(cache=True, fastmath=True, parallel=True)
    def _ring_filter_kernel(kq, kvr, kvt, kvp, rings,
                            basis_q, dual_q, nmodes_q,
                            basis_p, dual_p, nmodes_p,
                            basis_j, dual_j, nmodes_j):
        nt = kvr.shape[1]
        for idx in prange(rings.shape[0]):
            j = rings[idx]
            _project_ring(kq, j, basis_q, dual_q, idx, nmodes_q[idx], nt)
            _project_ring(kvp, j, basis_p, dual_p, idx, nmodes_p[idx], nt)
            nj = nmodes_j[idx]
            if nj > 0:
                coefj = np.zeros(nj)
                for m in range(nj):
                    acc = 0.0
                    for k in range(nt):
                        acc += dual_j[idx, k, m] * kvr[j, k]
                        acc += dual_j[idx, nt + k, m] * kvt[j, k]
                    coefj[m] = acc
                for k in range(nt):
                    acc_r = 0.0
                    acc_t = 0.0
                    for m in range(nj):
                        acc_r += basis_j[idx, k, m] * coefj[m]
                        acc_t += basis_j[idx, nt + k, m] * coefj[m]
                    kvr[j, k] = acc_r
                    kvt[j, k] = acc_t
            else:
                _project_ring(kvr, j, basis_q, dual_q, idx, nmodes_q[idx], nt)
                _project_ring(kvt, j, basis_p, dual_p, idx, nmodes_p[idx], nt)

    @njit(cache=True, fastmath=True)
    def _rk4_step_kernel(q, vr, vt, vp, qp, vrp, vtp, vpp,
                         kq, kvr, kvt, kvp,
                         aq, avr, avt, avp,
                         yq, yvr, yvt, yvp,
                         rings, basis_q, dual_q, nmodes_q,
                         basis_p, dual_p, nmodes_p,
                         basis_j, dual_j, nmodes_j, nrings,
                         r_pad, inv_r_pad, sin_pad, cos_pad, cot_pad,
                         inv_sin_pad, r_face, sin_face,
                         rho_bar_pad, rho_gamma_pad, c2_bar_pad, ubar_pad,
                         cf_r, cf_t,
                         frr, frt, frp, gtr, gtt, gtp, phat, pw, fl_r, fl_t,
                         dr, dth, gamma, mu, lam, omega, mode, wc1, wc2, dt):
        nr, nt = q.shape

        def eval_stage(sq, svr, svt, svp):
            _fill_ghosts_kernel(sq, svr, svt, svp, qp, vrp, vtp, vpp, wc1, wc2)
            _stage_kernel(qp, vrp, vtp, vpp, kq, kvr, kvt, kvp,
                          r_pad, inv_r_pad, sin_pad, cos_pad, cot_pad,
                          inv_sin_pad, r_face, sin_face,
                          rho_bar_pad, rho_gamma_pad, c2_bar_pad, ubar_pad,
                          cf_r, cf_t,
                          frr, frt, frp, gtr, gtt, gtp, phat, pw, fl_r, fl_t,
                          dr, dth, gamma, mu, lam, omega, mode)
            if nrings > 0:
                _ring_filter_kernel(kq, kvr, kvt, kvp, rings,
                                    basis_q, dual_q, nmodes_q,
                                    basis_p, dual_p, nmodes_p,
                                    basis_j, dual_j, nmodes_j)

        eval_stage(q, vr, vt, vp)
        for j in range(nr):
            for k in range(nt):
                aq[j, k] = kq[j, k]
                avr[j, k] = kvr[j, k]
                avt[j, k] = kvt[j, k]
                avp[j, k] = kvp[j, k]
                yq[j, k] = q[j, k] + 0.5 * dt * kq[j, k]
                yvr[j, k] = vr[j, k] + 0.5 * dt * kvr[j, k]
                yvt[j, k] = vt[j, k] + 0.5 * dt * kvt[j, k]
                yvp[j, k] = vp[j, k] + 0.5 * dt * kvp[j, k]
        eval_stage(yq, yvr, yvt, yvp)
        for j in range(nr):
            for k in range(nt):
                aq[j, k] += 2.0 * kq[j, k]
                avr[j, k] += 2.0 * kvr[j, k]
                avt[j, k] += 2.0 * kvt[j, k]
                avp[j, k] += 2.0 * kvp[j, k]
                yq[j, k] = q[j, k] + 0.5 * dt * kq[j, k]
                yvr[j, k] = vr[j, k] + 0.5 * dt * kvr[j, k]
                yvt[j, k] = vt[j, k] + 0.5 * dt * kvt[j, k]
                yvp[j, k] = vp[j, k] + 0.5 * dt * kvp[j, k]
        eval_stage(yq, yvr, yvt, yvp)
        for j in range(nr):
            for k in range(nt):
                aq[j, k] += 2.0 * kq[j, k]
                avr[j, k] += 2.0 * kvr[j, k]
                avt[j, k] += 2.0 * kvt[j, k]
                avp[j, k] += 2.0 * kvp[j, k]
                yq[j, k] = q[j, k] + dt * kq[j, k]
                yvr[j, k] = vr[j, k] + dt * kvr[j, k]
                yvt[j, k] = vt[j, k] + dt * kvt[j, k]
                yvp[j, k] = vp[j, k] + dt * kvp[j, k]
        eval_stage(yq, yvr, yvt, yvp)
        c = dt / 6.0
        qmax = 0.0
        for j in range(nr):
            for k in range(nt):
                q[j, k] += c * (aq[j, k] + kq[j, k])
                vr[j, k] += c * (avr[j, k] + kvr[j, k])
                vt[j, k] += c * (avt[j, k] + kvt[j, k])
                vp[j, k] += c * (avp[j, k] + kvp[j, k])
                aq_abs = abs(q[j, k])
                if aq_abs > qmax or aq_abs != aq_abs:
                    qmax = aq_abs
        return qmax


def fill_ghosts(core4, pad4, wall_c1, wall_c2):
    if NUMBA_AVAILABLE:
        q, vr, vt, vp = core4
        qp, vrp, vtp, vpp = pad4
        _fill_ghosts_kernel(q, vr, vt, vp, qp, vrp, vtp, vpp, wall_c1, wall_c2)
    else:
        fill_ghosts_numpy(core4, pad4, wall_c1, wall_c2)


def stage_tendency(pad4, out4, st, mode):
    if NUMBA_AVAILABLE:
        qp, vrp, vtp, vpp = pad4
        kq, kvr, kvt, kvp = out4
        _stage_kernel(qp, vrp, vtp, vpp, kq, kvr, kvt, kvp,
                      st.r_pad, st.inv_r_pad, st.sin_pad, st.cos_pad,
                      st.cot_pad, st.inv_sin_pad, st.r_face, st.sin_face,
                      st.rho_bar_pad, st.rho_gamma_pad, st.c2_bar_pad,
                      st.ubar_pad, st.cf_r, st.cf_t,
                      st.ws_frr, st.ws_frt, st.ws_frp,
                      st.ws_gtr, st.ws_gtt, st.ws_gtp, st.ws_phat,
                      st.ws_pw, st.ws_flr, st.ws_flt,
                      st.dr, st.dtheta, st.gamma, st.mu, st.lam, st.omega,
                      mode)
    else:
        stage_tendency_numpy(pad4, out4, st, mode)


def apply_ring_filter(fields, fpack):
    if fpack is None:
        return
    if NUMBA_AVAILABLE:
        kq, kvr, kvt, kvp = fields
        _ring_filter_kernel(kq, kvr, kvt, kvp, fpack.rings_arr,
                            fpack.basis_q_arr, fpack.dual_q_arr,
                            fpack.nmodes_q_arr,
                            fpack.basis_p_arr, fpack.dual_p_arr,
                            fpack.nmodes_p_arr,
                            fpack.basis_j_arr, fpack.dual_j_arr,
                            fpack.nmodes_j_arr)
    else:
        apply_ring_filter_numpy(fields, fpack)



def rk4_step(core4, pads, kws, accws, yws, st, fpack, mode, dt):
    """Full RK4 step on the core arrays (numba path); returns max|q|."""
    if not NUMBA_AVAILABLE:
        raise RuntimeError("fused rk4_step requires the numba backend")
    q, vr, vt, vp = core4
    if fpack is not None and len(fpack.rings):
        fargs = (fpack.rings_arr, fpack.basis_q_arr, fpack.dual_q_arr,
                 fpack.nmodes_q_arr, fpack.basis_p_arr, fpack.dual_p_arr,
                 fpack.nmodes_p_arr, fpack.basis_j_arr, fpack.dual_j_arr,
                 fpack.nmodes_j_arr, len(fpack.rings))
    else:
        z2 = np.zeros((1, 2 * q.shape[1], 1))
        z1 = np.zeros((1, q.shape[1], 1))
        fargs = (np.zeros(1, dtype=np.int64), z1, z1,
                 np.zeros(1, dtype=np.int64), z1, z1,
                 np.zeros(1, dtype=np.int64), z2, z2,
                 np.zeros(1, dtype=np.int64), 0)
    return _rk4_step_kernel(
        q, vr, vt, vp, *pads, *kws, *accws, *yws,
        *fargs,
        st.r_pad, st.inv_r_pad, st.sin_pad, st.cos_pad, st.cot_pad,
        st.inv_sin_pad, st.r_face, st.sin_face,
        st.rho_bar_pad, st.rho_gamma_pad, st.c2_bar_pad, st.ubar_pad,
        st.cf_r, st.cf_t,
        st.ws_frr, st.ws_frt, st.ws_frp, st.ws_gtr, st.ws_gtt, st.ws_gtp,
        st.ws_phat, st.ws_pw, st.ws_flr, st.ws_flt,
        st.dr, st.dtheta, st.gamma, st.mu, st.lam, st.omega, mode,
        st.wall_c1, st.wall_c2, dt)


HAS_FUSED_STEP = NUMBA_AVAILABLE

BACKEND = "numba" if NUMBA_AVAILABLE else "numpy"
