"""Dormand-Prince 5(4) integrator specialised to the rotating-frame resonator.

The state is a complex array ``Z`` of shape ``(1 + S, 3)``: row 0 is the
circuit state ``(I_L, V_Cm, V_Ct)`` and rows ``1..S`` are forward sensitivity
columns ``dx/dp`` for ``S`` real input directions.  Each row ``j`` has its own
piecewise forcing; within a segment starting at ``t0`` it is

    f_j(t) = prev_j + (cur_j - prev_j) * (1 - exp(-(t - t0) / tau_r))

which for row 0 is the smoothed drive voltage and for sensitivity rows the
top-hat derivative of that drive with respect to one input amplitude.

Everything here is compiled with numba and holds no Python state.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# Butcher tableau, 5th-order weights, error weights and dense-output weights.
C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
A71, A73, A74, A75, A76 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1, E3, E4, E5, E6, E7 = 71 / 57600, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40
D1 = -12715105075 / 11282082432
D3 = 87487479700 / 32700410799
D4 = -10690763975 / 1880347072
D5 = 701980252875 / 199316789632
D6 = -1453857185 / 822651844
D7 = 69997945 / 29380423

# model parameter vector layout
P_R0, P_L0, P_CM, P_CT, P_RL, P_AL, P_AR, P_ETA, P_WR = range(9)

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_MAXSTEPS = 2
STATUS_NONFINITE = 3


@njit(cache=True, nogil=True)
def rhs(t, Z, t0, tau_r, prev, cur, par, out):
    R0 = par[P_R0]
    L0 = par[P_L0]
    rlcm = 1.0 / (par[P_RL] * par[P_CM])
    rlct = 1.0 / (par[P_RL] * par[P_CT])
    aL = par[P_AL]
    aR = par[P_AR]
    eta = par[P_ETA]
    wr = par[P_WR]
    if tau_r > 0.0:
        rise = -np.expm1(-(t - t0) / tau_r)
    else:
        rise = 1.0
    I = Z[0, 0]
    s = I.real * I.real + I.imag * I.imag
    L = L0 * (1.0 + aL * s)
    if aR != 0.0 and s > 0.0:
        sh = s ** (0.5 * eta)
        R = R0 * (1.0 + aR * sh)
        dR = R0 * aR * 0.5 * eta * sh / s
    else:
        R = R0
        dR = 0.0
    dL = L0 * aL
    a00 = -R / L - 1j * wr
    a02 = 1.0 / L
    a11 = -rlcm - 1j * wr
    a12 = rlcm
    a20 = -1.0 / par[P_CT]
    a21 = -rlct
    a22 = rlct - 1j * wr
    # derivative of row 0 of A(x) x with respect to s = |I|^2
    c = -(dR * L - R * dL) / (L * L) * I - dL / (L * L) * Z[0, 2]
    n = Z.shape[0]
    for j in range(n):
        f = prev[j] + (cur[j] - prev[j]) * rise
        y0 = Z[j, 0]
        y1 = Z[j, 1]
        y2 = Z[j, 2]
        d0 = a00 * y0 + a02 * y2
        if j > 0:
            d0 += 2.0 * c * (I.real * y0.real + I.imag * y0.imag)
        out[j, 0] = d0
        out[j, 1] = a11 * y1 + a12 * y2 + f * rlcm
        out[j, 2] = a20 * y0 + a21 * y1 + a22 * y2 + f * rlct


@njit(cache=True, nogil=True)
def _err_norm(Z, Znew, err, atol, rtol):
    n, k = Z.shape
    acc = 0.0
    for j in range(n):
        for i in range(k):
            sc = atol[i] + rtol * max(abs(Z[j, i]), abs(Znew[j, i]))
            e = abs(err[j, i]) / sc
            acc += e * e
    return np.sqrt(acc / (n * k))


@njit(cache=True, nogil=True)
def _interp(rc, theta):
    t1 = 1.0 - theta
    return rc[0] + theta * (rc[1] + t1 * (rc[2] + theta * (rc[3] + t1 * rc[4])))


@njit(cache=True, nogil=True)
def integrate(
    Z0, edges, prev, cur, tau_r, par, atol, rtol, h0, hmin, max_steps, t_eval, out_eval, dense, dense_t, dense_h, dense_rc
):
    """Integrate across segments ``[edges[i], edges[i+1]]``.

    ``prev`` and ``cur`` have shape ``(n_seg, 1 + S)``.  Values at the sorted
    times ``t_eval`` are written to ``out_eval``; if ``dense`` is true the
    per-step interpolation data for row 0 is written to the ``dense_*``
    buffers.  States at the segment edges are written to the return array.

    Returns ``(status, n_steps, t_fail, Z_edges, n_dense)``.
    """
    n_seg = edges.size - 1
    nrow, ncol = Z0.shape
    Z = Z0.copy()
    Z_edges = np.zeros((n_seg + 1, nrow, ncol), dtype=np.complex128)
    Z_edges[0] = Z
    k1 = np.empty_like(Z)
    k2 = np.empty_like(Z)
    k3 = np.empty_like(Z)
    k4 = np.empty_like(Z)
    k5 = np.empty_like(Z)
    k6 = np.empty_like(Z)
    k7 = np.empty_like(Z)
    Ztmp = np.empty_like(Z)
    Znew = np.empty_like(Z)
    err = np.empty_like(Z)
    rc = np.empty((5, nrow, ncol), dtype=np.complex128)
    ie = 0
    n_eval = t_eval.size
    # samples at or before the start time
    while ie < n_eval and t_eval[ie] <= edges[0]:
        out_eval[ie] = Z
        ie += 1
    h = h0
    steps = 0
    nd = 0
    for sidx in range(n_seg):
        t = edges[sidx]
        t_end = edges[sidx + 1]
        seg_len = t_end - t
        if seg_len <= 0.0:
            Z_edges[sidx + 1] = Z
            continue
        pv = prev[sidx]
        cv = cur[sidx]
        rhs(t, Z, t, tau_r, pv, cv, par, k1)
        if h > seg_len:
            h = seg_len
        last = False
        while True:
            if t + h >= t_end - 1e-12 * seg_len:
                h = t_end - t
                last = True
            for j in range(nrow):
                for i in range(ncol):
                    Ztmp[j, i] = Z[j, i] + h * A21 * k1[j, i]
            rhs(t + C2 * h, Ztmp, edges[sidx], tau_r, pv, cv, par, k2)
            for j in range(nrow):
                for i in range(ncol):
                    Ztmp[j, i] = Z[j, i] + h * (A31 * k1[j, i] + A32 * k2[j, i])
            rhs(t + C3 * h, Ztmp, edges[sidx], tau_r, pv, cv, par, k3)
            for j in range(nrow):
                for i in range(ncol):
                    Ztmp[j, i] = Z[j, i] + h * (A41 * k1[j, i] + A42 * k2[j, i] + A43 * k3[j, i])
            rhs(t + C4 * h, Ztmp, edges[sidx], tau_r, pv, cv, par, k4)
            for j in range(nrow):
                for i in range(ncol):
                    Ztmp[j, i] = Z[j, i] + h * (A51 * k1[j, i] + A52 * k2[j, i] + A53 * k3[j, i] + A54 * k4[j, i])
            rhs(t + C5 * h, Ztmp, edges[sidx], tau_r, pv, cv, par, k5)
            for j in range(nrow):
                for i in range(ncol):
                    Ztmp[j, i] = Z[j, i] + h * (
                        A61 * k1[j, i] + A62 * k2[j, i] + A63 * k3[j, i] + A64 * k4[j, i] + A65 * k5[j, i]
                    )
            rhs(t + h, Ztmp, edges[sidx], tau_r, pv, cv, par, k6)
            for j in range(nrow):
                for i in range(ncol):
                    Znew[j, i] = Z[j, i] + h * (
                        A71 * k1[j, i] + A73 * k3[j, i] + A74 * k4[j, i] + A75 * k5[j, i] + A76 * k6[j, i]
                    )
            rhs(t + h, Znew, edges[sidx], tau_r, pv, cv, par, k7)
            for j in range(nrow):
                for i in range(ncol):
                    err[j, i] = h * (
                        E1 * k1[j, i] + E3 * k3[j, i] + E4 * k4[j, i] + E5 * k5[j, i] + E6 * k6[j, i] + E7 * k7[j, i]
                    )
            en = _err_norm(Z, Znew, err, atol, rtol)
            steps += 1
            if not np.isfinite(en):
                return STATUS_NONFINITE, steps, t, Z_edges, nd
            if steps > max_steps:
                return STATUS_MAXSTEPS, steps, t, Z_edges, nd
            if en <= 1.0:
                # accepted: build dense-output coefficients
                for j in range(nrow):
                    for i in range(ncol):
                        ydiff = Znew[j, i] - Z[j, i]
                        bspl = h * k1[j, i] - ydiff
                        rc[0, j, i] = Z[j, i]
                        rc[1, j, i] = ydiff
                        rc[2, j, i] = bspl
                        rc[3, j, i] = ydiff - h * k7[j, i] - bspl
                        rc[4, j, i] = h * (
                            D1 * k1[j, i] + D3 * k3[j, i] + D4 * k4[j, i] + D5 * k5[j, i] + D6 * k6[j, i] + D7 * k7[j, i]
                        )
                t_new = t_end if last else t + h
                while ie < n_eval and t_eval[ie] <= t_new:
                    theta = (t_eval[ie] - t) / h
                    out_eval[ie] = _interp(rc, theta)
                    ie += 1
                if dense:
                    if nd < dense_t.size:
                        dense_t[nd] = t
                        dense_h[nd] = h
                        for q in range(5):
                            for i in range(ncol):
                                dense_rc[nd, q, i] = rc[q, 0, i]
                    nd += 1
                for j in range(nrow):
                    for i in range(ncol):
                        Z[j, i] = Znew[j, i]
                        k1[j, i] = k7[j, i]
                fac = 0.9 * en ** (-0.2) if en > 0.0 else 10.0
                fac = min(10.0, max(0.2, fac))
                if last:
                    h = max(h * fac, hmin)
                    break
                t = t_new
                h = h * fac
            else:
                fac = max(0.2, 0.9 * en ** (-0.2))
                h = h * fac
                last = False
                if h < hmin:
                    return STATUS_UNDERFLOW, steps, t, Z_edges, nd
        Z_edges[sidx + 1] = Z
    while ie < n_eval:
        out_eval[ie] = Z
        ie += 1
    return STATUS_OK, steps, edges[n_seg], Z_edges, nd
