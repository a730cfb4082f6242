"""Compiled fused evaluation of the symplectic-flow tendency.

The reference implementation in ``flow`` assembles the right-hand side
slab by slab through batched numpy contractions.  This module provides a
drop-in replacement for the "scf" mode on 4-dimensional grids with the
4th-order stencil: one compiled pass computes the finite-difference jets
and one computes the full pointwise tendency, keeping every intermediate
in registers instead of grid-sized temporaries.

Determinism contract: the slab partition, all loop orders and all
reduction trees are fixed and independent of the worker count, so the
fused engine produces bit-identical results for any AKFLOW_THREADS.
The kernels are compiled without fastmath, with a fixed iteration order,
so results are also reproducible across runs on the same platform.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from numba import njit

from .errors import ConfigError
from .grid import _extended_slab, _tree_sum, from_point_batch, slab_ranges

__all__ = ["fused_scf_tendency", "warmup"]


@njit(cache=True, nogil=True)
def _jet_kernel_4(fin, halo, rows, m, inv12h, inv12h2, out_v, out_d, out_dd):
    """4th-order jets of all components on one grid-axis-0 slab.

    fin:    (L, C) point-major view of the halo-extended slab, where
            L = (rows + 2*halo) * m**3 and points are indexed
            p = ((e0*m + i1)*m + i2)*m + i3 with e0 the extended row.
    out_v:  (N, C) values on the interior rows, N = rows * m**3.
    out_d:  (N, 4, C) first derivatives, axis index first.
    out_dd: (N, 4, 4, C) second derivatives (both orders filled).

    Axis 0 never wraps (the halo absorbs the stencil reach); axes 1..3
    wrap modulo m.  Weights: d1 = [1, -8, 8, -1]/(12h) on offsets
    [-2, -1, 1, 2]; d2 = [-1, 16, -30, 16, -1]/(12h^2) on [-2..2]; mixed
    partials are the tensor product of two d1 stencils.
    """
    C = fin.shape[1]
    s2 = m
    s1 = m * m
    s0 = m * m * m
    # precomputed wrap-around tap offsets per axis position
    off1 = np.empty((m, 4), np.int64)
    off2 = np.empty((m, 4), np.int64)
    off3 = np.empty((m, 4), np.int64)
    for i in range(m):
        off1[i, 0] = ((i - 2) % m - i) * s1
        off1[i, 1] = ((i - 1) % m - i) * s1
        off1[i, 2] = ((i + 1) % m - i) * s1
        off1[i, 3] = ((i + 2) % m - i) * s1
        off2[i, 0] = ((i - 2) % m - i) * s2
        off2[i, 1] = ((i - 1) % m - i) * s2
        off2[i, 2] = ((i + 1) % m - i) * s2
        off2[i, 3] = ((i + 2) % m - i) * s2
        off3[i, 0] = (i - 2) % m - i
        off3[i, 1] = (i - 1) % m - i
        off3[i, 2] = (i + 1) % m - i
        off3[i, 3] = (i + 2) % m - i
    doff = np.empty((4, 4), np.int64)
    doff[0, 0] = -2 * s0
    doff[0, 1] = -s0
    doff[0, 2] = s0
    doff[0, 3] = 2 * s0
    w1 = np.empty(4)
    w1[0] = 1.0
    w1[1] = -8.0
    w1[2] = 8.0
    w1[3] = -1.0
    tmp = np.empty(C)
    inv144h2 = inv12h * inv12h
    for r in range(rows):
        e0 = r + halo
        for i1 in range(m):
            for i2 in range(m):
                for i3 in range(m):
                    n = ((r * m + i1) * m + i2) * m + i3
                    base = ((e0 * m + i1) * m + i2) * m + i3
                    for ta in range(4):
                        doff[1, ta] = off1[i1, ta]
                        doff[2, ta] = off2[i2, ta]
                        doff[3, ta] = off3[i3, ta]
                    for c in range(C):
                        out_v[n, c] = fin[base, c]
                    for a in range(4):
                        o0 = base + doff[a, 0]
                        o1 = base + doff[a, 1]
                        o2 = base + doff[a, 2]
                        o3 = base + doff[a, 3]
                        for c in range(C):
                            out_d[n, a, c] = (
                                fin[o0, c]
                                - 8.0 * fin[o1, c]
                                + 8.0 * fin[o2, c]
                                - fin[o3, c]
                            ) * inv12h
                        for c in range(C):
                            out_dd[n, a, a, c] = (
                                -fin[o0, c]
                                + 16.0 * fin[o1, c]
                                - 30.0 * fin[base, c]
                                + 16.0 * fin[o2, c]
                                - fin[o3, c]
                            ) * inv12h2
                    for a in range(4):
                        for b in range(a + 1, 4):
                            for c in range(C):
                                tmp[c] = 0.0
                            for ta in range(4):
                                oa = doff[a, ta]
                                wa = w1[ta]
                                for tb in range(4):
                                    o = base + oa + doff[b, tb]
                                    wgt = wa * w1[tb]
                                    for c in range(C):
                                        tmp[c] += wgt * fin[o, c]
                            for c in range(C):
                                v = tmp[c] * inv144h2
                                out_dd[n, a, b, c] = v
                                out_dd[n, b, a, c] = v


@njit(cache=True, nogil=True)
def _scf_kernel_4(vv, d1, d2, want_rm, out_dg, out_dj, out_rm2, out_ric2,
                  out_dj2, out_detg):
    """Pointwise symplectic-flow tendency from packed jets (dim 4).

    vv: (N, 32) values — columns 0..15 are g (row-major), 16..31 are J.
    d1: (N, 4, 32) first derivatives, d2: (N, 4, 4, 32) second derivatives.
    Outputs: dg/dt (N,4,4), dJ/dt (N,4,4), |Rm|^2 (if want_rm), |Ric|^2,
    |DJ|^2 and det g per point.  Mirrors the slot conventions of the
    reference route: dg[k,i,j] = d_k g_ij, ddg[l,k,i,j] = d_l d_k g_ij,
    gamma[k,i,j] = Gamma^k_ij, nj[k,i,j] = (D_k J)^i_j.
    """
    N = vv.shape[0]
    G = np.empty((4, 4))
    J = np.empty((4, 4))
    GI = np.empty((4, 4))
    DG = np.empty((4, 4, 4))
    DJ = np.empty((4, 4, 4))
    A = np.empty((4, 4, 4))
    GAM = np.empty((4, 4, 4))
    HALF = np.empty((4, 4, 4))
    DGINV = np.empty((4, 4, 4))
    DA = np.empty((4, 4, 4, 4))
    DGAM = np.empty((4, 4, 4, 4))
    RIC = np.empty((4, 4))
    NJ = np.empty((4, 4, 4))
    Q = np.empty((4, 4, 4))
    W1M = np.empty((4, 4))
    W2M = np.empty((4, 4))
    LAP = np.empty((4, 4))
    NJL = np.empty((4, 4, 4))
    NJUP = np.empty((4, 4, 4))
    TM = np.empty((4, 4, 4))
    NJMIX = np.empty((4, 4, 4))
    NJJ = np.empty((4, 4, 4))
    B1 = np.empty((4, 4))
    B2 = np.empty((4, 4))
    N2 = np.empty((4, 4))
    NSQ = np.empty((4, 4))
    RS = np.empty((4, 4))
    RM31 = np.empty((4, 4, 4, 4))
    U1 = np.empty((4, 4, 4, 4))
    U2 = np.empty((4, 4, 4, 4))
    UV = np.empty(4)

    for n in range(N):
        for i in range(4):
            for j in range(4):
                G[i, j] = vv[n, 4 * i + j]
                J[i, j] = vv[n, 16 + 4 * i + j]
        for k in range(4):
            for i in range(4):
                for j in range(4):
                    DG[k, i, j] = d1[n, k, 4 * i + j]
                    DJ[k, i, j] = d1[n, k, 16 + 4 * i + j]
        # second derivatives are read straight from d2 (each entry is
        # used once): ddg[l,k,i,j] = d2[n,l,k,4i+j], ddj likewise at +16

        # -- inverse metric and determinant (cofactor expansion) --------
        s0 = G[0, 0] * G[1, 1] - G[1, 0] * G[0, 1]
        s1 = G[0, 0] * G[1, 2] - G[1, 0] * G[0, 2]
        s2 = G[0, 0] * G[1, 3] - G[1, 0] * G[0, 3]
        s3 = G[0, 1] * G[1, 2] - G[1, 1] * G[0, 2]
        s4 = G[0, 1] * G[1, 3] - G[1, 1] * G[0, 3]
        s5 = G[0, 2] * G[1, 3] - G[1, 2] * G[0, 3]
        c5 = G[2, 2] * G[3, 3] - G[3, 2] * G[2, 3]
        c4 = G[2, 1] * G[3, 3] - G[3, 1] * G[2, 3]
        c3 = G[2, 1] * G[3, 2] - G[3, 1] * G[2, 2]
        c2 = G[2, 0] * G[3, 3] - G[3, 0] * G[2, 3]
        c1 = G[2, 0] * G[3, 2] - G[3, 0] * G[2, 2]
        c0 = G[2, 0] * G[3, 1] - G[3, 0] * G[2, 1]
        det = s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0
        out_detg[n] = det
        inv = 1.0 / det
        GI[0, 0] = (G[1, 1] * c5 - G[1, 2] * c4 + G[1, 3] * c3) * inv
        GI[0, 1] = (-G[0, 1] * c5 + G[0, 2] * c4 - G[0, 3] * c3) * inv
        GI[0, 2] = (G[3, 1] * s5 - G[3, 2] * s4 + G[3, 3] * s3) * inv
        GI[0, 3] = (-G[2, 1] * s5 + G[2, 2] * s4 - G[2, 3] * s3) * inv
        GI[1, 0] = (-G[1, 0] * c5 + G[1, 2] * c2 - G[1, 3] * c1) * inv
        GI[1, 1] = (G[0, 0] * c5 - G[0, 2] * c2 + G[0, 3] * c1) * inv
        GI[1, 2] = (-G[3, 0] * s5 + G[3, 2] * s2 - G[3, 3] * s1) * inv
        GI[1, 3] = (G[2, 0] * s5 - G[2, 2] * s2 + G[2, 3] * s1) * inv
        GI[2, 0] = (G[1, 0] * c4 - G[1, 1] * c2 + G[1, 3] * c0) * inv
        GI[2, 1] = (-G[0, 0] * c4 + G[0, 1] * c2 - G[0, 3] * c0) * inv
        GI[2, 2] = (G[3, 0] * s4 - G[3, 1] * s2 + G[3, 3] * s0) * inv
        GI[2, 3] = (-G[2, 0] * s4 + G[2, 1] * s2 - G[2, 3] * s0) * inv
        GI[3, 0] = (-G[1, 0] * c3 + G[1, 1] * c1 - G[1, 2] * c0) * inv
        GI[3, 1] = (G[0, 0] * c3 - G[0, 1] * c1 + G[0, 2] * c0) * inv
        GI[3, 2] = (-G[3, 0] * s3 + G[3, 1] * s1 - G[3, 2] * s0) * inv
        GI[3, 3] = (G[2, 0] * s3 - G[2, 1] * s1 + G[2, 2] * s0) * inv

        # -- Levi-Civita connection and its first derivative ------------
        for l in range(4):
            for i in range(4):
                for j in range(4):
                    A[l, i, j] = DG[i, j, l] + DG[j, i, l] - DG[l, i, j]
        for k in range(4):
            for i in range(4):
                for j in range(4):
                    acc = 0.0
                    for l in range(4):
                        acc += GI[k, l] * A[l, i, j]
                    GAM[k, i, j] = 0.5 * acc
        for mm in range(4):
            for a in range(4):
                for l in range(4):
                    acc = 0.0
                    for b in range(4):
                        acc += DG[mm, a, b] * GI[b, l]
                    HALF[mm, a, l] = acc
        for mm in range(4):
            for k in range(4):
                for l in range(4):
                    acc = 0.0
                    for a in range(4):
                        acc += GI[k, a] * HALF[mm, a, l]
                    DGINV[mm, k, l] = -acc
        for mm in range(4):
            for l in range(4):
                for i in range(4):
                    for j in range(4):
                        DA[mm, l, i, j] = (
                            d2[n, mm, i, 4 * j + l]
                            + d2[n, mm, j, 4 * i + l]
                            - d2[n, mm, l, 4 * i + j]
                        )
        for mm in range(4):
            for k in range(4):
                for i in range(4):
                    for j in range(4):
                        acc = 0.0
                        for l in range(4):
                            acc += DGINV[mm, k, l] * A[l, i, j]
                            acc += GI[k, l] * DA[mm, l, i, j]
                        DGAM[mm, k, i, j] = 0.5 * acc

        # -- Ricci tensor (traced curvature) -----------------------------
        for p in range(4):
            acc = 0.0
            for i in range(4):
                acc += GAM[i, i, p]
            UV[p] = acc
        for j in range(4):
            for k in range(4):
                acc = 0.0
                for i in range(4):
                    acc += DGAM[i, i, j, k] - DGAM[j, i, i, k]
                for p in range(4):
                    acc += UV[p] * GAM[p, j, k]
                for i in range(4):
                    for p in range(4):
                        acc -= GAM[i, j, p] * GAM[p, i, k]
                RIC[j, k] = acc

        # -- |Rm|^2 (only when requested: first Runge-Kutta stage) ------
        if want_rm:
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        for l in range(4):
                            acc = DGAM[i, l, j, k] - DGAM[j, l, i, k]
                            for p in range(4):
                                acc += (
                                    GAM[l, i, p] * GAM[p, j, k]
                                    - GAM[l, j, p] * GAM[p, i, k]
                                )
                            RM31[i, j, k, l] = acc
            # lower the last slot: RM_{ijkl} = RM31[i,j,k,m] g_{ml}
            for i in range(4):
                for j in range(4):
                    for k in range(4):
                        for l in range(4):
                            acc = 0.0
                            for mm in range(4):
                                acc += RM31[i, j, k, mm] * G[mm, l]
                            U1[i, j, k, l] = acc
            # sequentially raise all four slots into U2, contract with U1
            for a in range(4):
                for j in range(4):
                    for k in range(4):
                        for l in range(4):
                            acc = 0.0
                            for i in range(4):
                                acc += GI[a, i] * U1[i, j, k, l]
                            U2[a, j, k, l] = acc
            for a in range(4):
                for b in range(4):
                    for k in range(4):
                        for l in range(4):
                            acc = 0.0
                            for j in range(4):
                                acc += GI[b, j] * U2[a, j, k, l]
                            RM31[a, b, k, l] = acc
            for a in range(4):
                for b in range(4):
                    for cc in range(4):
                        for l in range(4):
                            acc = 0.0
                            for k in range(4):
                                acc += GI[cc, k] * RM31[a, b, k, l]
                            U2[a, b, cc, l] = acc
            acc_rm = 0.0
            for a in range(4):
                for b in range(4):
                    for cc in range(4):
                        for dd in range(4):
                            acc = 0.0
                            for l in range(4):
                                acc += GI[dd, l] * U2[a, b, cc, l]
                            acc_rm += U1[a, b, cc, dd] * acc
            out_rm2[n] = acc_rm
        else:
            out_rm2[n] = 0.0

        # -- |Ric|^2 ------------------------------------------------------
        for a in range(4):
            for j in range(4):
                acc = 0.0
                for i in range(4):
                    acc += GI[a, i] * RIC[i, j]
                RS[a, j] = acc
        acc_ric = 0.0
        for a in range(4):
            for b in range(4):
                acc = 0.0
                for j in range(4):
                    acc += GI[b, j] * RS[a, j]
                acc_ric += RIC[a, b] * acc
        out_ric2[n] = acc_ric

        # -- covariant derivative of J -----------------------------------
        for k in range(4):
            for i in range(4):
                for j in range(4):
                    acc = DJ[k, i, j]
                    for p in range(4):
                        acc += GAM[i, k, p] * J[p, j]
                        acc -= GAM[p, k, j] * J[i, p]
                    NJ[k, i, j] = acc

        # -- connection Laplacian of J (nonnegative convention) ----------
        for al in range(4):
            for be in range(4):
                for ga in range(4):
                    acc = 0.0
                    for k in range(4):
                        acc += GI[be, k] * GAM[al, k, ga]
                    Q[al, be, ga] = acc
        for i in range(4):
            for mm in range(4):
                acc1 = 0.0
                acc2 = 0.0
                for y in range(4):
                    for k in range(4):
                        acc1 += GI[y, k] * DGAM[y, i, k, mm]
                        acc2 += GI[y, k] * DGAM[y, mm, k, i]
                W1M[i, mm] = acc1
                W2M[mm, i] = acc2
        for p in range(4):
            acc = 0.0
            for y in range(4):
                for k in range(4):
                    acc += GI[y, k] * GAM[p, y, k]
            UV[p] = acc
        for i in range(4):
            for j in range(4):
                acc = 0.0
                cc0 = 16 + 4 * i + j
                for y in range(4):
                    for k in range(4):
                        acc += GI[y, k] * d2[n, y, k, cc0]
                for mm in range(4):
                    acc += W1M[i, mm] * J[mm, j]
                    acc -= W2M[mm, j] * J[i, mm]
                for y in range(4):
                    for mm in range(4):
                        acc += Q[i, y, mm] * DJ[y, mm, j]
                        acc -= Q[mm, y, j] * DJ[y, i, mm]
                for p in range(4):
                    acc -= UV[p] * NJ[p, i, j]
                for k in range(4):
                    for mm in range(4):
                        acc += Q[i, k, mm] * NJ[k, mm, j]
                        acc -= Q[mm, k, j] * NJ[k, i, mm]
                LAP[i, j] = -acc

        # -- quadratic DJ operators ---------------------------------------
        for x in range(4):
            for nn in range(4):
                for k in range(4):
                    acc1 = 0.0
                    acc2 = 0.0
                    for mm in range(4):
                        acc1 += NJ[x, mm, k] * G[mm, nn]
                        acc2 += GI[k, mm] * NJ[x, nn, mm]
                    NJL[x, nn, k] = acc1
                    NJUP[x, nn, k] = acc2
        for x in range(4):
            for y in range(4):
                acc = 0.0
                for nn in range(4):
                    for k in range(4):
                        acc += NJL[x, nn, k] * NJUP[y, nn, k]
                B1[x, y] = acc
        for i in range(4):
            for nn in range(4):
                for y in range(4):
                    acc = 0.0
                    for j in range(4):
                        acc += GI[i, j] * NJ[j, nn, y]
                    TM[i, nn, y] = acc
        for i in range(4):
            for mm in range(4):
                for y in range(4):
                    acc = 0.0
                    for nn in range(4):
                        acc += G[mm, nn] * TM[i, nn, y]
                    NJMIX[i, mm, y] = acc
        for i in range(4):
            for mm in range(4):
                for x in range(4):
                    acc = 0.0
                    for p in range(4):
                        acc += NJ[i, mm, p] * J[p, x]
                    NJJ[i, mm, x] = acc
        for x in range(4):
            for y in range(4):
                acc1 = 0.0
                acc2 = 0.0
                for i in range(4):
                    for mm in range(4):
                        acc1 += NJJ[i, mm, x] * NJMIX[i, mm, y]
                        acc2 += NJ[i, mm, x] * NJMIX[i, mm, y]
                N2[x, y] = acc1
                B2[x, y] = acc2
        for a in range(4):
            for b in range(4):
                acc = 0.0
                for k in range(4):
                    acc += GI[a, k] * N2[b, k]
                NSQ[a, b] = acc
        acc_dj = 0.0
        for x in range(4):
            for y in range(4):
                acc_dj += GI[x, y] * B1[x, y]
        out_dj2[n] = acc_dj

        # -- Ricci commutator with J (RS = g^{-1} Ric from the norm pass) --
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for k in range(4):
                    acc += RS[i, k] * J[k, j] - J[i, k] * RS[k, j]
                out_dj[n, i, j] = -LAP[i, j] + NSQ[i, j] + acc
                out_dg[n, i, j] = -2.0 * RIC[i, j] + 0.5 * B1[i, j] - B2[i, j]


def _slab_eval(stacked, spec, i0, i1, want_rm):
    """Jets + pointwise kernel on one slab; returns batch outputs."""
    m = spec.points_per_axis
    halo = spec.halo
    rows = i1 - i0
    ext = _extended_slab(stacked, spec, 1, i0, i1)
    L = ext.shape[1] * m ** 3
    fin = np.ascontiguousarray(ext.reshape(32, L).T)
    n_pts = rows * m ** 3
    out_v = np.empty((n_pts, 32))
    out_d = np.empty((n_pts, 4, 32))
    out_dd = np.empty((n_pts, 4, 4, 32))
    inv12h = 1.0 / (12.0 * spec.h)
    inv12h2 = 1.0 / (12.0 * spec.h * spec.h)
    _jet_kernel_4(fin, halo, rows, m, inv12h, inv12h2, out_v, out_d, out_dd)
    dg = np.empty((n_pts, 4, 4))
    dj = np.empty((n_pts, 4, 4))
    rm2 = np.empty(n_pts)
    ric2 = np.empty(n_pts)
    dj2 = np.empty(n_pts)
    detg = np.empty(n_pts)
    _scf_kernel_4(out_v, out_d, out_dd, want_rm, dg, dj, rm2, ric2, dj2, detg)
    sqd = np.sqrt(detg)
    sup_rm = float(np.sqrt(max(0.0, float(np.max(rm2))))) if want_rm else 0.0
    return (
        dg,
        dj,
        sup_rm,
        float(np.max(dj2)),
        float(np.sum(dj2)),
        float(np.sum(dj2 * sqd)),
        float(np.sum(ric2 * sqd)),
    )


def fused_scf_tendency(state, want_rm=True, slab_points=40_000):
    """Tendency of the symplectic flow through the compiled kernels.

    Interchangeable with ``flow.tendency(..., mode="scf")``; supports
    dim 4 with the 4th-order stencil only.
    """
    from . import flow as _flow

    spec = state.spec
    if spec.dim != 4 or spec.stencil_order != 4:
        raise ConfigError(
            "fused engine supports dim=4 grids with stencil order 4; "
            "use engine='numpy' otherwise"
        )
    stacked = np.concatenate(
        [
            state.g.reshape((16,) + spec.shape),
            state.j.reshape((16,) + spec.shape),
        ],
        axis=0,
    )
    ranges = slab_ranges(spec, max_points=slab_points)

    def eval_slab(rng_pair):
        i0, i1 = rng_pair
        return _slab_eval(stacked, spec, i0, i1, want_rm)

    nworkers = _flow.worker_count()
    if nworkers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            results = list(pool.map(eval_slab, ranges))
    else:
        results = [eval_slab(r) for r in ranges]

    dg_out = np.empty_like(state.g)
    dj_out = np.empty_like(state.j)
    sup_rm = 0.0
    sup_dj2 = 0.0
    l2_parts = []
    en_parts = []
    ric_parts = []
    for (i0, i1), (dg, dj, s_rm, s_dj2, l2p, enp, ricp) in zip(ranges, results):
        dg_out[:, :, i0:i1] = from_point_batch(dg, spec, i1 - i0)
        dj_out[:, :, i0:i1] = from_point_batch(dj, spec, i1 - i0)
        sup_rm = max(sup_rm, s_rm)
        sup_dj2 = max(sup_dj2, s_dj2)
        l2_parts.append(l2p)
        en_parts.append(enp)
        ric_parts.append(ricp)
    vol = spec.h ** spec.dim
    return _flow.Tendency(
        dg=dg_out,
        dj=dj_out,
        sup_rm=sup_rm,
        sup_dj2=sup_dj2,
        l2_dj2=vol * _tree_sum(l2_parts),
        energy=vol * _tree_sum(en_parts),
        l2_ric=float(np.sqrt(max(0.0, vol * _tree_sum(ric_parts)))),
    )


def warmup():
    """Trigger kernel compilation on a tiny grid (cacheable, one-off)."""
    from .grid import GridSpec
    from . import flow as _flow

    spec = GridSpec(dim=4, points_per_axis=8)
    st = _flow.flat_state(spec)
    fused_scf_tendency(st, want_rm=True, slab_points=5_000)
