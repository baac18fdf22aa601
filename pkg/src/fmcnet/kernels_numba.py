"""Numba kernels for the hot inner loops.

Mirrors kernels_numpy.py function by function. fastmath stays off so the
compiler cannot reassociate or fuse the accumulations: per output element
both backends execute the same IEEE operation sequence and agree
bit-for-bit with the nested-loop reference (see tests).

The *_par variants parallelize over independent output slices only
(whole output channels / input channels), which leaves each element's
reduction order untouched.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(cache=True)
def _conv_fwd_one_co(xpad, w, stride, dilation, cig, ci0, co, out):
    # taps outer, voxels inner: per output element the accumulation order is
    # (ci, dz, dy, dx), and the x loop vectorizes without reassociation
    k = w.shape[2]
    do, ho, wo = out.shape[1], out.shape[2], out.shape[3]
    for ci in range(cig):
        xc = xpad[ci0 + ci]
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    wv = w[co, ci, dz, dy, dx]
                    x0 = dx * dilation
                    for z in range(do):
                        zi = z * stride + dz * dilation
                        for y in range(ho):
                            orow = out[co, z, y]
                            xrow = xc[zi, y * stride + dy * dilation]
                            for x in range(wo):
                                orow[x] += wv * xrow[x * stride + x0]


@njit(cache=True)
def conv3d_fwd(xpad, w, stride, dilation, groups, out):
    co_n, cig = w.shape[0], w.shape[1]
    cog = co_n // groups
    out[:] = 0.0
    for co in range(co_n):
        ci0 = (co // cog) * cig
        _conv_fwd_one_co(xpad, w, stride, dilation, cig, ci0, co, out)


@njit(cache=True, parallel=True)
def conv3d_fwd_par(xpad, w, stride, dilation, groups, out):
    co_n, cig = w.shape[0], w.shape[1]
    cog = co_n // groups
    out[:] = 0.0
    for co in prange(co_n):
        ci0 = (co // cog) * cig
        _conv_fwd_one_co(xpad, w, stride, dilation, cig, ci0, co, out)


@njit(cache=True)
def _conv_bwd_x_one_ci(w, gy, stride, dilation, cig, cog, ci_full, gxpad):
    k = w.shape[2]
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    g = ci_full // cig
    ci = ci_full % cig
    gc = gxpad[ci_full]
    for co in range(g * cog, (g + 1) * cog):
        for dz in range(k):
            z0 = dz * dilation
            for dy in range(k):
                y0 = dy * dilation
                for dx in range(k):
                    x0 = dx * dilation
                    wv = w[co, ci, dz, dy, dx]
                    for z in range(do):
                        for y in range(ho):
                            grow = gc[z0 + z * stride, y0 + y * stride]
                            gyrow = gy[co, z, y]
                            for x in range(wo):
                                grow[x0 + x * stride] += wv * gyrow[x]


@njit(cache=True)
def conv3d_bwd_x(w, gy, stride, dilation, groups, gxpad):
    co_n, cig = w.shape[0], w.shape[1]
    cog = co_n // groups
    for ci_full in range(gxpad.shape[0]):
        _conv_bwd_x_one_ci(w, gy, stride, dilation, cig, cog, ci_full, gxpad)


@njit(cache=True, parallel=True)
def conv3d_bwd_x_par(w, gy, stride, dilation, groups, gxpad):
    co_n, cig = w.shape[0], w.shape[1]
    cog = co_n // groups
    for ci_full in prange(gxpad.shape[0]):
        _conv_bwd_x_one_ci(w, gy, stride, dilation, cig, cog, ci_full, gxpad)


@njit(cache=True)
def _conv_bwd_w_one_co(xpad, gy, stride, dilation, cig, co, ci0, gw):
    k = gw.shape[2]
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    for ci in range(cig):
        xc = xpad[ci0 + ci]
        for dz in range(k):
            z0 = dz * dilation
            for dy in range(k):
                y0 = dy * dilation
                for dx in range(k):
                    x0 = dx * dilation
                    acc = 0.0
                    for z in range(do):
                        for y in range(ho):
                            xrow = xc[z0 + z * stride, y0 + y * stride]
                            gyrow = gy[co, z, y]
                            for x in range(wo):
                                acc += xrow[x0 + x * stride] * gyrow[x]
                    gw[co, ci, dz, dy, dx] = acc


@njit(cache=True)
def conv3d_bwd_w(xpad, gy, stride, dilation, groups, gw):
    co_n, cig = gw.shape[0], gw.shape[1]
    cog = co_n // groups
    for co in range(co_n):
        ci0 = (co // cog) * cig
        _conv_bwd_w_one_co(xpad, gy, stride, dilation, cig, co, ci0, gw)


@njit(cache=True, parallel=True)
def conv3d_bwd_w_par(xpad, gy, stride, dilation, groups, gw):
    co_n, cig = gw.shape[0], gw.shape[1]
    cog = co_n // groups
    for co in prange(co_n):
        ci0 = (co // cog) * cig
        _conv_bwd_w_one_co(xpad, gy, stride, dilation, cig, co, ci0, gw)


@njit(cache=True)
def scan_fwd(u, delta, bmat, cmat, decay, skip, y, h):
    L, C = u.shape
    N = decay.shape[1]
    for t in range(L):
        for c in range(C):
            dt = delta[t, c]
            dtu = dt * u[t, c]
            for n in range(N):
                abar = np.exp(-dt * decay[c, n])
                hprev = h[t - 1, c, n] if t > 0 else 0.0
                h[t, c, n] = abar * hprev + dtu * bmat[t, n]
    for t in range(L):
        for c in range(C):
            acc = 0.0
            for n in range(N):
                acc += cmat[t, n] * h[t, c, n]
            y[t, c] = acc + skip[c] * u[t, c]


@njit(cache=True)
def scan_bwd(u, delta, bmat, cmat, decay, skip, h, gy, gu, gdelta, gb, gc, gdecay, gskip):
    L, C = u.shape
    N = decay.shape[1]
    lam = np.zeros((C, N))
    for t in range(L - 1, -1, -1):
        for c in range(C):
            gyc = gy[t, c]
            gu[t, c] += skip[c] * gyc
            gskip[c] += u[t, c] * gyc
        for n in range(N):
            acc = 0.0
            for c in range(C):
                acc += gy[t, c] * h[t, c, n]
            gc[t, n] += acc
        for c in range(C):
            dt = delta[t, c]
            gd_acc = 0.0
            gu_acc = 0.0
            for n in range(N):
                lam_cn = lam[c, n] + gy[t, c] * cmat[t, n]
                abar = np.exp(-dt * decay[c, n])
                hprev = h[t - 1, c, n] if t > 0 else 0.0
                g_abar = lam_cn * hprev
                gd_acc += g_abar * (-decay[c, n]) * abar + lam_cn * bmat[t, n] * u[t, c]
                gdecay[c, n] += g_abar * (-dt) * abar
                gb[t, n] += lam_cn * (dt * u[t, c])
                gu_acc += lam_cn * bmat[t, n]
                lam[c, n] = lam_cn * abar
            gdelta[t, c] += gd_acc
            gu[t, c] += gu_acc * dt


@njit(cache=True)
def scan_blocked(u, delta, bmat, cmat, decay, skip, block, y):
    L, C = u.shape
    N = decay.shape[1]
    nblocks = (L + block - 1) // block
    amaps = np.empty((nblocks, C, N))
    bmaps = np.empty((nblocks, C, N))
    for kb in range(nblocks):
        t0 = kb * block
        t1 = min(L, t0 + block)
        for c in range(C):
            for n in range(N):
                aprod = 1.0
                hloc = 0.0
                dcn = decay[c, n]
                for t in range(t0, t1):
                    abar = np.exp(-delta[t, c] * dcn)
                    hloc = abar * hloc + (delta[t, c] * u[t, c]) * bmat[t, n]
                    aprod = aprod * abar
                amaps[kb, c, n] = aprod
                bmaps[kb, c, n] = hloc
    starts = np.empty((nblocks, C, N))
    hcur = np.zeros((C, N))
    for kb in range(nblocks):
        for c in range(C):
            for n in range(N):
                starts[kb, c, n] = hcur[c, n]
                hcur[c, n] = amaps[kb, c, n] * hcur[c, n] + bmaps[kb, c, n]
    y[:] = 0.0
    for kb in range(nblocks):
        t0 = kb * block
        t1 = min(L, t0 + block)
        for c in range(C):
            for n in range(N):
                hloc = starts[kb, c, n]
                dcn = decay[c, n]
                for t in range(t0, t1):
                    abar = np.exp(-delta[t, c] * dcn)
                    hloc = abar * hloc + (delta[t, c] * u[t, c]) * bmat[t, n]
                    y[t, c] += cmat[t, n] * hloc
    for t in range(L):
        for c in range(C):
            y[t, c] += skip[c] * u[t, c]


@njit(cache=True)
def directed_nn_dists(src, dst, out):
    n = src.shape[0]
    m = dst.shape[0]
    for i in range(n):
        best = np.inf
        for j in range(m):
            dz = src[i, 0] - dst[j, 0]
            dy = src[i, 1] - dst[j, 1]
            dx = src[i, 2] - dst[j, 2]
            d2 = dz * dz + dy * dy + dx * dx
            if d2 < best:
                best = d2
        out[i] = np.sqrt(best)
