"""Pure-numpy fallback kernels.

Each function mirrors the numba variant in kernels_numba.py and fills a
preallocated output array. The tap/channel loop nesting is chosen so that
every output element accumulates its terms in the same order as the numba
kernels and the nested-loop reference used in tests: elementwise IEEE ops
in identical order give bit-identical results.
"""

from __future__ import annotations

import numpy as np


def conv3d_fwd(xpad, w, stride, dilation, groups, out):
    # out[co] = sum over (ci, dz, dy, dx) of w * shifted input, group-local.
    co_n, cig = w.shape[0], w.shape[1]
    k = w.shape[2]
    cog = co_n // groups
    do, ho, wo = out.shape[1], out.shape[2], out.shape[3]
    out[:] = 0.0
    for g in range(groups):
        osl = slice(g * cog, (g + 1) * cog)
        for ci in range(cig):
            xc = xpad[g * cig + ci]
            for dz in range(k):
                z0 = dz * dilation
                for dy in range(k):
                    y0 = dy * dilation
                    for dx in range(k):
                        x0 = dx * dilation
                        patch = xc[
                            z0 : z0 + stride * (do - 1) + 1 : stride,
                            y0 : y0 + stride * (ho - 1) + 1 : stride,
                            x0 : x0 + stride * (wo - 1) + 1 : stride,
                        ]
                        out[osl] += w[osl, ci, dz, dy, dx][:, None, None, None] * patch


def conv3d_bwd_x(w, gy, stride, dilation, groups, gxpad):
    # gradients carry no bitwise contract, so the output-channel reduction
    # is a single contraction per tap instead of one slice-add per channel
    co_n, cig = w.shape[0], w.shape[1]
    k = w.shape[2]
    cog = co_n // groups
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    for g in range(groups):
        gg = gy[g * cog : (g + 1) * cog]
        for ci in range(cig):
            wslab = w[g * cog : (g + 1) * cog, ci]
            for dz in range(k):
                z0 = dz * dilation
                for dy in range(k):
                    y0 = dy * dilation
                    for dx in range(k):
                        x0 = dx * dilation
                        gxpad[
                            g * cig + ci,
                            z0 : z0 + stride * (do - 1) + 1 : stride,
                            y0 : y0 + stride * (ho - 1) + 1 : stride,
                            x0 : x0 + stride * (wo - 1) + 1 : stride,
                        ] += np.tensordot(wslab[:, dz, dy, dx], gg, axes=([0], [0]))


def conv3d_bwd_w(xpad, gy, stride, dilation, groups, gw):
    co_n, cig = gw.shape[0], gw.shape[1]
    k = gw.shape[2]
    cog = co_n // groups
    do, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    for g in range(groups):
        gg = gy[g * cog : (g + 1) * cog]
        for ci in range(cig):
            xc = xpad[g * cig + ci]
            for dz in range(k):
                z0 = dz * dilation
                for dy in range(k):
                    y0 = dy * dilation
                    for dx in range(k):
                        x0 = dx * dilation
                        patch = xc[
                            z0 : z0 + stride * (do - 1) + 1 : stride,
                            y0 : y0 + stride * (ho - 1) + 1 : stride,
                            x0 : x0 + stride * (wo - 1) + 1 : stride,
                        ]
                        gw[g * cog : (g + 1) * cog, ci, dz, dy, dx] = np.tensordot(
                            gg, patch, axes=([1, 2, 3], [0, 1, 2])
                        )


def scan_fwd(u, delta, bmat, cmat, decay, skip, y, h):
    # h[t] = exp(-delta[t,c]*decay[c,n]) * h[t-1] + (delta[t,c]*u[t,c]) * bmat[t,n]
    # y[t,c] = sum_n cmat[t,n] * h[t,c,n] + skip[c] * u[t,c]
    L = u.shape[0]
    hcur = np.zeros((decay.shape[0], decay.shape[1]))
    for t in range(L):
        abar = np.exp(-delta[t][:, None] * decay)
        hcur = abar * hcur + (delta[t] * u[t])[:, None] * bmat[t][None, :]
        h[t] = hcur
        y[t] = h[t] @ cmat[t] + skip * u[t]


def scan_bwd(u, delta, bmat, cmat, decay, skip, h, gy, gu, gdelta, gb, gc, gdecay, gskip):
    # Adjoint of scan_fwd; lam carries dL/dh[t] and is damped backwards.
    L, C = u.shape
    N = decay.shape[1]
    lam = np.zeros((C, N))
    for t in range(L - 1, -1, -1):
        gu[t] += skip * gy[t]
        gskip += u[t] * gy[t]
        gc[t] += gy[t] @ h[t]
        lam = lam + gy[t][:, None] * cmat[t][None, :]
        abar = np.exp(-delta[t][:, None] * decay)
        hprev = h[t - 1] if t > 0 else np.zeros((C, N))
        g_abar = lam * hprev
        gdelta[t] += (g_abar * (-decay) * abar).sum(axis=1) + (lam * bmat[t][None, :]).sum(axis=1) * u[t]
        gdecay += g_abar * (-delta[t][:, None]) * abar
        gb[t] += (lam * (delta[t] * u[t])[:, None]).sum(axis=0)
        gu[t] += (lam * bmat[t][None, :]).sum(axis=1) * delta[t]
        lam = lam * abar


def scan_blocked(u, delta, bmat, cmat, decay, skip, block, y):
    # Affine maps h -> a*h + b compose associatively: reduce each block to
    # one (a, b) pair, prefix-compose the per-block maps, then replay each
    # block from its composed start state.
    L = u.shape[0]
    C, N = decay.shape
    nblocks = (L + block - 1) // block
    amaps = np.empty((nblocks, C, N))
    bmaps = np.empty((nblocks, C, N))
    for kb in range(nblocks):
        t0 = kb * block
        t1 = min(L, t0 + block)
        aprod = np.ones((C, N))
        hloc = np.zeros((C, N))
        for t in range(t0, t1):
            abar = np.exp(-delta[t][:, None] * decay)
            hloc = abar * hloc + (delta[t] * u[t])[:, None] * bmat[t][None, :]
            aprod = aprod * abar
        amaps[kb] = aprod
        bmaps[kb] = hloc
    starts = np.empty((nblocks, C, N))
    hcur = np.zeros((C, N))
    for kb in range(nblocks):
        starts[kb] = hcur
        hcur = amaps[kb] * hcur + bmaps[kb]
    for kb in range(nblocks):
        t0 = kb * block
        t1 = min(L, t0 + block)
        hloc = starts[kb].copy()
        for t in range(t0, t1):
            abar = np.exp(-delta[t][:, None] * decay)
            hloc = abar * hloc + (delta[t] * u[t])[:, None] * bmat[t][None, :]
            y[t] = hloc @ cmat[t] + skip * u[t]


def directed_nn_dists(src, dst, out):
    # For each source point the distance to its nearest destination point.
    # Points arrive pre-scaled by voxel spacing; chunked to bound memory.
    chunk = 512
    n = src.shape[0]
    for i0 in range(0, n, chunk):
        i1 = min(n, i0 + chunk)
        diff = src[i0:i1, None, :] - dst[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        out[i0:i1] = np.sqrt(d2.min(axis=1))
