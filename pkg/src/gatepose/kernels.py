"""Compiled inner loops for matmul, convolution and transposed convolution.

Everything here runs in float64 on C-contiguous arrays. Forward kernels keep
a fixed per-output-element accumulation order (ascending k for matmul, which
for im2col convolution means input channel, then kernel row, then kernel
column) so results are bit-for-bit reproducible against plain Python loops.
That rules out BLAS on the forward path: blocked/FMA summation rounds
differently. Backward kernels only feed finite-tolerance gradient checks, so
they are compiled with fastmath to let LLVM vectorize the reductions.

The inner loops are written so the innermost index walks aligned contiguous
rows of both operands; a runtime offset between the two walks defeats the
vectorizer, which is why convolution goes through im2col buffers instead of
sliding-window indexing on the hot path. The sliding-window kernels are kept
for the direct convolution route.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def bmm(a, b, out):
    """out[t] += a[t] @ b[t], strict ascending-k accumulation."""
    T, M, K = a.shape
    N = b.shape[2]
    for t in range(T):
        for i in range(M):
            for k in range(K):
                av = a[t, i, k]
                brow = b[t, k]
                orow = out[t, i]
                for j in range(N):
                    orow[j] += av * brow[j]


@numba.njit(cache=True, fastmath=True)
def bmm_fast(a, b, out):
    """Same contraction as bmm but reassociation is allowed."""
    T, M, K = a.shape
    N = b.shape[2]
    for t in range(T):
        for i in range(M):
            for k in range(K):
                av = a[t, i, k]
                brow = b[t, k]
                orow = out[t, i]
                for j in range(N):
                    orow[j] += av * brow[j]


@numba.njit(cache=True)
def gmm(a, b, out):
    """Grouped matmul with shared left operand.

    a: (G, M, K), b: (B, G, K, N), out: (B, G, M, N).
    out[bb, g] += a[g] @ b[bb, g], strict ascending-k accumulation.
    """
    B, G, K, N = b.shape
    M = a.shape[1]
    for bb in range(B):
        for g in range(G):
            for i in range(M):
                for k in range(K):
                    av = a[g, i, k]
                    brow = b[bb, g, k]
                    orow = out[bb, g, i]
                    for j in range(N):
                        orow[j] += av * brow[j]


@numba.njit(cache=True, fastmath=True)
def gmm_fast(a, b, out):
    """gmm with reassociation allowed, for gradient work."""
    B, G, K, N = b.shape
    M = a.shape[1]
    for bb in range(B):
        for g in range(G):
            for i in range(M):
                for k in range(K):
                    av = a[g, i, k]
                    brow = b[bb, g, k]
                    orow = out[bb, g, i]
                    for j in range(N):
                        orow[j] += av * brow[j]


@numba.njit(cache=True, fastmath=True)
def gmm_abt_fast(a, b, out):
    """out[g, i, k] += sum_{bb, j} a[bb, g, i, j] * b[bb, g, k, j].

    Contracts the trailing (aligned) axis of both operands; used for weight
    gradients where a is the output gradient and b holds im2col patches.
    """
    B, G, M, N = a.shape
    K = b.shape[2]
    for bb in range(B):
        for g in range(G):
            for i in range(M):
                arow = a[bb, g, i]
                for k in range(K):
                    brow = b[bb, g, k]
                    acc = 0.0
                    for j in range(N):
                        acc += arow[j] * brow[j]
                    out[g, i, k] += acc


@numba.njit(cache=True)
def conv2d_direct(x, w, out, stride, pad, groups):
    """Sliding-window convolution, strict (channel, ky, kx) accumulation."""
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    Ho = out.shape[2]
    Wo = out.shape[3]
    cog = Co // groups
    for b in range(B):
        for co in range(Co):
            g = co // cog
            for cg in range(Cg):
                c = g * Cg + cg
                for ky in range(kh):
                    oy0 = max(0, -((ky - pad) // stride))
                    oy1 = min(Ho - 1, (H - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ox0 = max(0, -((kx - pad) // stride))
                        ox1 = min(Wo - 1, (W - 1 - kx + pad) // stride)
                        wv = w[co, cg, ky, kx]
                        for oy in range(oy0, oy1 + 1):
                            iy = oy * stride + ky - pad
                            xrow = x[b, c, iy]
                            orow = out[b, co, oy]
                            ib = ox0 * stride + kx - pad
                            for ox in range(ox0, ox1 + 1):
                                orow[ox] += xrow[ib + (ox - ox0) * stride] * wv


@numba.njit(cache=True, fastmath=True)
def conv2d_direct_bwd_x(gout, w, gx, stride, pad, groups):
    B, C, H, W = gx.shape
    Co, Cg, kh, kw = w.shape
    Ho = gout.shape[2]
    Wo = gout.shape[3]
    cog = Co // groups
    for b in range(B):
        for co in range(Co):
            g = co // cog
            for cg in range(Cg):
                c = g * Cg + cg
                for ky in range(kh):
                    oy0 = max(0, -((ky - pad) // stride))
                    oy1 = min(Ho - 1, (H - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ox0 = max(0, -((kx - pad) // stride))
                        ox1 = min(Wo - 1, (W - 1 - kx + pad) // stride)
                        wv = w[co, cg, ky, kx]
                        for oy in range(oy0, oy1 + 1):
                            iy = oy * stride + ky - pad
                            grow = gout[b, co, oy]
                            xgrow = gx[b, c, iy]
                            ib = ox0 * stride + kx - pad
                            for ox in range(ox0, ox1 + 1):
                                xgrow[ib + (ox - ox0) * stride] += grow[ox] * wv


@numba.njit(cache=True, fastmath=True)
def conv2d_direct_bwd_w(x, gout, gw, stride, pad, groups):
    B, C, H, W = x.shape
    Co, Cg, kh, kw = gw.shape
    Ho = gout.shape[2]
    Wo = gout.shape[3]
    cog = Co // groups
    for b in range(B):
        for co in range(Co):
            g = co // cog
            for cg in range(Cg):
                c = g * Cg + cg
                for ky in range(kh):
                    oy0 = max(0, -((ky - pad) // stride))
                    oy1 = min(Ho - 1, (H - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ox0 = max(0, -((kx - pad) // stride))
                        ox1 = min(Wo - 1, (W - 1 - kx + pad) // stride)
                        acc = 0.0
                        ib = ox0 * stride + kx - pad
                        for oy in range(oy0, oy1 + 1):
                            iy = oy * stride + ky - pad
                            xrow = x[b, c, iy]
                            grow = gout[b, co, oy]
                            for ox in range(ox0, ox1 + 1):
                                acc += xrow[ib + (ox - ox0) * stride] * grow[ox]
                        gw[co, cg, ky, kx] += acc


@numba.njit(cache=True)
def deconv2d_fwd(x, w, out, stride, pad):
    """Transposed convolution, strict (ci, ky, kx) accumulation."""
    B, Ci, H, W = x.shape
    _, Co, kh, kw = w.shape
    Ho = out.shape[2]
    Wo = out.shape[3]
    for b in range(B):
        for co in range(Co):
            for ci in range(Ci):
                for ky in range(kh):
                    iy0 = max(0, -((ky - pad) // stride))
                    iy1 = min(H - 1, (Ho - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ix0 = max(0, -((kx - pad) // stride))
                        ix1 = min(W - 1, (Wo - 1 - kx + pad) // stride)
                        wv = w[ci, co, ky, kx]
                        ob = ix0 * stride + kx - pad
                        for iy in range(iy0, iy1 + 1):
                            oy = iy * stride + ky - pad
                            xrow = x[b, ci, iy]
                            orow = out[b, co, oy]
                            for ix in range(ix0, ix1 + 1):
                                orow[ob + (ix - ix0) * stride] += xrow[ix] * wv


@numba.njit(cache=True, fastmath=True)
def deconv2d_bwd_x(gout, w, gx, stride, pad):
    B, Ci, H, W = gx.shape
    _, Co, kh, kw = w.shape
    Ho = gout.shape[2]
    Wo = gout.shape[3]
    for b in range(B):
        for ci in range(Ci):
            for co in range(Co):
                for ky in range(kh):
                    iy0 = max(0, -((ky - pad) // stride))
                    iy1 = min(H - 1, (Ho - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ix0 = max(0, -((kx - pad) // stride))
                        ix1 = min(W - 1, (Wo - 1 - kx + pad) // stride)
                        wv = w[ci, co, ky, kx]
                        ob = ix0 * stride + kx - pad
                        for iy in range(iy0, iy1 + 1):
                            oy = iy * stride + ky - pad
                            grow = gout[b, co, oy]
                            xgrow = gx[b, ci, iy]
                            for ix in range(ix0, ix1 + 1):
                                xgrow[ix] += grow[ob + (ix - ix0) * stride] * wv


@numba.njit(cache=True, fastmath=True)
def deconv2d_bwd_w(x, gout, gw, stride, pad):
    B, Ci, H, W = x.shape
    _, Co, kh, kw = gw.shape
    Ho = gout.shape[2]
    Wo = gout.shape[3]
    for b in range(B):
        for ci in range(Ci):
            for co in range(Co):
                for ky in range(kh):
                    iy0 = max(0, -((ky - pad) // stride))
                    iy1 = min(H - 1, (Ho - 1 - ky + pad) // stride)
                    for kx in range(kw):
                        ix0 = max(0, -((kx - pad) // stride))
                        ix1 = min(W - 1, (Wo - 1 - kx + pad) // stride)
                        acc = 0.0
                        ob = ix0 * stride + kx - pad
                        for iy in range(iy0, iy1 + 1):
                            oy = iy * stride + ky - pad
                            xrow = x[b, ci, iy]
                            grow = gout[b, co, oy]
                            for ix in range(ix0, ix1 + 1):
                                acc += xrow[ix] * grow[ob + (ix - ix0) * stride]
                        gw[ci, co, ky, kx] += acc


def warmup():
    """Trigger compilation of every kernel on toy inputs."""
    a = np.ones((1, 2, 3))
    b = np.ones((1, 3, 2))
    bmm(a, b, np.zeros((1, 2, 2)))
    bmm_fast(a, b, np.zeros((1, 2, 2)))
    ag = np.ones((2, 2, 3))
    bg = np.ones((1, 2, 3, 4))
    gmm(ag, bg, np.zeros((1, 2, 2, 4)))
    gmm_fast(ag, bg, np.zeros((1, 2, 2, 4)))
    gmm_abt_fast(np.ones((1, 2, 2, 4)), bg, np.zeros((2, 2, 3)))
    x = np.ones((1, 2, 5, 5))
    w = np.ones((2, 2, 3, 3))
    o = np.zeros((1, 2, 3, 3))
    conv2d_direct(x, w, o, 2, 1, 1)
    conv2d_direct_bwd_x(o, w, np.zeros_like(x), 2, 1, 1)
    conv2d_direct_bwd_w(x, o, np.zeros_like(w), 2, 1, 1)
    wt = np.ones((2, 2, 4, 4))
    ot = np.zeros((1, 2, 10, 10))
    deconv2d_fwd(x, wt, ot, 2, 1)
    deconv2d_bwd_x(ot, wt, np.zeros_like(x), 2, 1)
    deconv2d_bwd_w(x, ot, np.zeros_like(wt), 2, 1)
