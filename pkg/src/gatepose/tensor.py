"""Reverse-mode autodiff on float64 numpy arrays.

A Tensor wraps an ndarray plus an optional gradient. Operations record
closures onto a global tape (Graph); backward() replays the tape in reverse
append order, which is a valid topological order because every operation is
recorded after its inputs were produced. Gradients accumulate on leaves and
a graph can be walked exactly once.

Convolutions default to an im2col layout feeding the grouped matmul kernel;
the sliding-window route is kept behind impl="direct". Both accumulate in
the same per-output-element order, so they agree bit for bit.

Set GAPOSE_DEBUG_CHECKS=1 (or call set_debug_checks) to verify after every
op that outputs are finite.
"""

import contextlib
import os

import numpy as np
from scipy import special

from . import kernels
from .errors import ShapeError, StateError

DTYPE = np.float64
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_debug_checks = os.environ.get("GAPOSE_DEBUG_CHECKS", "") == "1"


def set_debug_checks(enabled):
    global _debug_checks
    _debug_checks = bool(enabled)


def _validate(arr, opname):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{opname} produced non-finite values")


# ---------------------------------------------------------------------------
# multiply-accumulate counting

class MacCounter:
    """Tally of multiply-accumulate operations issued by matmul/conv ops."""

    def __init__(self):
        self.total = 0


_mac_counters = []


@contextlib.contextmanager
def count_macs():
    c = MacCounter()
    _mac_counters.append(c)
    try:
        yield c
    finally:
        _mac_counters.remove(c)


def _add_macs(n):
    for c in _mac_counters:
        c.total += n


# ---------------------------------------------------------------------------
# tape

class Graph:
    __slots__ = ("nodes", "leaves", "finalized")

    def __init__(self):
        self.nodes = []
        self.leaves = {}
        self.finalized = False


_active_graph = None
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._graph = None
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _record(out, inputs, bwd, opname):
    """Attach out to the active tape if any input participates in autodiff."""
    _validate(out.data, opname)
    if not _grad_enabled:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    global _active_graph
    if _active_graph is None or _active_graph.finalized:
        _active_graph = Graph()
    g = _active_graph
    out.requires_grad = True
    out._graph = g
    out._op_output = True
    g.nodes.append((out, inputs, bwd))
    for t in inputs:
        if t.requires_grad and not t._op_output:
            g.leaves[id(t)] = t
    return out


def backward(loss):
    """Reverse sweep from a scalar loss.

    Every requires_grad leaf the tape consumed receives a gradient; leaves
    that do not influence the loss get zeros. The tape is single-use.
    """
    if loss.data.ndim != 0:
        raise ShapeError(
            f"backward needs a scalar, got shape {loss.data.shape}")
    g = loss._graph
    if g is None:
        if loss.requires_grad:
            seed = np.ones_like(loss.data)
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if g.finalized:
        raise StateError("backward was already called on this graph")
    g.finalized = True
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for out, inputs, bwd in reversed(g.nodes):
        gout = out.grad
        if gout is None:
            continue
        grads = bwd(gout)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt
        if out._op_output:
            out.grad = None
    for leaf in g.leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    g.nodes.clear()
    g.leaves.clear()


def _unbroadcast(grad, shape):
    """Sum grad down to shape, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    if isinstance(b, Tensor):
        out = Tensor(a.data + b.data)
        sa, sb = a.shape, b.shape
        return _record(
            out, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")
    out = Tensor(a.data + b)
    return _record(out, (a,), lambda g: (g,), "add")


def sub(a, b):
    if isinstance(b, Tensor):
        out = Tensor(a.data - b.data)
        sa, sb = a.shape, b.shape
        return _record(
            out, (a, b),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")
    out = Tensor(a.data - b)
    return _record(out, (a,), lambda g: (g,), "sub")


def mul(a, b):
    if isinstance(b, Tensor):
        out = Tensor(a.data * b.data)
        sa, sb = a.shape, b.shape
        ad, bd = a.data, b.data
        return _record(
            out, (a, b),
            lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
            "mul")
    out = Tensor(a.data * b)
    return _record(out, (a,), lambda g: (g * b,), "mul")


def div(a, b):
    if isinstance(b, Tensor):
        out = Tensor(a.data / b.data)
        sa, sb = a.shape, b.shape
        ad, bd = a.data, b.data
        return _record(
            out, (a, b),
            lambda g: (_unbroadcast(g / bd, sa),
                       _unbroadcast(-g * ad / (bd * bd), sb)), "div")
    out = Tensor(a.data / b)
    return _record(out, (a,), lambda g: (g / b,), "div")


def neg(a):
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,), "neg")


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    s = special.expit(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def gelu(a):
    """Exact Gaussian error linear unit, x * Phi(x)."""
    xd = a.data
    phi_cdf = 0.5 * (1.0 + special.erf(xd * _INV_SQRT2))
    out = Tensor(xd * phi_cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (phi_cdf + xd * pdf),)

    return _record(out, (a,), bwd, "gelu")


def softmax(a, axis=-1):
    xd = a.data
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (a,), bwd, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))
    shape = a.shape
    axes = _axis_tuple(axis, a.ndim)

    def bwd(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (np.ascontiguousarray(np.broadcast_to(g, shape)),)

    return _record(out, (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = Tensor(np.mean(a.data, axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (np.ascontiguousarray(np.broadcast_to(g / n, shape)),)

    return _record(out, (a,), bwd, "mean")


def amax(a, axis=None, keepdims=False):
    """Max reduction; ties share the incoming gradient equally."""
    axes = _axis_tuple(axis, a.ndim)
    m = np.amax(a.data, axis=axis, keepdims=True)
    mask = (a.data == m).astype(DTYPE)
    cnt = mask.sum(axis=tuple(axes), keepdims=True)
    out_data = m if keepdims else np.squeeze(m, axis=tuple(axes))
    out = Tensor(out_data)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (mask * (g / cnt),)

    return _record(out, (a,), bwd, "amax")


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),), "reshape")


def expand(a, shape):
    """Broadcast to a larger shape; gradient sums back down."""
    try:
        out = Tensor(np.broadcast_to(a.data, shape))
    except ValueError as e:
        raise ShapeError(f"cannot expand {a.shape} to {shape}: {e}") from None
    orig = a.shape
    return _record(out, (a,), lambda g: (_unbroadcast(g, orig),), "expand")


def transpose(a, axes=None):
    out = Tensor(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record(out, (a,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),),
                   "transpose")


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p)
                     for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), bwd, "concat")


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    batch_a, batch_b = ad.shape[:-2], bd.shape[:-2]
    try:
        batch = np.broadcast_shapes(batch_a, batch_b)
    except ValueError as e:
        raise ShapeError(f"matmul batch dims incompatible: {e}") from None
    M, K = ad.shape[-2:]
    N = bd.shape[-1]
    T = int(np.prod(batch, dtype=np.int64)) if batch else 1
    a3 = np.ascontiguousarray(
        np.broadcast_to(ad, batch + (M, K)).reshape(T, M, K))
    b3 = np.ascontiguousarray(
        np.broadcast_to(bd, batch + (K, N)).reshape(T, K, N))
    out3 = np.zeros((T, M, N))
    kernels.bmm(a3, b3, out3)
    _add_macs(T * M * K * N)
    out = Tensor(out3.reshape(batch + (M, N)))
    sa, sb = ad.shape, bd.shape

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape(T, M, N))
        ga = gb = None
        if a.requires_grad:
            bt = np.ascontiguousarray(b3.transpose(0, 2, 1))
            ga3 = np.zeros((T, M, K))
            kernels.bmm_fast(g3, bt, ga3)
            ga = _unbroadcast(ga3.reshape(batch + (M, K)), sa)
        if b.requires_grad:
            at = np.ascontiguousarray(a3.transpose(0, 2, 1))
            gb3 = np.zeros((T, K, N))
            kernels.bmm_fast(at, g3, gb3)
            gb = _unbroadcast(gb3.reshape(batch + (K, N)), sb)
        return (ga, gb)

    return _record(out, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(H, W, kh, kw, stride, pad):
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    return Ho, Wo


def _im2col(xd, kh, kw, stride, pad, groups):
    """Patch matrix (B, G, Cg*kh*kw, Ho*Wo); row index is (cg, ky, kx)."""
    B, C, H, W = xd.shape
    Cg = C // groups
    Ho, Wo = _conv_out_size(H, W, kh, kw, stride, pad)
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
        xp[:, :, pad:pad + H, pad:pad + W] = xd
    else:
        xp = xd
    xg = xp.reshape(B, groups, Cg, xp.shape[2], xp.shape[3])
    pat = np.empty((B, groups, Cg, kh * kw, Ho * Wo))
    for ky in range(kh):
        ys = slice(ky, ky + (Ho - 1) * stride + 1, stride)
        for kx in range(kw):
            xs = slice(kx, kx + (Wo - 1) * stride + 1, stride)
            pat[:, :, :, ky * kw + kx, :] = (
                xg[:, :, :, ys, xs].reshape(B, groups, Cg, Ho * Wo))
    return pat.reshape(B, groups, Cg * kh * kw, Ho * Wo)


def _col2im(gpat, xshape, kh, kw, stride, pad, groups):
    """Adjoint of _im2col: scatter patch gradients back onto the input."""
    B, C, H, W = xshape
    Cg = C // groups
    Ho, Wo = _conv_out_size(H, W, kh, kw, stride, pad)
    gxp = np.zeros((B, groups, Cg, H + 2 * pad, W + 2 * pad))
    g6 = gpat.reshape(B, groups, Cg, kh * kw, Ho, Wo)
    for ky in range(kh):
        ys = slice(ky, ky + (Ho - 1) * stride + 1, stride)
        for kx in range(kw):
            xs = slice(kx, kx + (Wo - 1) * stride + 1, stride)
            gxp[:, :, :, ys, xs] += g6[:, :, :, ky * kw + kx]
    gxp = gxp.reshape(B, C, H + 2 * pad, W + 2 * pad)
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad:pad + H, pad:pad + W])
    return gxp


def _validate_conv(x, w, stride, pad, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and weight")
    if stride < 1 or pad < 0:
        raise ShapeError(f"bad stride/padding: {stride}, {pad}")
    B, C, H, W = x.shape
    Co, Cg, kh, kw = w.shape
    if C % groups or Co % groups:
        raise ShapeError(
            f"channels {C}->{Co} not divisible by groups={groups}")
    if Cg != C // groups:
        raise ShapeError(
            f"weight expects {Cg} channels/group, input gives {C // groups}")
    Ho, Wo = _conv_out_size(H, W, kh, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"conv output would be empty: input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {pad}")
    return Ho, Wo


def conv2d(x, w, bias=None, stride=1, padding=0, groups=1, impl="im2col"):
    """2-d convolution. impl selects the im2col or sliding-window route;
    both produce identical bits."""
    if impl not in ("im2col", "direct"):
        raise ValueError(f"unknown conv impl {impl!r}")
    xd, wd = x.data, w.data
    Ho, Wo = _validate_conv(xd, wd, stride, padding, groups)
    B, C, H, W = xd.shape
    Co, Cg, kh, kw = wd.shape
    cog = Co // groups
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if impl == "im2col":
        if pointwise:
            pat = xd.reshape(B, groups, Cg, H * W)
        else:
            pat = _im2col(xd, kh, kw, stride, padding, groups)
        a2 = np.ascontiguousarray(wd.reshape(groups, cog, Cg * kh * kw))
        o4 = np.zeros((B, groups, cog, Ho * Wo))
        kernels.gmm(a2, pat, o4)
        out_data = o4.reshape(B, Co, Ho, Wo)
    else:
        pat = None
        out_data = np.zeros((B, Co, Ho, Wo))
        kernels.conv2d_direct(xd, wd, out_data, stride, padding, groups)
    _add_macs(B * Co * Ho * Wo * Cg * kh * kw)
    if bias is not None:
        if bias.shape != (Co,):
            raise ShapeError(f"conv bias must be ({Co},), got {bias.shape}")
        out_data = out_data + bias.data.reshape(1, Co, 1, 1)
    out = Tensor(out_data)
    xshape = xd.shape

    def bwd(g):
        gc = np.ascontiguousarray(g)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gc.sum(axis=(0, 2, 3))
        if impl == "im2col":
            g4 = gc.reshape(B, groups, cog, Ho * Wo)
            if w.requires_grad:
                gw3 = np.zeros((groups, cog, Cg * kh * kw))
                kernels.gmm_abt_fast(g4, pat, gw3)
                gw = gw3.reshape(Co, Cg, kh, kw)
            if x.requires_grad:
                at = np.ascontiguousarray(
                    wd.reshape(groups, cog, Cg * kh * kw).transpose(0, 2, 1))
                gpat = np.zeros((B, groups, Cg * kh * kw, Ho * Wo))
                kernels.gmm_fast(at, g4, gpat)
                if pointwise:
                    gx = gpat.reshape(xshape)
                else:
                    gx = _col2im(gpat, xshape, kh, kw, stride, padding,
                                 groups)
        else:
            if w.requires_grad:
                gw = np.zeros_like(wd)
                kernels.conv2d_direct_bwd_w(xd, gc, gw, stride, padding,
                                            groups)
            if x.requires_grad:
                gx = np.zeros(xshape)
                kernels.conv2d_direct_bwd_x(gc, wd, gx, stride, padding,
                                            groups)
        if bias is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, inputs, bwd, "conv2d")


def deconv2d(x, w, bias=None, stride=1, padding=0):
    """Transposed 2-d convolution; weight layout (C_in, C_out, kh, kw)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("deconv2d expects 4-d input and weight")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding: {stride}, {padding}")
    B, Ci, H, W = xd.shape
    Wi, Co, kh, kw = wd.shape
    if Wi != Ci:
        raise ShapeError(
            f"deconv weight expects {Wi} input channels, got {Ci}")
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho < 1 or Wo < 1:
        raise ShapeError("deconv output would be empty")
    out_data = np.zeros((B, Co, Ho, Wo))
    kernels.deconv2d_fwd(xd, wd, out_data, stride, padding)
    _add_macs(B * Ci * H * W * Co * kh * kw)
    if bias is not None:
        if bias.shape != (Co,):
            raise ShapeError(f"deconv bias must be ({Co},), got {bias.shape}")
        out_data = out_data + bias.data.reshape(1, Co, 1, 1)
    out = Tensor(out_data)

    def bwd(g):
        gc = np.ascontiguousarray(g)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gc.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            kernels.deconv2d_bwd_x(gc, wd, gx, stride, padding)
        if w.requires_grad:
            gw = np.zeros_like(wd)
            kernels.deconv2d_bwd_w(xd, gc, gw, stride, padding)
        if bias is not None:
            return (gx, gw, gb)
        return (gx, gw)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, inputs, bwd, "deconv2d")


# ---------------------------------------------------------------------------
# normalization

def batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                 momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over (B, H, W).

    running_mean/running_var are plain ndarrays updated in place during
    training (with the unbiased variance, torch convention); normalization
    itself uses the biased batch variance.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("batch_norm2d expects (B, C, H, W)")
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batch_norm2d affine params must have shape (C,)")
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        corr = n / (n - 1) if n > 1 else 1.0
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * corr
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
    out = Tensor(xhat * gamma.data.reshape(1, C, 1, 1)
                 + beta.data.reshape(1, C, 1, 1))

    def bwd(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(1, C, 1, 1)
            if training:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - s1 / n - xhat * s2 / n) * inv.reshape(1, C, 1, 1)
            else:
                gx = gxhat * inv.reshape(1, C, 1, 1)
        return (gx, gg, gb)

    return _record(out, (x, gamma, beta), bwd, "batch_norm2d")


# ---------------------------------------------------------------------------
# pooling

def avg_pool2d(x, k):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("avg_pool2d expects (B, C, H, W)")
    B, C, H, W = xd.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    out = Tensor(xd.reshape(B, C, Ho, k, Wo, k).mean(axis=(3, 5)))

    def bwd(g):
        g6 = np.broadcast_to(g[:, :, :, None, :, None] / (k * k),
                             (B, C, Ho, k, Wo, k))
        return (np.ascontiguousarray(g6).reshape(B, C, H, W),)

    return _record(out, (x,), bwd, "avg_pool2d")


def max_pool2d(x, k):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("max_pool2d expects (B, C, H, W)")
    B, C, H, W = xd.shape
    if H % k or W % k:
        raise ShapeError(f"max_pool2d: {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    win = xd.reshape(B, C, Ho, k, Wo, k)
    m = win.max(axis=(3, 5), keepdims=True)
    mask = (win == m).astype(DTYPE)
    cnt = mask.sum(axis=(3, 5), keepdims=True)
    out = Tensor(m.reshape(B, C, Ho, Wo))

    def bwd(g):
        g6 = mask * (g[:, :, :, None, :, None] / cnt)
        return (np.ascontiguousarray(g6).reshape(B, C, H, W),)

    return _record(out, (x,), bwd, "max_pool2d")


def pool2d(x, k, mode="avg"):
    if mode == "avg":
        return avg_pool2d(x, k)
    if mode == "max":
        return max_pool2d(x, k)
    raise ValueError(f"unknown pool mode {mode!r}")


def adaptive_avg_pool2d(x, out_hw):
    """Average pool to an arbitrary output size.

    Bin i covers rows floor(i*H/Ho) .. ceil((i+1)*H/Ho), matching the usual
    adaptive pooling convention.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("adaptive_avg_pool2d expects (B, C, H, W)")
    B, C, H, W = xd.shape
    Ho, Wo = out_hw
    if Ho < 1 or Wo < 1 or Ho > H or Wo > W:
        raise ShapeError(
            f"adaptive pool target {Ho}x{Wo} invalid for input {H}x{W}")
    ys = [(i * H // Ho, -(-(i + 1) * H // Ho)) for i in range(Ho)]
    xs = [(j * W // Wo, -(-(j + 1) * W // Wo)) for j in range(Wo)]
    out_data = np.empty((B, C, Ho, Wo))
    for i, (y0, y1) in enumerate(ys):
        for j, (x0, x1) in enumerate(xs):
            out_data[:, :, i, j] = xd[:, :, y0:y1, x0:x1].mean(axis=(2, 3))
    out = Tensor(out_data)

    def bwd(g):
        gx = np.zeros_like(xd)
        for i, (y0, y1) in enumerate(ys):
            for j, (x0, x1) in enumerate(xs):
                area = (y1 - y0) * (x1 - x0)
                gx[:, :, y0:y1, x0:x1] += (
                    g[:, :, i, j, None, None] / area)
        return (gx,)

    return _record(out, (x,), bwd, "adaptive_avg_pool2d")


# ---------------------------------------------------------------------------
# bilinear sampling

def grid_sample_bilinear(x, coords):
    """Sample x at pixel-space locations with bilinear weights.

    coords has shape (B, Ho, Wo, 2) with [..., 0] = column (x) and
    [..., 1] = row (y), in input pixel units. Locations are clamped to the
    border; clamped coordinates receive zero gradient.
    """
    xd = x.data
    cd = coords.data
    if xd.ndim != 4 or cd.ndim != 4 or cd.shape[-1] != 2:
        raise ShapeError("grid_sample_bilinear expects (B,C,H,W) input and "
                         "(B,Ho,Wo,2) coords")
    if cd.shape[0] != xd.shape[0]:
        raise ShapeError("grid_sample_bilinear batch sizes differ")
    B, C, H, W = xd.shape
    _, Ho, Wo, _ = cd.shape
    cx = np.clip(cd[..., 0], 0.0, W - 1.0)
    cy = np.clip(cd[..., 1], 0.0, H - 1.0)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.minimum(x0, W - 1)
    y0 = np.minimum(y0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    tx = cx - x0
    ty = cy - y0
    bi = np.arange(B)[:, None, None]
    v00 = xd[bi, :, y0, x0]
    v01 = xd[bi, :, y0, x1]
    v10 = xd[bi, :, y1, x0]
    v11 = xd[bi, :, y1, x1]
    txe = tx[..., None]
    tye = ty[..., None]
    sampled = (v00 * (1 - txe) * (1 - tye) + v01 * txe * (1 - tye)
               + v10 * (1 - txe) * tye + v11 * txe * tye)
    out = Tensor(np.ascontiguousarray(sampled.transpose(0, 3, 1, 2)))

    def bwd(g):
        gx = gc = None
        gt = g.transpose(0, 2, 3, 1)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            w00 = gt * ((1 - txe) * (1 - tye))
            w01 = gt * (txe * (1 - tye))
            w10 = gt * ((1 - txe) * tye)
            w11 = gt * (txe * tye)
            bidx = np.broadcast_to(bi, (B, Ho, Wo))
            np.add.at(gx.transpose(0, 2, 3, 1), (bidx, y0, x0), w00)
            np.add.at(gx.transpose(0, 2, 3, 1), (bidx, y0, x1), w01)
            np.add.at(gx.transpose(0, 2, 3, 1), (bidx, y1, x0), w10)
            np.add.at(gx.transpose(0, 2, 3, 1), (bidx, y1, x1), w11)
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - tye) + (v11 - v10) * tye)
            dy = ((v10 - v00) * (1 - txe) + (v11 - v01) * txe)
            gcx = (gt * dx).sum(axis=-1)
            gcy = (gt * dy).sum(axis=-1)
            live_x = (cd[..., 0] > 0.0) & (cd[..., 0] < W - 1.0)
            live_y = (cd[..., 1] > 0.0) & (cd[..., 1] < H - 1.0)
            gc = np.stack([gcx * live_x, gcy * live_y], axis=-1)
        return (gx, gc)

    return _record(out, (x, coords), bwd, "grid_sample_bilinear")
