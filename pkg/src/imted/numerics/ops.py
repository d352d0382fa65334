"""Differentiable operators.

Each op computes its forward result with numpy and, when an input requires a
gradient, records a closure that maps the output gradient to input gradients.
"""
import math

import numpy as np
from scipy.special import erf, expit

from .. import _accel
from .tensor import DimensionError, Tensor, UnsupportedOpError, record

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return record(a.data + b.data, (a, b), "add", bw)


def sub(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return record(a.data - b.data, (a, b), "sub", bw)


def mul(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return record(a.data * b.data, (a, b), "mul", bw)


def div(a, b):
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return record(out, (a, b), "div", bw)


def relu(x):
    mask = x.data > 0
    return record(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def gelu(x):
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)
    return record(out, (x,), "gelu", bw)


def exp(x):
    out = np.exp(x.data)
    return record(out, (x,), "exp", lambda g: (g * out,))


# -- reductions / shape ----------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return record(np.asarray(out), (x,), "sum", bw)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return record(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def _is_fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(x, idx):
    out = x.data[idx]
    fancy = _is_fancy(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if fancy:
            np.add.at(gx, idx, g)
        else:
            gx[idx] += g
        return (gx,)
    return record(np.asarray(out), (x,), "getitem", bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))
    return record(out, tuple(tensors), "concat", bw)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return record(out, (a, b), "matmul", bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data) if x.requires_grad else None
        gw = (g2.T @ x.data.reshape(-1, x.shape[-1])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return record(out, inputs, "linear", bw)


# -- normalisation / attention pieces --------------------------------------------

def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return record(out, (x,), "softmax", bw)


def layer_norm(x, weight, bias, eps=1e-6):
    D = x.shape[-1]
    if weight.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layer_norm: input {x.shape} vs scale {weight.shape} / shift {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def bw(g):
        gxhat = g * weight.data
        gx = None
        if x.requires_grad:
            gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead) if weight.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gw, gb
    return record(out, (x, weight, bias), "layer_norm", bw)


# -- convolution family ----------------------------------------------------------

def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _windows(xp, kh, kw, stride, Ho, Wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]


def _im2col_conv(x, w, ph, pw):
    """Plain stride-1 correlation on raw arrays, used by the conv input gradient."""
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    cols = _windows(xp, kh, kw, 1, Ho, Wo).transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    return (cols @ w.reshape(Co, -1).T).reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Dense 2-D cross-correlation; x (N,Cin,H,W), weight (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    N, C, H, W = x.shape
    Co, _, kh, kw = weight.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho <= 0 or Wo <= 0:
        raise DimensionError(f"conv2d: kernel {weight.shape} too large for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride, Ho, Wo).transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wm = weight.data.reshape(Co, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Co)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and kh - 1 >= padding and kw - 1 >= padding:
            # stride-1 input gradient is a full correlation with the flipped kernel
            wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _im2col_conv(g, wf, kh - 1 - padding, kw - 1 - padding)
        elif x.requires_grad:
            gcols = (gm @ wm).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2).copy()
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)
    return record(np.ascontiguousarray(out), inputs, "conv2d", bw)


def conv_transpose2d(x, weight, bias=None, stride=2, padding=0, groups=1):
    """Transposed convolution; weight (Cin, Cout/groups, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0] or x.shape[1] % groups:
        raise DimensionError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    N, C, H, W = x.shape
    _, Cog, kh, kw = weight.shape
    G, Cig = groups, C // groups
    Co = Cog * G
    Hf, Wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    xg = x.data.reshape(N, G, Cig, H, W)
    wg = weight.data.reshape(G, Cig, Cog, kh, kw)
    cols = np.einsum("ngchw,gcoij->ngoijhw", xg, wg, optimize=True)
    full = np.zeros((N, G, Cog, Hf, Wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, :, i:i + stride * H:stride, j:j + stride * W:stride] += cols[:, :, :, i, j]
    full = full.reshape(N, Co, Hf, Wf)
    out = full[:, :, padding:Hf - padding, padding:Wf - padding] if padding else full
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gfull = np.zeros((N, Co, Hf, Wf), dtype=g.dtype)
        if padding:
            gfull[:, :, padding:Hf - padding, padding:Wf - padding] = g
        else:
            gfull = g
        gfull = gfull.reshape(N, G, Cog, Hf, Wf)
        gcols = np.empty((N, G, Cog, kh, kw, H, W), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gcols[:, :, :, i, j] = gfull[:, :, :, i:i + stride * H:stride, j:j + stride * W:stride]
        gx = np.einsum("ngoijhw,gcoij->ngchw", gcols, wg, optimize=True).reshape(x.shape) \
            if x.requires_grad else None
        gw = np.einsum("ngchw,ngoijhw->gcoij", xg, gcols, optimize=True).reshape(weight.shape) \
            if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return record(np.ascontiguousarray(out), inputs, "conv_transpose2d", bw)


def upsample_nearest2x(x):
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)
    return record(out, (x,), "upsample_nearest2x", bw)


def max_pool2x(x):
    """2x2 max pooling with stride 2 (trailing odd row/column dropped)."""
    N, C, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    blocks = x.data[:, :, :2 * Ho, :2 * Wo].reshape(N, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(N, C, Ho, Wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((N, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * Ho, 2 * Wo)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * Ho, :2 * Wo] = gb
        return (gx,)
    return record(out, (x,), "max_pool2x", bw)


def bilinear_sample(feat, bidx, ys, xs):
    """Bilinear samples of ``feat`` (N,C,H,W) at points in cell coordinates -> (P, C)."""
    if feat.ndim != 4:
        raise DimensionError(f"bilinear_sample: feature map must be 4-D, got {feat.shape}")
    bidx = np.asarray(bidx)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if not (bidx.shape == ys.shape == xs.shape):
        raise DimensionError(f"bilinear_sample: index shapes {bidx.shape}, {ys.shape}, {xs.shape} differ")
    out = _accel.bilinear_gather(feat.data, bidx, ys, xs)

    def bw(g):
        return (_accel.bilinear_scatter(g, bidx, ys, xs, feat.shape),)
    return record(out, (feat,), "bilinear_sample", bw)


# -- losses / regularisers -------------------------------------------------------

def smooth_l1(x, target, beta=1.0):
    """Elementwise smooth-L1 of ``x - target``."""
    x, target = _pair(x, target)
    if x.shape != target.shape:
        raise DimensionError(f"smooth_l1: shapes {x.shape} and {target.shape} differ")
    d = x.data - target.data
    ad = np.abs(d)
    small = ad < beta
    out = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)

    def bw(g):
        gd = g * np.where(small, d / beta, np.sign(d))
        return gd, -gd
    return record(out.astype(x.dtype, copy=False), (x, target), "smooth_l1", bw)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy; logits (N, K), integer targets (N,)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = max(logits.shape[0], 1)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(logits.shape[0])
    out = np.asarray(-logp[rows, targets].sum() / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)
    return record(out, (logits,), "cross_entropy", bw)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on raw logits."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise DimensionError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    n = max(x.size, 1)
    loss = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(loss.sum() / n, dtype=logits.dtype)

    def bw(g):
        sig = expit(x)
        return ((sig - targets) * (g / n),)
    return record(out, (logits,), "bce_with_logits", bw)


def drop_path(x, rate, training, rng):
    """Per-sample residual-branch drop with survival rescaling (identity at eval)."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return mul(x, Tensor._wrap(mask))


OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "linear": linear,
    "sum": sum,
    "mean": mean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "exp": exp,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "upsample_nearest2x": upsample_nearest2x,
    "max_pool2x": max_pool2x,
    "bilinear_sample": bilinear_sample,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "smooth_l1": smooth_l1,
    "cross_entropy": cross_entropy,
    "bce_with_logits": bce_with_logits,
    "drop_path": drop_path,
}


def forward_op(kind, inputs, attrs=None):
    """Dispatch an op by name: ``forward_op("softmax", [x], {"axis": -1})``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported op kind {kind!r}") from None
    attrs = attrs or {}
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
