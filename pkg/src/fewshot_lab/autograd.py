"""Dense f64 tensors with reverse-mode automatic differentiation.

Every operation builds a node in an implicit tape: the output tensor keeps
references to its parents and a closure that maps the output gradient to
parent gradients. ``backward(loss)`` walks the tape once in reverse
topological order and accumulates gradients additively into leaf tensors
(anything created directly by the user, in particular ``Parameter``).

Conventions baked in here:
  * everything is float64, row-major numpy storage;
  * conv2d is cross-correlation (no kernel flip);
  * softmax subtracts the per-slice max before exponentiating;
  * maxpool backward routes to the first occurrence of the max in
    row-major window order;
  * any op whose output contains NaN/Inf raises ``NonFiniteError``
    immediately, silent propagation is forbidden.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    DimensionError,
    NonFiniteError,
)

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "tensor",
    "zeros",
    "randn",
    "add",
    "sub",
    "mul",
    "neg",
    "abs_",
    "matmul",
    "conv2d",
    "maxpool2d",
    "relu",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "batchnorm",
    "concat",
    "flatten",
    "reshape",
    "transpose",
    "narrow",
    "upsample_nearest2d",
    "sum_",
    "mean_",
    "linear",
    "cross_entropy",
    "backward",
    "zero_grads",
    "grad_check",
    "GradCheckReport",
    "SGD",
    "Adam",
    "memory_stats",
    "reset_peak_memory",
]


# ---------------------------------------------------------------------------
# allocation accounting (live tensor bytes + high-water mark)

_mem_current = 0
_mem_peak = 0


def _mem_add(nbytes):
    global _mem_current, _mem_peak
    _mem_current += nbytes
    if _mem_current > _mem_peak:
        _mem_peak = _mem_current


def _mem_sub(nbytes):
    global _mem_current
    _mem_current -= nbytes


def memory_stats():
    """Return ``(live_bytes, peak_bytes)`` of tensor data buffers."""
    return _mem_current, _mem_peak


def reset_peak_memory():
    """Reset the peak watermark to the currently live byte count."""
    global _mem_peak
    _mem_peak = _mem_current


# ---------------------------------------------------------------------------
# grad mode

_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


# ---------------------------------------------------------------------------
# core tensor

class Tensor:
    """n-dimensional float64 array plus optional gradient buffer.

    ``requires_grad`` marks tensors that participate in differentiation.
    Gradients land in ``.grad`` and accumulate across ``backward`` calls
    until ``zero_grads`` clears them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor", "constructor input contains NaN/Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        _mem_add(arr.nbytes)

    def __del__(self):
        try:
            _mem_sub(self.data.nbytes)
        except Exception:
            pass

    # -- inspection ---------------------------------------------------------

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array (not a copy; do not mutate)."""
        return self.data

    def is_leaf(self):
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None


class Parameter(Tensor):
    """A named leaf tensor with ``requires_grad=True``.

    Names are hierarchical ("backbone.block1.conv1.weight") and must be
    unique within a model; they key checkpoints and optimizer state.
    """

    __slots__ = ("name",)

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _coerce(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def randn(rng, shape, std=1.0, requires_grad=False):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# op construction helper

def _make(op, out_data, parents, backward_fn):
    """Wrap raw output data in a Tensor, recording the tape edge.

    ``backward_fn(g)`` must return one gradient array (or None) per parent,
    in parent order. The edge is recorded only when grad mode is on and at
    least one parent requires grad.
    """
    if not (isinstance(out_data, np.ndarray) and out_data.dtype == np.float64
            and out_data.flags.c_contiguous):
        out_data = np.ascontiguousarray(out_data, dtype=np.float64)
    if out_data.size and not (np.isfinite(out_data.min()) and np.isfinite(out_data.max())):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    _mem_add(out_data.nbytes)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcasting arithmetic

def add(a, b):
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def abs_(a):
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    """Matrix product. Both 2-D, or both stacked with identical batch dims."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {ad.shape} x {bd.shape}")
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {ad.shape} x {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree, {ad.shape} x {bd.shape}")
    out = ad @ bd

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _make("matmul", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# conv2d via im2col

def _strided_windows(xp, kh, kw, sh, sw, ho, wo):
    b, c, hp, wp = xp.shape
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )


def _pad2d(x, p, value=0.0):
    b, c, h, w = x.shape
    if value == 0.0:
        out = np.zeros((b, c, h + 2 * p, w + 2 * p))
    else:
        out = np.full((b, c, h + 2 * p, w + 2 * p), value)
    out[:, :, p:p + h, p:p + w] = x
    return out


_index_grid_cache = {}


def _index_grids(shape):
    grids = _index_grid_cache.get(shape)
    if grids is None:
        grids = np.indices(shape)
        _index_grid_cache[shape] = grids
    return grids


def _corr2d_gemm(xp, wd, stride):
    """Valid cross-correlation of a pre-padded input via im2col + GEMM.

    Returns (output [B,Cout,Ho,Wo], cols) with cols kept for the weight
    gradient.
    """
    b, cin, hp, wp = xp.shape
    cout, _, kh, kw = wd.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = _strided_windows(xp, kh, kw, stride, stride, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, cin * kh * kw)
    out = cols @ wd.reshape(cout, cin * kh * kw).T
    return out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2), cols


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``.

    H' = floor((H + 2*padding - kh)/stride) + 1, likewise W'. The input
    gradient is computed as the transposed correlation (gradient dilated by
    the stride, correlated with the flipped kernel), all GEMM-backed.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input and weight, got {xd.shape}, {wd.shape}")
    b, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")

    xp = _pad2d(xd, padding) if padding else xd
    out, cols = _corr2d_gemm(xp, wd, stride)
    ho, wo = out.shape[2], out.shape[3]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * ho * wo, cout)
        dw = (gmat.T @ cols).reshape(cout, cin, kh, kw)

        hp_, wp_ = h + 2 * padding, w + 2 * padding
        gh = (ho - 1) * stride + 1
        gw = (wo - 1) * stride + 1
        gp = np.zeros((b, cout,
                       gh + 2 * (kh - 1) + (hp_ - gh - kh + 1),
                       gw + 2 * (kw - 1) + (wp_ - gw - kw + 1)))
        gp[:, :, kh - 1:kh - 1 + gh:stride, kw - 1:kw - 1 + gw:stride] = g
        wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dxp, _ = _corr2d_gemm(gp, wflip, 1)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is None:
            return (dx, dw)
        return (dx, dw, g.sum(axis=(0, 2, 3)))

    return _make("conv2d", out, parents, bwd)


# ---------------------------------------------------------------------------
# maxpool2d

def maxpool2d(x, k, stride, padding=0):
    """Window maxima over ``k x k`` patches.

    Optional padding fills with -inf (used by stride-1 same-pad pooling).
    Backward routes the gradient to the first occurrence of the max in
    row-major window order.
    """
    xd = x.data
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2d: need 4-D input, got {xd.shape}")
    b, c, h, w = xd.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"maxpool2d: window {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    xp = _pad2d(xd, padding, value=-np.inf) if padding else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = _strided_windows(xp, k, k, stride, stride, ho, wo)
    flat = np.ascontiguousarray(win).reshape(b, c, ho, wo, k * k)
    idx = flat.argmax(axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def bwd(g):
        dxp = np.zeros((b, c, hp, wp))
        bi, ci, oi, oj = _index_grids((b, c, ho, wo))
        ri = oi * stride + idx // k
        cj = oj * stride + idx % k
        np.add.at(dxp, (bi, ci, ri, cj), g)
        if padding:
            return (dxp[:, :, padding:padding + h, padding:padding + w],)
        return (dxp,)

    return _make("maxpool2d", out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations

def relu(x):
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.01):
    if not 0.0 <= slope < 1.0:
        raise ContractError(f"leaky_relu: slope must be in [0,1), got {slope}")
    mask = x.data > 0
    return _make("leaky_relu", np.where(mask, x.data, slope * x.data), (x,),
                 lambda g: (g * np.where(mask, 1.0, slope),))


def _sigmoid_raw(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid_raw(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _make("softmax", s, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization

def batchnorm(x, gamma, beta, running_mean, running_var, training,
              eps=1e-5, momentum=0.1):
    """Normalize over the batch (and spatial) axes.

    ``x`` is [B,F] or [B,C,H,W]; ``gamma``/``beta`` are [F] / [C] tensors.
    ``running_mean``/``running_var`` are plain arrays mutated in place in
    train mode (unbiased variance, torch convention) and read in eval mode.
    """
    xd = x.data
    if xd.ndim == 2:
        axes, shape = (0,), (1, -1)
    elif xd.ndim == 4:
        axes, shape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batchnorm: need 2-D or 4-D input, got {xd.shape}")
    nfeat = xd.shape[1]
    if gamma.data.shape != (nfeat,) or beta.data.shape != (nfeat,):
        raise DimensionError("batchnorm: gamma/beta shape mismatch")
    gview = gamma.data.reshape(shape)
    bview = beta.data.reshape(shape)

    if training:
        if xd.shape[0] < 2:
            raise DegenerateBatchError(
                f"batchnorm: train mode needs batch >= 2, got {xd.shape[0]}")
        n = 1
        for ax in axes:
            n *= xd.shape[ax]
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        ivstd = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean) * ivstd
        out = gview * xhat + bview
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / (n - 1))

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gview
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * ivstd
            return (dx, dgamma, dbeta)

        return _make("batchnorm", out, (x, gamma, beta), bwd)

    rm = running_mean.reshape(shape)
    iv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
    out = gview * (xd - rm) * iv + bview

    def bwd_eval(g):
        return (g * gview * iv,
                (g * (xd - rm) * iv).sum(axis=axes),
                g.sum(axis=axes))

    return _make("batchnorm", out, (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# layout ops

def concat(tensors, axis):
    if not tensors:
        raise ContractError("concat: empty input list")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"concat: axis {axis} invalid for rank {nd}")
    axis = axis % nd
    ref = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        if len(s) != nd or any(s[i] != ref[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat: non-axis dims differ, {tuple(ref)} vs {t.data.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        sl = [slice(None)] * nd
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _make("concat", out, tuple(tensors), bwd)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.data.shape),))


def flatten(x):
    """[B, ...] -> [B, prod(rest)]."""
    if x.data.ndim < 2:
        raise DimensionError(f"flatten: need at least 2-D, got {x.shape}")
    return reshape(x, (x.data.shape[0], -1))


def transpose(x, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make("transpose", x.data.transpose(axes), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def narrow(x, axis, start, length):
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    nd = x.data.ndim
    if not 0 <= axis < nd:
        raise DimensionError(f"narrow: axis {axis} invalid for rank {nd}")
    if start < 0 or start + length > x.data.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for dim {x.data.shape[axis]}")
    sl = [slice(None)] * nd
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(x.data[sl])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _make("narrow", out, (x,), bwd)


def upsample_nearest2d(x, factor):
    """Repeat each spatial cell ``factor`` times along H and W."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2d: need 4-D input, got {x.shape}")
    if factor < 1:
        raise ContractError(f"upsample_nearest2d: factor must be >= 1, got {factor}")
    b, c, h, w = x.data.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bwd(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make("upsample_nearest2d", out, (x,), bwd)


def sum_(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make("sum", out, (x,), bwd)


def mean_(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    elif isinstance(axis, tuple):
        count = 1
        for ax in axis:
            count *= x.data.shape[ax]
    else:
        count = x.data.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, x.data.shape).copy(),)

    return _make("mean", out, (x,), bwd)


def linear(x, weight, bias=None):
    """Affine map: ``x[B,din] @ weight[din,dout] + bias[dout]``."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise DimensionError(f"linear: need 2-D input and weight, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise DimensionError(f"linear: inner dims disagree, {xd.shape} x {wd.shape}")
    if bias is not None and bias.data.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.data.shape} != ({wd.shape[1]},)")
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if bias is None:
            return (g @ wd.T, xd.T @ g)
        return (g @ wd.T, xd.T @ g, g.sum(axis=0))

    return _make("linear", out, parents, bwd)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits[Q,N]`` against int labels."""
    ld = logits.data
    if ld.ndim != 2:
        raise DimensionError(f"cross_entropy: need 2-D logits, got {ld.shape}")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    q, n = ld.shape
    if y.shape[0] != q:
        raise ContractError(f"cross_entropy: {y.shape[0]} labels for {q} rows")
    if y.size and (y.min() < 0 or y.max() >= n):
        raise ContractError(f"cross_entropy: label out of range [0,{n})")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = (lse - z[np.arange(q), y]).mean()

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(q), y] -= 1.0
        return (g * p / q,)

    return _make("cross_entropy", np.float64(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# reverse pass

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of all reachable leaves.

    Repeated calls without ``zero_grads`` add up (two backwards double the
    gradients exactly).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any grad-requiring tensor")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf():
            if node.grad is None:
                node.grad = g.copy()
            else:
                if node.grad.shape != node.data.shape:
                    raise ContractError("backward: stale grad with mismatched shape")
                node.grad = node.grad + g
            continue
        for parent, gp in zip(node._parents, node._backward_fn(g)):
            if gp is None or not parent.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64)
            if gp.shape != parent.data.shape:
                raise ContractError(
                    f"backward: op '{node._op}' produced grad shape {gp.shape} "
                    f"for parent shape {parent.data.shape}")
            acc = grads.get(id(parent))
            grads[id(parent)] = gp if acc is None else acc + gp


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient checking

class GradCheckReport:
    """Worst-case central-difference comparison over all checked entries."""

    def __init__(self):
        self.max_rel_err = 0.0
        self.worst_input = None
        self.worst_index = None
        self.checked = 0
        self.skipped = 0

    def update(self, rel_err, input_idx, flat_idx):
        self.checked += 1
        if rel_err > self.max_rel_err:
            self.max_rel_err = rel_err
            self.worst_input = input_idx
            self.worst_index = flat_idx

    def __repr__(self):
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"worst=input[{self.worst_input}] flat[{self.worst_index}], "
                f"checked={self.checked}, skipped={self.skipped})")


def grad_check(f, inputs, eps=1e-5, sample_per_tensor=None, rng=None,
               filter_kinks=False):
    """Compare analytic gradients of scalar-valued ``f(*inputs)`` with
    central differences.

    ``inputs`` are Tensors with ``requires_grad=True``. When
    ``sample_per_tensor`` is given, only that many coordinates per input
    (chosen by ``rng``) are perturbed; otherwise every coordinate is.
    Relative error is |a - n| / max(1, |a|, |n|). A non-deterministic ``f``
    raises ``ContractError``.

    ``filter_kinks`` also evaluates the difference at eps/2 and skips
    coordinates where the two estimates disagree: there the perturbation
    crosses a subgradient kink (ReLU zero, pooling argmax switch) and the
    central difference itself is meaningless. Skips are counted in the
    report; non-kink coordinates still expose any wrong gradient.
    """
    inputs = list(inputs)
    base1 = f(*inputs)
    base2 = f(*inputs)
    if not np.array_equal(base1.data, base2.data):
        raise ContractError("grad_check: function is not deterministic, unusable")
    if base1.data.size != 1:
        raise ContractError("grad_check: function must be scalar-valued")

    zero_grads(inputs)
    out = f(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    zero_grads(inputs)

    def central(flat, j, orig, e):
        flat[j] = orig + e
        fp = f(*inputs).item()
        flat[j] = orig - e
        fm = f(*inputs).item()
        flat[j] = orig
        return (fp - fm) / (2.0 * e)

    report = GradCheckReport()
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if sample_per_tensor is not None and sample_per_tensor < n:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(n, size=sample_per_tensor, replace=False)
        else:
            indices = range(n)
        a_flat = analytic[i].reshape(-1)
        for j in indices:
            orig = flat[j]
            numeric = central(flat, j, orig, eps)
            if filter_kinks:
                refined = central(flat, j, orig, eps / 2.0)
                if abs(numeric - refined) > 1e-4 * max(1.0, abs(numeric), abs(refined)):
                    report.skipped += 1
                    continue
                numeric = refined
            a = a_flat[j]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            report.update(rel, i, int(j))
    return report


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    """Plain gradient descent: p <- p - lr * grad."""

    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = float(lr)

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"SGD.step: parameter {getattr(p, 'name', '?')} has no grad")
            p.data -= self.lr * p.grad

    def zero_grad(self):
        zero_grads(self.params)

    def state_arrays(self):
        return {}

    def load_state_arrays(self, arrays):
        if arrays:
            raise ContractError("SGD carries no state")


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"Adam.step: parameter {p.name} has no grad")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        zero_grads(self.params)

    def state_arrays(self):
        """Optimizer state as flat named arrays (for checkpointing)."""
        out = {"t": np.array([float(self.t)])}
        for name, arr in self.m.items():
            out[f"m/{name}"] = arr
        for name, arr in self.v.items():
            out[f"v/{name}"] = arr
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for p in self.params:
            self.m[p.name] = arrays[f"m/{p.name}"].reshape(p.data.shape).copy()
            self.v[p.name] = arrays[f"v/{p.name}"].reshape(p.data.shape).copy()
