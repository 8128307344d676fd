"""Minimal reverse-mode autodiff on numpy arrays.

Implements exactly the operations the segmentation networks need: elementwise
arithmetic and activations, axis reductions, 2D convolution (strided, dilated,
grouped, with optional circular horizontal padding), neighbor stacking,
2x bilinear upsampling and a fused weighted cross-entropy. Gradients are
accumulated into ``Tensor.grad`` by :meth:`Tensor.backward`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "pow_const",
    "leaky_relu",
    "sigmoid",
    "softmax",
    "reshape",
    "moveaxis",
    "concat",
    "sum_",
    "mean",
    "amax",
    "maxpool_axis",
    "conv2d",
    "neighbor_stack",
    "bilinear_upsample",
    "weighted_cross_entropy",
    "sgd_step",
    "grad_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        """Reverse-mode pass from a scalar. Accumulates into ``.grad`` leaves."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def pow_const(a: Tensor, p: float) -> Tensor:
    out = a.data**p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data >= 0
    out = np.where(mask, a.data, a.data * slope)
    return _make(out, (a,), lambda g: (np.where(mask, g, g * slope),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # evaluate via exp of a non-positive argument to avoid overflow
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn)


# ------------------------------------------------------------------ movement


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def moveaxis(a: Tensor, src, dst) -> Tensor:
    return _make(np.moveaxis(a.data, src, dst), (a,), lambda g: (np.moveaxis(g, dst, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))]
    )
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(n))


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return maxpool_axis(a, axis, keepdims=keepdims)[0]


def maxpool_axis(a: Tensor, axis: int, keepdims: bool = False) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis``; gradient routes to the first (lowest-index) argmax."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g, axis=axis)
        return (gx,)

    return _make(out, (a,), grad_fn), idx


# -------------------------------------------------------------- convolutions


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def _pad_input(x: np.ndarray, ph: int, pw: int, pad_mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    if pad_mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if pad_mode == "circular_w":
        x = np.pad(x, ((0, 0), (0, 0), (0, 0), (pw, pw)), mode="wrap") if pw else x
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0))) if ph else x
    raise ValueError(f"unknown pad_mode {pad_mode!r}")


def _unpad_grad(gp: np.ndarray, H: int, W: int, ph: int, pw: int, pad_mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return gp
    g = gp[:, :, ph : ph + H, :]
    if pad_mode == "zeros" or pw == 0:
        return np.ascontiguousarray(g[:, :, :, pw : pw + W])
    # circular_w: fold wrapped margins back
    core = g[:, :, :, pw : pw + W].copy()
    core[:, :, :, W - pw :] += g[:, :, :, :pw]
    core[:, :, :, :pw] += g[:, :, :, pw + W :]
    return core


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
    pad_mode: str = "zeros",
) -> Tensor:
    """2D cross-correlation. ``x``: (B,Ci,H,W), ``weight``: (Co,Ci/g,kh,kw)."""
    B, Ci, H, W = x.data.shape
    Co, Cig, kh, kw = weight.data.shape
    if Ci % groups or Co % groups or Cig != Ci // groups:
        raise ValueError(
            f"conv2d channel mismatch: input {x.data.shape}, weight {weight.data.shape}, groups {groups}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    OH = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    OW = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if OH < 1 or OW < 1:
        raise ValueError(f"conv2d kernel does not fit: input {x.data.shape}, weight {weight.data.shape}")
    xp = _pad_input(x.data, ph, pw, pad_mode)
    Cog = Co // groups
    L = OH * OW
    depthwise = groups == Ci and Cig == 1 and Cog == 1
    pointwise = kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0) and groups == 1

    def tap_view(i, j):
        return xp[:, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh, j * dw : j * dw + sw * (OW - 1) + 1 : sw]

    plain_s1 = groups == 1 and (sh, sw) == (1, 1) and not pointwise

    if pointwise:
        w2 = weight.data.reshape(Co, Ci)
        y = (w2 @ xp.reshape(B, Ci, L)).reshape(B, Co, OH, OW)
    elif plain_s1:
        # stride-1 ungrouped: per-tap matmul restricted to the rows the tap uses
        Wp = xp.shape[3]
        out = None
        for i in range(kh):
            rows = xp[:, :, i * dh : i * dh + OH, :].reshape(B, Ci, OH * Wp)
            for j in range(kw):
                z = (weight.data[:, :, i, j] @ rows).reshape(B, Co, OH, Wp)
                zs = z[:, :, :, j * dw : j * dw + OW]
                if out is None:
                    out = np.ascontiguousarray(zs)
                else:
                    out += zs
        y = out
    elif depthwise:
        out = None
        wd = weight.data.reshape(Co, kh, kw)
        for i in range(kh):
            for j in range(kw):
                term = wd[:, i, j].reshape(1, Co, 1, 1) * tap_view(i, j)
                if out is None:
                    out = term
                else:
                    out += term
        y = out
    else:
        wg = weight.data.reshape(groups, Cog, Cig, kh, kw)
        out = np.zeros((B, groups, Cog, L), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                xs = np.ascontiguousarray(tap_view(i, j)).reshape(B, groups, Cig, L)
                out += wg[:, :, :, i, j] @ xs
        y = out.reshape(B, Co, OH, OW)
    if bias is not None:
        y = y + bias.data.reshape(1, Co, 1, 1)

    def grad_fn(g):
        need_x = x.requires_grad
        need_w = weight.requires_grad
        gx = gw_out = None
        if pointwise:
            go = g.reshape(B, Co, L)
            if need_w:
                xpf = xp.reshape(B, Ci, L)
                gw_out = np.matmul(go, xpf.transpose(0, 2, 1)).sum(axis=0).reshape(Co, Ci, 1, 1)
            if need_x:
                gx = (weight.data.reshape(Co, Ci).T @ go).reshape(B, Ci, H, W)
        elif plain_s1:
            go = g.reshape(B, Co, L)
            gw = np.zeros_like(weight.data) if need_w else None
            gxp = np.zeros_like(xp) if need_x else None
            Wp = xp.shape[3]
            if need_w:
                # g embedded in width-Wp frames, one copy per horizontal tap, so
                # each weight gradient is a single strided gemm over the rows
                gpads = []
                for j in range(kw):
                    gp = np.zeros((B, Co, OH, Wp), dtype=g.dtype)
                    gp[:, :, :, j * dw : j * dw + OW] = g
                    gpads.append(gp.reshape(B, Co, OH * Wp))
            for i in range(kh):
                rows = xp[:, :, i * dh : i * dh + OH, :].reshape(B, Ci, OH * Wp)
                for j in range(kw):
                    if need_w:
                        gw[:, :, i, j] = np.matmul(gpads[j], rows.transpose(0, 2, 1)).sum(axis=0)
                    if need_x:
                        gxs = (weight.data[:, :, i, j].T @ go).reshape(B, Ci, OH, OW)
                        gxp[:, :, i * dh : i * dh + OH, j * dw : j * dw + OW] += gxs
            if need_x:
                gx = _unpad_grad(gxp, H, W, ph, pw, pad_mode)
            gw_out = gw
        elif depthwise:
            wd = weight.data.reshape(Co, kh, kw)
            gw = np.zeros_like(wd) if need_w else None
            qh, qw = dh * (kh - 1) - ph, dw * (kw - 1) - pw
            direct = (sh, sw) == (1, 1) and qh >= 0 and qw >= 0
            if need_w:
                for i in range(kh):
                    for j in range(kw):
                        gw[:, i, j] = np.einsum("bchw,bchw->c", g, tap_view(i, j), optimize=True)
            if need_x and direct:
                # stride 1: input gradient is the correlation of g with the
                # flipped kernel, accumulated contiguously instead of scattered
                gq = _pad_input(g, qh, qw, pad_mode)
                gx = None
                for i in range(kh):
                    for j in range(kw):
                        term = wd[:, kh - 1 - i, kw - 1 - j].reshape(1, Co, 1, 1) * gq[
                            :, :, i * dh : i * dh + H, j * dw : j * dw + W
                        ]
                        if gx is None:
                            gx = term
                        else:
                            gx += term
            elif need_x:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[
                            :, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh, j * dw : j * dw + sw * (OW - 1) + 1 : sw
                        ] += wd[:, i, j].reshape(1, Co, 1, 1) * g
                gx = _unpad_grad(gxp, H, W, ph, pw, pad_mode)
            if need_w:
                gw_out = gw.reshape(Co, Cig, kh, kw)
        else:
            wg = weight.data.reshape(groups, Cog, Cig, kh, kw)
            go = g.reshape(B, groups, Cog, L)
            gw = np.zeros_like(wg) if need_w else None
            gxp = np.zeros_like(xp) if need_x else None
            for i in range(kh):
                for j in range(kw):
                    if need_w:
                        xs = np.ascontiguousarray(tap_view(i, j)).reshape(B, groups, Cig, L)
                        gw[:, :, :, i, j] = np.einsum("bgol,bgil->goi", go, xs, optimize=True)
                    if need_x:
                        gxs = (wg[:, :, :, i, j].transpose(0, 2, 1) @ go).reshape(B, Ci, OH, OW)
                        gxp[
                            :, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh, j * dw : j * dw + sw * (OW - 1) + 1 : sw
                        ] += gxs
            if need_x:
                gx = _unpad_grad(gxp, H, W, ph, pw, pad_mode)
            if need_w:
                gw_out = gw.reshape(Co, Cig, kh, kw)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        if bias is not None:
            return (gx, gw_out, gb)
        return (gx, gw_out)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(y, parents, grad_fn)


def neighbor_stack(x: Tensor, k: int = 3, dilation: int = 1, pad_mode: str = "zeros") -> Tensor:
    """Gather the k*k dilated neighborhood of every position.

    ``x``: (B,C,H,W) -> (B,C,k*k, H*W), zero-filled outside the image, taps in
    row-major window order. Differentiable with respect to ``x``.
    """
    B, C, H, W = x.data.shape
    p = dilation * (k // 2)
    xp = _pad_input(x.data, p, p, pad_mode)
    out = np.empty((B, C, k * k, H * W), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            xs = xp[:, :, i * dilation : i * dilation + H, j * dilation : j * dilation + W]
            out[:, :, i * k + j, :] = xs.reshape(B, C, H * W)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i * dilation : i * dilation + H, j * dilation : j * dilation + W] += g[
                    :, :, i * k + j, :
                ].reshape(B, C, H, W)
        return (_unpad_grad(gxp, H, W, p, p, pad_mode),)

    return _make(out, (x,), grad_fn)


def _sl(axis: int, s: slice) -> tuple:
    return (slice(None),) * axis + (s,)


def _up2x_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Double ``axis`` by bilinear interpolation (align_corners=False, clamped)."""
    n = x.shape[axis]
    shape = x.shape[:axis] + (2 * n,) + x.shape[axis + 1 :]
    out = np.empty(shape, dtype=x.dtype)
    t = 0.75 * x
    out[_sl(axis, slice(0, 1))] = x[_sl(axis, slice(0, 1))]
    out[_sl(axis, slice(2, None, 2))] = t[_sl(axis, slice(1, None))] + 0.25 * x[_sl(axis, slice(None, -1))]
    out[_sl(axis, slice(1, -1, 2))] = t[_sl(axis, slice(None, -1))] + 0.25 * x[_sl(axis, slice(1, None))]
    out[_sl(axis, slice(-1, None))] = x[_sl(axis, slice(-1, None))]
    return out


def _up2x_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    ge = g[_sl(axis, slice(0, None, 2))]
    go = g[_sl(axis, slice(1, None, 2))]
    gx = 0.75 * (ge + go)
    gx[_sl(axis, slice(None, -1))] += 0.25 * ge[_sl(axis, slice(1, None))]
    gx[_sl(axis, slice(0, 1))] += 0.25 * ge[_sl(axis, slice(0, 1))]
    gx[_sl(axis, slice(1, None))] += 0.25 * go[_sl(axis, slice(None, -1))]
    gx[_sl(axis, slice(-1, None))] += 0.25 * go[_sl(axis, slice(-1, None))]
    return gx


def bilinear_upsample(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,C,2H,2W), align_corners=False with clamped borders."""
    out = _up2x_axis(_up2x_axis(x.data, 2), 3)

    def grad_fn(g):
        return (_up2x_axis_grad(_up2x_axis_grad(g, 3), 2),)

    return _make(out, (x,), grad_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    slope: float | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Channel-axis-1 batch normalization, fused forward/backward.

    Training mode normalizes with batch moments over all non-channel axes and
    returns them (biased variance) so the caller can update running stats;
    eval mode normalizes with the supplied running stats. When ``slope`` is
    given, a LeakyReLU with that negative slope is fused onto the output.
    """
    xd = x.data
    C = xd.shape[1]
    axes = (0,) + tuple(range(2, xd.ndim))
    n = xd.size // C
    if n < 1:
        raise ValueError("batch_norm: empty normalization set")
    cshape = (1, C) + (1,) * (xd.ndim - 2)
    dt = xd.dtype
    letters = "abcdefgh"[: xd.ndim]
    pair_sub = f"{letters},{letters}->{letters[1]}"
    if training:
        m1 = xd.mean(axis=axes)
        xc = xd - m1.reshape(cshape)
        var = np.einsum(pair_sub, xc, xc) / n
        del xc
    else:
        m1 = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv = 1.0 / np.sqrt(var.astype(np.float64) + eps)
    scale = (gamma.data * inv).astype(dt)
    shift = (beta.data - scale * m1).astype(dt)
    y = xd * scale.reshape(cshape)
    y += shift.reshape(cshape)
    if slope is not None:
        fac = np.where(y >= 0, dt.type(1.0), dt.type(slope))
        y *= fac

    def grad_fn(g):
        ge = g * fac if slope is not None else g
        dbeta = ge.sum(axis=axes)
        s_gx = np.einsum(pair_sub, ge, xd)
        dgamma = ((s_gx - m1 * dbeta) * inv).astype(dt)
        if training:
            # gx = scale*(ge - dbeta/n - xhat*dgamma/n) expanded into per-channel
            # coefficients of ge and x to keep the pass count down
            bx = (-scale * dgamma * inv / n).astype(dt)
            c0 = (scale * (dgamma * inv * m1 - dbeta) / n).astype(dt)
            gx = ge * scale.reshape(cshape)
            gx += xd * bx.reshape(cshape)
            gx += c0.reshape(cshape)
        else:
            gx = ge * scale.reshape(cshape)
        return (gx, dgamma, dbeta.astype(dt))

    out = _make(y, (x, gamma, beta), grad_fn)
    return out, m1.astype(dt), var.astype(dt)


# --------------------------------------------------------------------- loss


def weighted_cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    ignore_id: int | None = None,
) -> Tensor:
    """Per-class weighted cross-entropy averaged over non-ignored positions.

    ``logits``: (B,Nc,...); ``targets``: (B,...) integer class ids;
    ``weights``: (Nc,) per-class weights.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    if targets.shape != logits.data.shape[:1] + logits.data.shape[2:]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.data.shape}")
    mask = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    m_eff = int(mask.sum())
    if m_eff == 0:
        raise ValueError("weighted_cross_entropy: every target is ignored")
    safe_t = np.where(mask, targets, 0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    t_idx = np.expand_dims(safe_t, 1)
    logp_true = np.take_along_axis(logp, t_idx, axis=1)[:, 0]
    w = weights[safe_t] * mask
    loss = -(w * logp_true).sum() / m_eff

    def grad_fn(g):
        p = np.exp(logp)
        gl = p * np.expand_dims(w, 1)
        np.put_along_axis(
            gl,
            t_idx,
            np.take_along_axis(gl, t_idx, axis=1) - np.expand_dims(w, 1),
            axis=1,
        )
        return (gl * (float(g) / m_eff),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn)


# ---------------------------------------------------------------- utilities


_allocator_tuned = False


def tune_allocator():
    """Keep large heap buffers resident between steps (glibc only, best effort).

    The training loop allocates and frees many multi-megabyte temporaries per
    step; by default glibc serves these via mmap/munmap, so every step pays
    page-fault and page-zeroing costs. Raising the mmap threshold and disabling
    trim lets the heap recycle those buffers.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, (1 << 31) - 1)
    except Exception:
        pass


def sgd_step(params: Sequence[Tensor], lr: float):
    """p <- p - lr * grad, then clear grads. Parameters without grads are left alone."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    for p in params:
        if p.grad is not None:
            p.data -= np.asarray(lr * p.grad, dtype=p.data.dtype)
            p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float | None = None) -> float:
    """Compare analytic grads of ``f()`` against central differences.

    Returns the max over all coordinates of |analytic - numeric| / max(1, |analytic|).
    ``f`` must rebuild its graph from ``params`` on every call.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            step = h if h is not None else 1e-6 * max(1.0, abs(float(x0)))
            flat[i] = x0 + step
            with no_grad():
                fp = f().item()
            flat[i] = x0 - step
            with no_grad():
                fm = f().item()
            flat[i] = x0
            numeric = (fp - fm) / (2.0 * step)
            err = abs(float(gflat[i]) - numeric) / max(1.0, abs(float(gflat[i])))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
