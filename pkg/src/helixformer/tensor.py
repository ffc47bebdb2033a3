"""Dense tensors with tape-style reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable op
records its parents and a closure mapping the output gradient to parent
gradients; :func:`backward` walks that graph in reverse topological order and
frees it afterwards.

Spatial ops use a leading batch axis (``B x C x H x W``); a single feature map
is simply a batch of one.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, PreconditionError

_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch the floating type used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise PreconditionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; the functional forms below are the real implementations
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return reduce_mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise PreconditionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise PreconditionError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # free the tape as we go
        node._parents = ()
        node._backward = None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), back)


elementwise_mul = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"bad permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise PreconditionError("concat of zero tensors")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two feature maps along the channel axis (axis -3)."""
    if a.ndim < 3 or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise DimensionError(f"cannot concat channels of {a.shape} and {b.shape}")
    return concat([a, b], axis=a.ndim - 3)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)
    src = a.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(out, (a,), back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(out, (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _result(out, (a,), back)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes, if any, are batch axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and a.ndim == b.ndim:
        raise DimensionError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is ``out x in``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


# --------------------------------------------------------------------------
# softmax / losses


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (a,), back)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def back(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _result(y, (a,), back)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``M x N`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (M,N) logits and M labels, got {logits.shape}, {labels.shape}")
    logp = log_softmax_rows(logits)
    picked = take_pairs(logp, labels)
    total = reduce_sum(picked)
    if reduction == "sum":
        return scale(total, -1.0)
    return scale(total, -1.0 / labels.size)


def take_pairs(a: Tensor, cols) -> Tensor:
    """Pick ``a[i, cols[i]]`` for every row i."""
    rows = np.arange(a.shape[0])
    cols = np.asarray(cols, dtype=np.intp)
    out = a.data[rows, cols]
    src = a.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        full[rows, cols] = g
        return (full,)

    return _result(out, (a,), back)


# --------------------------------------------------------------------------
# convolution and pooling


def _check_spatial(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} expects B x C x H x W, got {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col.

    ``x`` is ``B x Cin x H x W`` (a 3-D map is promoted to a batch of one and
    demoted again on output); ``weight`` is ``Cout x Cin x kh x kw``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _check_spatial(x, "conv2d")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    span_h, span_w = H + 2 * padding - kh, W + 2 * padding - kw
    if span_h < 0 or span_w < 0:
        raise DimensionError(f"kernel {kh}x{kw} does not fit padded input {H}x{W}")
    if span_h % stride or span_w % stride:
        raise DimensionError(f"non-integral conv output size for {H}x{W}, k={kh}, stride={stride}, pad={padding}")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # one GEMM over a (C*kh*kw) x (B*Ho*Wo) column matrix
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    wmat = weight.data.reshape(O, C * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            dxp = np.zeros((C, B) + xp.shape[2:], dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
            dxp = dxp.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = _result(out, parents, back)
    return reshape(result, result.shape[1:]) if squeeze else result


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd trailing rows/cols are dropped.

    Gradient goes to the first maximum in row-major window order.
    """
    if k != stride:
        raise DimensionError("max_pool2d only supports non-overlapping windows (k == stride)")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _check_spatial(x, "max_pool2d")
    B, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"max_pool2d window {k} larger than input {H}x{W}")
    xd = x.data[:, :, :Ho * k, :Wo * k]
    win = xd.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((B, C, H, W), dtype=g.dtype)
        gx[:, :, :Ho * k, :Wo * k] = gw.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
        return (gx,)

    result = _result(np.ascontiguousarray(out), (x,), back)
    return reshape(result, result.shape[1:]) if squeeze else result


# --------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over axes (B, H, W).

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential ``momentum``).
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects B x C or B x C x H x W, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm channel mismatch: input {C}, gamma {gamma.shape}")
    if x.shape[0] == 0:
        raise PreconditionError("batch_norm on an empty batch")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    xd = x.data
    n = xd.size // C

    if training:
        mean = xd.mean(axis=axes)
        centered = xd - mean.reshape(bshape)
        var = (centered * centered).mean(axis=axes)
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
        centered = xd - mean.reshape(bshape)
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * invstd.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (invstd.reshape(bshape) / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each vector along the last axis, then apply the affine map."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"layer_norm channel mismatch: input {C}, gamma {gamma.shape}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * invstd
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def back(g):
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = invstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), back)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {what}")
    return t


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


__all__ = [
    "Tensor", "tensor", "backward", "no_grad", "set_default_dtype", "get_default_dtype", "default_dtype",
    "add", "sub", "mul", "elementwise_mul", "scale", "relu", "reshape", "transpose", "concat",
    "concat_channels", "take", "reduce_sum", "reduce_mean", "matmul", "linear", "softmax_rows",
    "log_softmax_rows", "cross_entropy", "conv2d", "max_pool2d", "batch_norm", "layer_norm",
    "check_finite", "zeros", "ones",
]
