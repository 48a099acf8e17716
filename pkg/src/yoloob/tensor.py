"""Dense NCHW tensors with reverse-mode differentiation.

Only the handful of kernels the detector needs are provided: convolution,
batch norm, SiLU, stride-1 max pooling, nearest 2x upsampling, channel
concatenation, elementwise add and a scalar sum.  Every op records its
parents and a closure computing input gradients; :meth:`Tensor.backward`
walks the resulting graph in reverse topological order.

Arrays keep the dtype of their inputs (float32 by default).  Gradient checks
in the test-suite run the very same kernels in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the dimension."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def custom(value, parents: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> Tensor:
    """Wrap a scalar computed outside the tape whose input gradients are known.

    Used by the detection losses, which evaluate their closed-form gradients
    directly.  The upstream gradient scales the supplied ones.
    """
    data = np.asarray(value, dtype=parents[0].dtype if parents else np.float32)
    frozen = [None if g is None else np.asarray(g, dtype=p.dtype) for p, g in zip(parents, grads)]

    def backward(g):
        return [None if f is None else f * g for f in frozen]

    return _result(data, parents, backward)


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if k == 1 and stride == 1 and padding == 0:
        return x.reshape(B, C, H * W), Ho, Wo
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * k * k, Ho * Wo), Ho, Wo


def _col2im(cols: np.ndarray, shape, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    B, C, H, W = shape
    if k == 1 and stride == 1 and padding == 0:
        return cols.reshape(B, C, H, W)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:padding + H, padding:padding + W]
    return xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, k, k) kernel.

    ``padding`` defaults to ``(k - 1) // 2``.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (batch, channels, height, width), got {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d weight must be (out, in, k, k), got {weight.shape}")
    co, ci, k, _ = weight.shape
    if x.shape[1] != ci:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ShapeError(f"conv2d bias must have length out_channels={co}, got {bias.shape}")
    if padding is None:
        padding = (k - 1) // 2
    cols, Ho, Wo = _im2col(x.data, k, stride, padding)
    wm = weight.data.reshape(co, -1)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    B = x.shape[0]
    out = out.reshape(B, co, Ho, Wo)
    keep_cols = cols if (weight.requires_grad or x.requires_grad) else None
    xshape = x.shape

    def backward(g):
        g2 = g.reshape(B, co, Ho * Wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, keep_cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gx = _col2im(np.matmul(wm.T, g2), xshape, k, stride, padding, Ho, Wo)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


# ----------------------------------------------------------------- batch norm

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, eps: float = BN_EPS, train: bool = False,
               momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization; ``train=True`` uses batch statistics and
    updates ``running_mean``/``running_var`` in place."""
    C = x.shape[1]
    for label, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                       ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeError(f"batch_norm {label} has length {arr.shape}, input has {C} channels")
    if eps <= 0:
        raise ValueError("batch_norm eps must be positive")
    xd = x.data
    if np.isnan(xd).any():
        raise FloatingPointError("batch_norm received NaN input")
    axes = (0, 2, 3)
    if train:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        n = xd.size // C
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if train:
                m = gxhat.mean(axis=axes, keepdims=True)
                mx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (gxhat - m - xhat * mx) * inv[None, :, None, None]
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


# ----------------------------------------------------------- pointwise / misc

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _result(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def max_pool(x: Tensor, kernel: int, stride: int = 1, padding: int | None = None) -> Tensor:
    """Stride-1 'same' max pooling; padded cells are -inf so they never win.

    Ties resolve to the first maximum in row-major window order.
    """
    if kernel % 2 == 0:
        raise ValueError(f"max_pool kernel must be odd, got {kernel}")
    if stride != 1:
        raise ValueError("max_pool only supports stride 1")
    if padding is None:
        padding = kernel // 2
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    Ho, Wo = H + 2 * padding - kernel + 1, W + 2 * padding - kernel + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win.reshape(B, C, Ho, Wo, kernel * kernel)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        di, dj = np.divmod(idx, kernel)
        rows = np.arange(Ho)[None, None, :, None] + di
        cols = np.arange(Wo)[None, None, None, :] + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        np.add.at(gp, (np.broadcast_to(bi, idx.shape), np.broadcast_to(ci, idx.shape), rows, cols), g)
        return (gp[:, :, padding:padding + H, padding:padding + W],)

    return _result(np.ascontiguousarray(out), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward)


def concat_channels(*xs: Tensor) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels batch/spatial mismatch: {ref} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return _result(out, xs, backward)
