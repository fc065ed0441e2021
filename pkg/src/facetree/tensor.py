"""Dense tensors with reverse-mode automatic differentiation.

Everything the network needs lives here: convolution, transposed
convolution, max pooling, batch normalization, fully connected layers and
the elementwise glue between them.  Image tensors are ``(N, C, H, W)``;
the spatial ops also accept an unbatched ``(C, H, W)`` tensor and return
an unbatched result.

Convolutions use the cross-correlation convention (no kernel flip).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "ComputationRecord", "no_grad", "is_grad_enabled", "tensor",
    "conv2d", "transposed_conv2d", "maxpool2d", "batchnorm2d", "relu",
    "elementwise_add", "concat_channels", "concat", "fully_connected",
    "log_softmax", "clamp", "backward", "gradient_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A numpy array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic with numpy-style broadcasting
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def square(self):
        return mul(self, self)


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph replay

class ComputationRecord:
    """Operations reachable from an output, in topological order.

    Every node appears after all of its producers, so walking ``nodes`` in
    reverse visits consumers before producers.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _topological_order(output)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def replay_backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
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


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    record = ComputationRecord(loss)
    record.replay_backward(np.ones_like(loss.data))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise_add shape mismatch: {a.shape} vs {b.shape}")
    return add(a, b)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    """Rectifier.  The backward pass uses subgradient 1 at exactly zero.

    That choice lets zero-initialised additive branches (routing, messages)
    receive gradient on their first step.
    """
    mask = x.data >= 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (int, slice, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def concat_channels(a: Tensor, b: Tensor, *more: Tensor) -> Tensor:
    """Stack feature maps along the channel axis (axis -3)."""
    parts = (a, b) + more
    spatial = {t.shape[-2:] for t in parts}
    lead = {t.shape[:-3] for t in parts}
    if len(spatial) != 1 or len(lead) != 1:
        raise ValueError(f"concat_channels needs equal batch/spatial dims, got {[t.shape for t in parts]}")
    return concat(parts, axis=-3)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), bw, "matmul")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) or (in,); weight is (out, in)."""
    squeeze = x.ndim == 1
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 2 or weight.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected shape mismatch: input {x.shape}, weight {weight.shape}")
    wd = weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        g2 = g[None] if squeeze else g
        gx = g2 @ wd
        gx = gx[0] if squeeze else gx
        gw = g2.T @ xd
        return (gx, gw) + ((g2.sum(axis=0),) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out[0] if squeeze else out, parents, bw, "fully_connected")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


# ---------------------------------------------------------------- spatial ops

def _as_batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"{name} expects (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, was_unbatched: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if was_unbatched else y


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


# Convolution internals work on "column" arrays laid out (C, kh, kw, N, Ho, Wo),
# built and consumed one kernel tap at a time so every copy is a strided slice.

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, 1, 1, n, h, w)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xc = _pad(x, padding).transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; returns (N, C, H, W)."""
    c, kh, kw, n, ho, wo = cols.shape
    if kh == kw == 1 and stride == 1 and padding == 0:
        return _to_nchw(cols.reshape(c, n, ho, wo))
    hp, wp = out_hw[0] + 2 * padding, out_hw[1] + 2 * padding
    full = np.zeros((c, n, max(hp, stride * (ho - 1) + kh), max(wp, stride * (wo - 1) + kw)), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    full = full[:, :, padding:padding + out_hw[0], padding:padding + out_hw[1]]
    return np.ascontiguousarray(full.transpose(1, 0, 2, 3))


def _to_nchw(a: np.ndarray) -> np.ndarray:
    # (C, N, H, W) -> contiguous (N, C, H, W)
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3))


def _channel_major(a: np.ndarray) -> np.ndarray:
    c = a.shape[1]
    return np.ascontiguousarray(a.transpose(1, 0, 2, 3)).reshape(c, -1)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation.  kernel is (C_out, C_in, kh, kw)."""
    xb, unb = _as_batched(x, "conv2d")
    if kernel.ndim != 4:
        raise ValueError(f"conv2d kernel must be 4-D, got {kernel.shape}")
    n, c, h, w = xb.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise ValueError(f"conv2d: kernel expects {cin} input channels, input has {c}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    wmat = kernel.data.reshape(cout, -1)
    cols = _im2col(xb.data, kh, kw, stride, padding)
    ho, wo = cols.shape[4:]
    out = (wmat @ cols.reshape(wmat.shape[1], -1)).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = _to_nchw(out)

    def bw(g):
        gm = _channel_major(g)
        gk = (gm @ cols.reshape(wmat.shape[1], -1).T).reshape(kernel.shape)
        gx = None
        if xb.requires_grad:
            gx = _col2im((wmat.T @ gm).reshape(c, kh, kw, n, ho, wo), (h, w), stride, padding)
        grads = (gx, gk)
        if bias is not None:
            grads += (gm.sum(axis=1),)
        return grads

    parents = (xb, kernel) + ((bias,) if bias is not None else ())
    return _unbatch(_make(out, parents, bw, "conv2d"), unb)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                      padding: int = 0) -> Tensor:
    """Transposed convolution.  kernel is (C_in, C_out, kh, kw).

    Output size is ``(H - 1) * stride - 2 * padding + kh``.  The gradient
    with respect to the input is the forward ``conv2d`` with the same kernel.
    """
    xb, unb = _as_batched(x, "transposed_conv2d")
    n, cin, h, w = xb.shape
    if kernel.ndim != 4 or kernel.shape[0] != cin:
        raise ValueError(f"transposed_conv2d: kernel {kernel.shape} incompatible with {cin} input channels")
    if stride < 1:
        raise ValueError("transposed_conv2d: stride must be >= 1")
    _, cout, kh, kw = kernel.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ValueError(f"transposed_conv2d: non-positive output size {ho}x{wo}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"transposed_conv2d: bias shape {bias.shape}, expected ({cout},)")
    wmat = kernel.data.reshape(cin, -1)
    xm = _channel_major(xb.data)
    out = _col2im((wmat.T @ xm).reshape(cout, kh, kw, n, h, w), (ho, wo), stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        cols = _im2col(g, kh, kw, stride, padding)[..., :h, :w].reshape(wmat.shape[1], -1)
        gx = _to_nchw((wmat @ cols).reshape(cin, n, h, w))
        gk = (xm @ cols.T).reshape(kernel.shape)
        grads = (gx, gk)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    parents = (xb, kernel) + ((bias,) if bias is not None else ())
    return _unbatch(_make(out, parents, bw, "transposed_conv2d"), unb)


def maxpool2d(x: Tensor, window: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties route the gradient to the first element in scan order."""
    stride = window if stride is None else stride
    xb, unb = _as_batched(x, "maxpool2d")
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ValueError(f"maxpool2d: window {window} larger than input {h}x{w}")
    win = _windows(xb.data, window, window, stride)
    ho, wo = win.shape[2:4]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for t in range(window * window):
            i, j = divmod(t, window)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == t)
        return (gx,)

    return _unbatch(_make(out, (xb,), bw, "maxpool2d"), unb)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
                running: RunningStats | None = None, momentum: float = 0.9,
                eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In train mode the batch statistics are used and ``running`` is updated
    as ``running = momentum * running + (1 - momentum) * batch``.  In infer
    mode ``running`` supplies the statistics.
    """
    xb, unb = _as_batched(x, "batchnorm2d")
    n, c, h, w = xb.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if n * h * w == 0:
        raise ValueError("batchnorm2d: empty channel plane")
    xd = xb.data
    gd = gamma.data[None, :, None, None]
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if running is not None:
            running.mean[:] = momentum * running.mean + (1 - momentum) * mu
            running.var[:] = momentum * running.var + (1 - momentum) * var
    elif mode == "infer":
        if running is None:
            raise ValueError("batchnorm2d: infer mode needs running statistics")
        mu, var = running.mean, running.var
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)[None, :, None, None]
    xhat = (xd - mu.astype(xd.dtype)[None, :, None, None]) * inv
    out = gd * xhat + beta.data[None, :, None, None]
    m = n * h * w

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gd
        if mode == "train":
            gx = inv / m * (m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return _unbatch(_make(out, (xb, gamma, beta), bw, "batchnorm2d"), unb)


# ---------------------------------------------------------------- checking

def gradient_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor], delta: float = 1e-4) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over all inputs.

    ``fn`` maps the given tensors to a scalar tensor and must be a pure
    function of their ``.data``.  Inputs should be float64.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    backward(out)
    worst = 0.0
    with no_grad():
        for t in inputs:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + delta
                up = fn(*inputs).item()
                flat[k] = orig - delta
                down = fn(*inputs).item()
                flat[k] = orig
                numeric = (up - down) / (2 * delta)
                a = analytic.reshape(-1)[k]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
