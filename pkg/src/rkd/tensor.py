"""Dense tensors with reverse-mode automatic differentiation.

Every op in this module takes :class:`Tensor` inputs, computes its result with
numpy, and (when any input requires grad and recording is enabled) attaches a
closure that maps the output gradient to input gradients. ``backward`` walks
the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created parameters."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph.

    Leaf tensors created by the user (parameters, inputs) have no parents.
    Tensors produced by ops keep references to their inputs and a backward
    closure; these form the graph that :meth:`backward` traverses.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    dtype = _DEFAULT_DTYPE if dtype is None else np.dtype(dtype)
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded edges, inputs first."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Only leaves that require grad receive a ``grad``; intermediate results
    are freed as soon as their contribution has been propagated.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
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


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    total = tsum(a, axis=axis, keepdims=keepdims)
    return mul(total, Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """``floor((size + 2*padding - kernel) / stride) + 1``; must be positive."""
    span = size + 2 * padding - kernel
    if span < 0:
        raise ValueError(
            f"empty conv output: size {size} + 2*padding {padding} is smaller than kernel {kernel}"
        )
    return span // stride + 1


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def _im2col(xc: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # channel-major padded input [C, N, Hp, Wp] -> columns [C, kh, kw, N, Ho, Wo]
    c, n = xc.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, _window(i, ho, stride), _window(j, wo, stride)]
    return cols


def _col2im(dcols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    # columns [C, kh, kw, N, Ho, Wo] -> channel-major padded gradient [C, N, Hp, Wp]
    c, kh, kw, n, ho, wo = dcols.shape
    dxc = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxc[:, :, _window(i, ho, stride), _window(j, wo, stride)] += dcols[:, i, j]
    return dxc


def _pad_channel_major(x: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    xc = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xc[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
    return xc


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d channel mismatch: input shape {x.shape} has {cin} channels,"
            f" weight shape {weight.shape} expects {wcin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xc = _pad_channel_major(x.data, padding)
    cols = _im2col(xc, kh, kw, stride, ho, wo).reshape(cin * kh * kw, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh, kw, n, ho, wo)
            dxc = _col2im(dcols, xc.shape[2], xc.shape[3], stride)
            gx = np.ascontiguousarray(dxc[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xc = _pad_channel_major(x.data, padding)
    scale = 1.0 / (kernel * kernel)
    acc = np.zeros((c, n, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            acc += xc[:, :, _window(i, ho, stride), _window(j, wo, stride)]
    out = np.ascontiguousarray((acc * scale).astype(x.dtype).transpose(1, 0, 2, 3))

    def bw(g):
        gc = (g * scale).transpose(1, 0, 2, 3)
        dcols = np.broadcast_to(gc[:, None, None], (c, kernel, kernel, n, ho, wo))
        dxc = _col2im(dcols, xc.shape[2], xc.shape[3], stride)
        return (np.ascontiguousarray(dxc[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)),)

    return _make(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]``."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over ``[N,C,H,W]``.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in the usual ResNet recipe).
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if training:
        axes = (0, 2, 3)
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

        def bw(g):
            gg = gamma.data.reshape(shape)
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            dxhat = g * gg
            dx = (inv.reshape(shape) / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv).reshape(shape)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
        out = x.data * scale + (beta.data - running_mean * gamma.data * inv).reshape(shape)

        def bw(g):
            return g * scale, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(out.astype(x.dtype), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# softmax family


def softmax_array(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    p = softmax_array(logits.data)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, (logits,), bw)


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tensor:
    """Mean over the batch of ``-sum(y * log softmax(logits))``.

    ``labels`` must be one-hot rows; anything else raises ``ValueError``.
    """
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} must both be [N, C]")
    y = labels.data
    tol = 1e-6
    is_binary = np.all((np.abs(y) <= tol) | (np.abs(y - 1) <= tol))
    if not is_binary or np.any(np.abs(y.sum(axis=1) - 1) > tol):
        raise ValueError("labels must be one-hot rows")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(y * logp).sum() / n

    def bw(g):
        return g * (np.exp(logp) - y) / n, None

    return _make(np.asarray(loss, dtype=logits.dtype), (logits, labels), bw)


def one_hot(labels: np.ndarray, classes: int, dtype=None) -> Tensor:
    dtype = _DEFAULT_DTYPE if dtype is None else dtype
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return Tensor(out)
