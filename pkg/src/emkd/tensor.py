"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation builds its output with :func:`_node`, which
records the parents and a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the recorded graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid scalar parameters (pool size, stride, ...)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """N-d array (rank <= 4) of float64 with an optional gradient buffer.

    ``grad`` is only populated on leaves (tensors not produced by a recorded
    operation).  Repeated :func:`backward` calls accumulate into it until
    :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if arr.size == 0:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, arr: np.ndarray, owned: bool = True) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if owned:
            arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if out.ndim > MAX_RANK:
        raise ShapeError(f"{op}: result rank {out.ndim} exceeds {MAX_RANK}")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt(a) -> Tensor:
    """Square root; the gradient at 0 is taken as 0 rather than infinity."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _node(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# -- reductions and reshaping -----------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _node(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape)
        full[index] += g
        return (full,)

    return _node(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward, "concat")


def stack(tensors: Sequence) -> Tensor:
    """Stack scalars or equal-shape tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# -- convolution, pooling, resampling ----------------------------------------------


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,Cin,H,W]`` with ``kernel[Cout,Cin,kh,kw]``.

    Lowered to one matrix product over channels-last patch columns; the
    columns are kept for the backward pass.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride={stride}, padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xt = x.data.transpose(0, 2, 3, 1)
    if padding:
        xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
        out += bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gk = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward, "conv2d")


def _check_pool(a: Tensor, k: int, name: str) -> tuple:
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError(f"{name}: pool size must be a positive int, got {k!r}")
    if a.ndim < 2:
        raise ShapeError(f"{name}: needs at least 2 spatial axes, got {a.shape}")
    h, w = a.shape[-2:]
    if h % k or w % k:
        raise ParameterError(f"{name}: extents {h}x{w} not divisible by {k}")
    return a.shape[:-2], h // k, w // k


def avg_pool2d(a, k: int) -> Tensor:
    """Mean over non-overlapping k x k windows of the last two axes."""
    a = as_tensor(a)
    lead, ho, wo = _check_pool(a, k, "avg_pool2d")
    blocks = a.data.reshape(lead + (ho, k, wo, k))
    # anchor + mean deviation: a constant window returns its value bit for bit
    anchor = blocks[..., :, :1, :, :1]
    out = (anchor + (blocks - anchor).mean(axis=(-3, -1), keepdims=True))[..., :, 0, :, 0]

    def backward(g):
        g = np.broadcast_to(g[..., :, None, :, None] / (k * k), lead + (ho, k, wo, k))
        return (g.reshape(a.shape),)

    return _node(out, (a,), backward, "avg_pool2d")


def max_pool2d(a, k: int) -> Tensor:
    """Max over non-overlapping k x k windows; ties route to the first row-major element."""
    a = as_tensor(a)
    lead, ho, wo = _check_pool(a, k, "max_pool2d")
    nl = len(lead)
    blocks = a.data.reshape(lead + (ho, k, wo, k))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(lead + (ho, wo, k * k))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gblocks = gflat.reshape(lead + (ho, wo, k, k)).transpose(inv)
        return (gblocks.reshape(a.shape),)

    return _node(out, (a,), backward, "max_pool2d")


def upsample_nearest(a, k: int) -> Tensor:
    """Replicate each element of the last two axes into a k x k block."""
    a = as_tensor(a)
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError(f"upsample_nearest: factor must be a positive int, got {k!r}")
    if k == 1:
        return _node(a.data.copy(), (a,), lambda g: (g,), "upsample_nearest")
    out = np.repeat(np.repeat(a.data, k, axis=-2), k, axis=-1)
    h, w = a.shape[-2:]

    def backward(g):
        return (g.reshape(a.shape[:-2] + (h, k, w, k)).sum(axis=(-3, -1)),)

    return _node(out, (a,), backward, "upsample_nearest")


# -- softmax family ------------------------------------------------------------------


def channel_softmax(logits, axis: int = 1) -> Tensor:
    z = as_tensor(logits)
    if z.shape[axis] < 2:
        raise ShapeError(f"channel_softmax needs >= 2 channels, got {z.shape[axis]}")
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (z,), backward, "softmax")


def log_softmax(logits, axis: int = 1) -> Tensor:
    z = as_tensor(logits)
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (z,), backward, "log_softmax")


# -- differentiation -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    Relative error per element is ``|a - c| / max(|a|, |c|, 1e-12)``.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros(base.shape)
    numeric = np.zeros(base.shape)
    flat = base.reshape(-1)
    with no_grad():
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f(Tensor(base)).item()
            flat[idx] = orig - step
            fm = f(Tensor(base)).item()
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (fp - fm) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
