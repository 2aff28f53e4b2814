"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure propagating the output gradient back to them.
:func:`backward` linearizes the graph reachable from a scalar root into a
:class:`Tape` (topological order) and replays it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise add.

    ``b`` may also be a scalar, or a bias whose shape equals the trailing
    dims of ``a`` (bias vectors, one perturbation shared by a batch).
    """
    a = as_tensor(a)
    b = _const(b, a)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 0:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum()), "add")
    if a.data.ndim == 0:
        return add(b, a)
    if b.data.ndim < a.data.ndim and a.shape[a.data.ndim - b.data.ndim :] == b.shape:
        axes = tuple(range(a.data.ndim - b.data.ndim))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    if a.data.ndim < b.data.ndim:
        return add(b, a)
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    return add(a, neg(_const(b, a)))


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a scalar (float or 0-d Tensor)."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if b.data.ndim == 0:
        ad, bd = a.data, b.data
        return _make(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum()), "mul_scalar")
    if a.data.ndim == 0:
        return mul(b, a)
    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a: Tensor) -> Tensor:
    # strict positivity: subgradient at 0 is 0
    mask = (a.data > 0).astype(a.dtype)
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid_np(t: np.ndarray) -> np.ndarray:
    """Branch-wise logistic function that never overflows."""
    t = np.asarray(t)
    out = np.empty_like(t, dtype=t.dtype if t.dtype.kind == "f" else DEFAULT_DTYPE)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus_np(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t).astype(np.asarray(t).dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where lo < a < hi."""
    if not lo < hi:
        raise ValueError(f"clamp requires lo < hi, got ({lo}, {hi})")
    inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- reductions and shape ------------------------------------------------

def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    shape = a.shape
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the leading (batch) axis."""
    n = a.shape[0]
    if n == 0:
        raise ShapeError("mean over empty batch")
    shape = a.shape
    return _make(a.data.mean(axis=0), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean_rows")


def spatial_mean(a: Tensor) -> Tensor:
    """Global average pool: [N, C, H, W] -> [N, C]."""
    if a.data.ndim != 4:
        raise ShapeError(f"spatial_mean expects 4-d input, got {a.shape}")
    n, c, h, w = a.shape
    return _make(
        a.data.mean(axis=(2, 3)),
        (a,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), a.shape).copy(),),
        "spatial_mean",
    )


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm of all entries; gradient at the origin is taken as 0."""
    nrm = float(np.sqrt(np.sum(a.data * a.data)))

    def back(g):
        if nrm == 0.0:
            return (np.zeros_like(a.data),)
        return (g * a.data / nrm,)

    return _make(np.asarray(nrm, dtype=a.dtype), (a,), back, "l2norm")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols, oh, ow


def _col2im(cols: np.ndarray, xshape, k: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. x: [N, C, H, W]; weight: [O, C, k, k]; bias: [O]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d tensors, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, c2, k, k2 = weight.shape
    if c != c2 or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: {x.shape} vs {weight.shape}")
    cols, oh, ow = _im2col(x.data, k, stride, padding)
    # [N*oh*ow, C*k*k]
    flat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = flat @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gmat.T @ flat).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
            gx = _col2im(gcols, x.shape, k, stride, padding, oh, ow)
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _make(np.ascontiguousarray(out), parents, back, "conv2d")


# -- losses --------------------------------------------------------------

def check_binary_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.size and not np.all((y == 1) | (y == -1)):
        raise ValueError("binary labels must be in {-1, +1}")
    return y


def logistic_loss(logits: Tensor, y) -> Tensor:
    """Per-sample logistic loss softplus(-y * logit) for labels in {-1, +1}.

    ``logits`` may have shape [N], [N, 1] or be a scalar; output has shape [N]
    (or scalar for a scalar logit).
    """
    y = check_binary_labels(y)
    z = logits.data
    squeeze = z.ndim == 2
    if squeeze:
        if z.shape[1] != 1:
            raise ShapeError(f"binary logistic loss expects one logit per sample, got {z.shape}")
        z = z[:, 0]
    yv = y.astype(z.dtype).reshape(z.shape)
    t = yv * z
    loss = softplus_np(-t)
    # dl/dz = -y (1 - sigmoid(y z)) = -y sigmoid(-y z)
    dz = -yv * sigmoid_np(-t)

    def back(g):
        gz = g * dz
        return (gz[:, None] if squeeze else gz,)

    return _make(loss, (logits,), back, "logistic_loss")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample softmax cross-entropy; labels are class indices."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("cross_entropy expects [N, C] logits")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ValueError("class index out of range")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = lse - z[rows, labels]
    p = np.exp(z - lse[:, None])
    p[rows, labels] -= 1.0

    def back(g):
        return (g[:, None] * p,)

    return _make(loss, (logits,), back, "cross_entropy")


# -- tape ----------------------------------------------------------------

class Tape:
    """Topologically ordered view of the graph reachable from a root."""

    def __init__(self, root: Tensor):
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns a map from ``id(leaf)`` to its gradient contribution.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not on the tape (no input requires grad)")
    tape = Tape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
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
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. ``wrt`` without touching any ``.grad`` buffer."""
    wrt = list(wrt)
    saved = [(t, t.grad) for t in _leaves_of(root)]
    for t, _ in saved:
        t.grad = None
    try:
        leaves = backward(root)
    finally:
        for t, g in saved:
            t.grad = g
    return [leaves.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _leaves_of(root: Tensor) -> list[Tensor]:
    return [n for n in Tape(root).nodes if n._backward is None] if root.requires_grad else []


def grad_wrt_input(model, x, y) -> np.ndarray:
    """Gradient of the summed per-sample loss w.r.t. the input batch ``x``.

    Each row of the result is the per-sample input gradient, since samples do
    not interact. Parameter ``.grad`` buffers are left untouched.
    """
    xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x), requires_grad=True)
    loss = model.loss(model.forward(xt), y).sum()
    if not loss.requires_grad:
        return np.zeros_like(xt.data)
    (gx,) = grad(loss, [xt])
    return gx
