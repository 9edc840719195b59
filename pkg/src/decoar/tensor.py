"""Dense float64 arrays with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to parent gradients. ``Tensor.backward`` orders the recorded
graph topologically, visits each node once, accumulates into leaf ``grad``
buffers and then drops the graph links.

Broadcasting is limited to scalar-vs-tensor and equal shapes. Anything else
goes through the explicit :func:`broadcast_to` op so that every gradient rule
stays small.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "relu",
    "abs",
    "exp",
    "elementwise",
    "sum",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "broadcast_to",
    "take",
    "log_softmax",
    "time_reverse",
    "lstm_sequence",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may participate in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return sum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar loss, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(
                    f"seed gradient shape {grad.shape} != tensor shape {self.shape}"
                )

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
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
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order DFS; parents precede children in the result."""
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors the numpy name on purpose
    a = _as_tensor(a)
    sign = np.sign(a.data)  # sign(0) == 0 gives the documented subgradient
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "abs": abs,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("relu", x)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ structural

def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched over an equal leading axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def sum(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from exc
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, backward)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; size-1 axes (and missing leading axes) are expanded."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {a.shape} -> {shape}") from exc
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out, (a,), backward)


def take(a, index) -> Tensor:
    """numpy-style indexing; the gradient scatters back with ``np.add.at``."""
    a = _as_tensor(a)
    out = a.data[index]
    if isinstance(out, np.ndarray) and np.shares_memory(out, a.data):
        out = out.copy()
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward)


# ----------------------------------------------------------- sequence kernels

def _reverse_index(lengths: np.ndarray, t_max: int) -> np.ndarray:
    t = np.arange(t_max)[:, None]
    lengths = np.asarray(lengths)[None, :]
    return np.where(t < lengths, lengths - 1 - t, t)


def time_reverse(a, lengths: Sequence[int]) -> Tensor:
    """Reverse each column of a (T, B, ...) batch within its own length.

    Padding rows stay in place, so the op is its own inverse.
    """
    a = _as_tensor(a)
    t_max, batch = a.shape[0], a.shape[1]
    src = _reverse_index(np.asarray(lengths), t_max)
    cols = np.broadcast_to(np.arange(batch)[None, :], src.shape)
    out = a.data[src, cols]
    return _make(out, (a,), lambda g: (g[src, cols],))


def lstm_sequence(x, w_x, w_h, b, lengths: Sequence[int] | None = None) -> Tensor:
    """Run an LSTM over a padded (T, B, d) batch from a zero initial state.

    Gate blocks along the last axis of ``w_x``/``w_h``/``b`` are ordered
    input, forget, cell candidate, output. Outputs past a sequence's length
    are zero and receive no gradient. The backward pass is hand-written BPTT.
    """
    x, w_x, w_h, b = (_as_tensor(t) for t in (x, w_x, w_h, b))
    if x.ndim != 3:
        raise DimensionError(f"lstm_sequence: expected (T, B, d) input, got {x.shape}")
    t_max, batch, d = x.shape
    hid = w_h.shape[0]
    if w_x.shape != (d, 4 * hid) or w_h.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise DimensionError(
            f"lstm_sequence: input {x.shape} incompatible with w_x {w_x.shape}, "
            f"w_h {w_h.shape}, b {b.shape}"
        )
    if lengths is None:
        lengths = [t_max] * batch
    mask = (np.arange(t_max)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64)

    wx, wh = w_x.data, w_h.data
    pre = (x.data.reshape(t_max * batch, d) @ wx + b.data).reshape(t_max, batch, 4 * hid)
    gates = np.empty((t_max, batch, 4 * hid))
    cells = np.empty((t_max + 1, batch, hid))
    hiddens = np.empty((t_max + 1, batch, hid))
    cells[0] = 0.0
    hiddens[0] = 0.0
    for t in range(t_max):
        z = pre[t] + hiddens[t] @ wh
        act = gates[t]
        act[:, : 2 * hid] = _sigmoid(z[:, : 2 * hid])
        act[:, 2 * hid : 3 * hid] = np.tanh(z[:, 2 * hid : 3 * hid])
        act[:, 3 * hid :] = _sigmoid(z[:, 3 * hid :])
        cells[t + 1] = act[:, hid : 2 * hid] * cells[t] + act[:, :hid] * act[:, 2 * hid : 3 * hid]
        hiddens[t + 1] = act[:, 3 * hid :] * np.tanh(cells[t + 1])
    out = hiddens[1:] * mask[:, :, None]

    def backward(g):
        g = g * mask[:, :, None]
        dpre = np.empty_like(gates)
        dh_next = np.zeros((batch, hid))
        dc_next = np.zeros((batch, hid))
        for t in range(t_max - 1, -1, -1):
            act = gates[t]
            i, f = act[:, :hid], act[:, hid : 2 * hid]
            c_hat, o = act[:, 2 * hid : 3 * hid], act[:, 3 * hid :]
            tc = np.tanh(cells[t + 1])
            dh = g[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dpre[t]
            dz[:, :hid] = dc * c_hat * i * (1.0 - i)
            dz[:, hid : 2 * hid] = dc * cells[t] * f * (1.0 - f)
            dz[:, 2 * hid : 3 * hid] = dc * i * (1.0 - c_hat * c_hat)
            dz[:, 3 * hid :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ wh.T
        flat = dpre.reshape(t_max * batch, 4 * hid)
        gx = (flat @ wx.T).reshape(t_max, batch, d) if x.requires_grad else None
        gwx = x.data.reshape(t_max * batch, d).T @ flat if w_x.requires_grad else None
        gwh = hiddens[:-1].reshape(t_max * batch, hid).T @ flat if w_h.requires_grad else None
        gb = flat.sum(axis=0) if b.requires_grad else None
        return gx, gwx, gwh, gb

    return _make(out, (x, w_x, w_h, b), backward)
