"""Define-then-run reverse-mode differentiation over dense float64 matrices.

A :class:`Tape` records a graph of matrix operations once; leaves are then
(re)bound to values and the graph is evaluated with :func:`forward` and
differentiated with :func:`backward`. Rebinding leaves between steps lets a
training loop reuse one graph for every minibatch.

Every value is a 2-D ``float64`` array. Scalars are ``(1, 1)`` matrices.

Example:
    >>> tape = Tape()
    >>> w = tape.leaf("w", np.array([[2.0]]))
    >>> tape.set_exit(tape.mul(w, w))
    >>> float(forward(tape))
    4.0
    >>> backward(tape)["w"]
    array([[4.]])
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "DimensionError",
    "TapeStateError",
    "Node",
    "Tape",
    "forward",
    "backward",
    "abs_with_subgradient",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeStateError(RuntimeError):
    """The tape was used out of order (e.g. backward before forward)."""


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("kind", "parents", "name", "value", "grad", "attrs", "is_param")

    def __init__(self, kind: str, parents: tuple["Node", ...], name: str, attrs=None):
        self.kind = kind
        self.parents = parents
        self.name = name
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.attrs = attrs or {}
        self.is_param = False

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        return f"Node({self.kind!r}, name={self.name!r}, shape={self.shape})"


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got array with ndim={arr.ndim}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _broadcast_error(a: Node, b: Node) -> DimensionError:
    return DimensionError(f"cannot broadcast {a.name} {a.value.shape} with {b.name} {b.value.shape}")


# -- forward rules -----------------------------------------------------------

def _fw_matmul(node, a, b):
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: {a.name} {a.value.shape} is incompatible with {b.name} {b.value.shape}"
        )
    return a.value @ b.value


def _fw_add(node, a, b):
    try:
        return a.value + b.value
    except ValueError:
        raise _broadcast_error(a, b) from None


def _fw_mul(node, a, b):
    try:
        return a.value * b.value
    except ValueError:
        raise _broadcast_error(a, b) from None


def _fw_div(node, a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise _broadcast_error(a, b)
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise _broadcast_error(a, b) from None
    if node.attrs.get("zero_safe"):
        den = b.value
        zero = den == 0.0
        if zero.any():
            safe = np.where(zero, 1.0, den)
            return np.where(zero, 0.0, a.value / safe)
    return a.value / b.value


def _fw_log(node, a):
    floor = node.attrs.get("floor")
    if floor is not None:
        return np.log(np.maximum(a.value, floor))
    return np.log(a.value)


def _fw_bce(node, z, y):
    if z.value.shape != y.value.shape:
        raise DimensionError(
            f"bce_logits: {z.name} {z.value.shape} does not match {y.name} {y.value.shape}"
        )
    per = np.logaddexp(0.0, z.value) - y.value * z.value
    return np.array([[per.mean()]])


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "mul": _fw_mul,
    "div": _fw_div,
    "relu": lambda n, a: np.maximum(a.value, 0.0),
    "sigmoid": lambda n, a: _sigmoid(a.value),
    "abs": lambda n, a: np.abs(a.value),
    "sum": lambda n, a: np.array([[a.value.sum()]]),
    "log": _fw_log,
    "scale": lambda n, a: n.attrs["c"] * a.value,
    "transpose": lambda n, a: a.value.T,
    "bce_logits": _fw_bce,
}


# -- backward rules: return one gradient (or None) per parent -----------------

def _bw_matmul(node, g, a, b):
    return g @ b.value.T, a.value.T @ g


def _bw_add(node, g, a, b):
    return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)


def _bw_mul(node, g, a, b):
    return (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape),
    )


def _bw_div(node, g, a, b):
    den = b.value
    if node.attrs.get("zero_safe"):
        zero = den == 0.0
        if zero.any():
            den = np.where(zero, 1.0, den)
            g = np.where(zero, 0.0, g)
    ga = g / den
    gb = -g * a.value / (den * den)
    return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)


def _bw_log(node, g, a):
    floor = node.attrs.get("floor")
    if floor is not None:
        above = a.value > floor
        return (np.where(above, g / np.where(above, a.value, 1.0), 0.0),)
    return (g / a.value,)


def _bw_bce(node, g, z, y):
    n = z.value.size
    return g * (_sigmoid(z.value) - y.value) / n, -g * z.value / n


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "div": _bw_div,
    "relu": lambda n, g, a: (g * (a.value > 0.0),),
    "sigmoid": lambda n, g, a: (g * n.value * (1.0 - n.value),),
    # sign(0) == 0: a zero entry receives no push from its own magnitude
    "abs": lambda n, g, a: (g * np.sign(a.value),),
    "sum": lambda n, g, a: (np.full(a.value.shape, g[0, 0]),),
    "log": _bw_log,
    "scale": lambda n, g, a: (n.attrs["c"] * g,),
    "transpose": lambda n, g, a: (g.T,),
    "bce_logits": _bw_bce,
}


class Tape:
    """Recorded computation graph with named leaves and one scalar exit."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, Node] = {}
        self.exit: Node | None = None
        self._evaluated = False

    # -- graph construction --------------------------------------------------

    def leaf(self, name: str, value=None, *, param: bool = True) -> Node:
        """Create a named leaf. Parameter leaves receive gradients in backward."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf name {name!r}")
        node = Node("input", (), name)
        node.is_param = param
        if value is not None:
            node.value = _as_matrix(value)
        self.nodes.append(node)
        self.leaves[name] = node
        return node

    def constant(self, name: str, value) -> Node:
        return self.leaf(name, value, param=False)

    def _op(self, kind: str, *parents: Node, **attrs) -> Node:
        for p in parents:
            if not isinstance(p, Node):
                raise TypeError(f"{kind}: expected Node operands, got {type(p).__name__}")
        node = Node(kind, parents, f"{kind}#{len(self.nodes)}", attrs)
        self.nodes.append(node)
        return node

    def matmul(self, a, b):
        return self._op("matmul", a, b)

    def add(self, a, b):
        """Elementwise sum with numpy broadcasting."""
        return self._op("add", a, b)

    def mul(self, a, b):
        return self._op("mul", a, b)

    def div(self, a, b, *, zero_safe: bool = False):
        """Elementwise quotient. With ``zero_safe``, x/0 is 0 and passes no gradient."""
        return self._op("div", a, b, zero_safe=zero_safe)

    def relu(self, a):
        return self._op("relu", a)

    def sigmoid(self, a):
        return self._op("sigmoid", a)

    def abs(self, a):
        return self._op("abs", a)

    def sum(self, a):
        """Reduce every entry to a (1, 1) scalar."""
        return self._op("sum", a)

    def log(self, a, *, floor: float | None = None):
        """Natural log; with ``floor`` evaluates log(max(a, floor)), zero slope below."""
        return self._op("log", a, floor=floor)

    def scale(self, a, c: float):
        return self._op("scale", a, c=float(c))

    def transpose(self, a):
        return self._op("transpose", a)

    def bce_logits(self, z, y):
        """Mean binary cross-entropy of sigmoid(z) against targets y."""
        return self._op("bce_logits", z, y)

    def set_exit(self, node: Node) -> None:
        if node not in self.nodes:
            raise ValueError("exit node does not belong to this tape")
        self.exit = node
        self._evaluated = False

    # -- execution -------------------------------------------------------------

    def bind(self, name: str, value) -> None:
        self.leaves[name].value = _as_matrix(value)
        self._evaluated = False

    @property
    def params(self) -> list[Node]:
        return [n for n in self.leaves.values() if n.is_param]

    def forward(self) -> float:
        return forward(self)

    def backward(self) -> dict[str, np.ndarray]:
        return backward(self)


def forward(tape: Tape) -> float:
    """Evaluate every node; return the exit scalar."""
    if tape.exit is None:
        raise TapeStateError("tape has no exit node")
    for node in tape.nodes:
        if node.kind == "input":
            if node.value is None:
                raise TapeStateError(f"leaf {node.name!r} is not bound")
            continue
        node.value = _FORWARD[node.kind](node, *node.parents)
    if tape.exit.value.shape != (1, 1):
        raise DimensionError(f"exit {tape.exit.name} has shape {tape.exit.value.shape}, expected (1, 1)")
    tape._evaluated = True
    return float(tape.exit.value[0, 0])


def backward(tape: Tape) -> dict[str, np.ndarray]:
    """Gradient of the exit scalar with respect to every parameter leaf."""
    if not tape._evaluated:
        raise TapeStateError("backward called before forward on the current bindings")
    for node in tape.nodes:
        node.grad = None
    tape.exit.grad = np.ones((1, 1))
    # creation order is a topological order
    for node in reversed(tape.nodes):
        if node.grad is None or not node.parents:
            continue
        contributions = _BACKWARD[node.kind](node, node.grad, *node.parents)
        for parent, g in zip(node.parents, contributions):
            if g is None:
                continue
            # gradients are never updated in place, so sharing arrays is safe
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    out = {}
    for node in tape.params:
        out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def abs_with_subgradient(x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(|x|, sign(x))`` with sign(0) = 0, the local gradient used by the tape."""
    arr = np.asarray(x, dtype=np.float64)
    return np.abs(arr), np.sign(arr)
