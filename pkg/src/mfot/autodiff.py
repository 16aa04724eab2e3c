"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations in topological order; backward() walks it
in reverse, accumulating adjoints. Constants (plain ndarrays / floats) can be
mixed freely with Vars and do not land on the tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    """A tape node: value plus adjoint accumulator."""

    __slots__ = ("value", "grad", "parents", "vjps", "index", "tape")

    def __init__(self, value: Array, tape: "Tape", parents: tuple = (),
                 vjps: tuple = (), index: int = -1):
        self.value = value
        self.grad: Array | None = None
        self.parents = parents
        self.vjps = vjps
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return self.tape.record(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return add(self, -_value(other)) if not isinstance(other, Var) else add(self, -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / _value(other))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)


def _value(x) -> Array:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitive operations for one evaluation."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._params: list[Var] = []

    def record(self, value: Array, partials: Sequence[tuple[Var, Callable]]) -> Var:
        value = np.asarray(value, dtype=np.float64)
        parents = tuple(p for p, _ in partials)
        vjps = tuple(fn for _, fn in partials)
        v = Var(value, self, parents, vjps, index=len(self.nodes))
        self.nodes.append(v)
        return v

    def constant(self, value) -> Var:
        return self.record(_value(value), [])

    def param(self, value: Array) -> Var:
        """A leaf whose adjoint is collected by grad_params (zero if unused)."""
        v = self.constant(value)
        self._params.append(v)
        return v

    @property
    def params(self) -> list[Var]:
        return self._params

    def backward(self, root: Var) -> None:
        """Seed the root with adjoint 1 and sweep the tape in reverse."""
        if root.value.size != 1:
            raise ContractError("backward pass requires a scalar root")
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad = parent.grad + _unbroadcast(contrib, parent.value.shape)

    def grad_params(self, root: Var) -> Array:
        """Flat gradient of a scalar root w.r.t. all registered parameters."""
        self.backward(root)
        pieces = []
        for p in self._params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            pieces.append(np.ravel(g))
        return np.concatenate(pieces) if pieces else np.zeros(0)

    def find_nonfinite(self) -> int | None:
        """Index of the first node with a non-finite value, scanning forward."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                return node.index
        return None


def check_finite(tape: Tape, v: Var, context: str = "forward pass") -> Var:
    if not np.all(np.isfinite(v.value)):
        idx = tape.find_nonfinite()
        raise NumericalError(f"non-finite value in {context} at tape node {idx}")
    return v


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("operation needs at least one Var operand")


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    partials = []
    if isinstance(a, Var):
        partials.append((a, lambda g: g))
    if isinstance(b, Var):
        partials.append((b, lambda g: g))
    return tape.record(_value(a) + _value(b), partials)


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    partials = []
    if isinstance(a, Var):
        partials.append((a, lambda g: g * bv))
    if isinstance(b, Var):
        partials.append((b, lambda g: g * av))
    return tape.record(av * bv, partials)


def reciprocal(a: Var) -> Var:
    out = 1.0 / a.value
    return a.tape.record(out, [(a, lambda g, o=out: -g * o * o)])


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    partials = []
    if isinstance(a, Var):
        partials.append((a, lambda g: g @ bv.T))
    if isinstance(b, Var):
        partials.append((b, lambda g: av.T @ g))
    return tape.record(av @ bv, partials)


def power(a: Var, exponent: float) -> Var:
    av = a.value
    out = av ** exponent
    return a.tape.record(out, [(a, lambda g: g * exponent * av ** (exponent - 1))])


def square(a: Var) -> Var:
    return a.tape.record(a.value * a.value, [(a, lambda g: 2.0 * g * a.value)])


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, [(a, lambda g, o=out: g * 0.5 / o)])


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape.record(out, [(a, lambda g, o=out: g * o)])


def log(a: Var) -> Var:
    return a.tape.record(np.log(a.value), [(a, lambda g: g / a.value)])


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, [(a, lambda g, o=out: g * (1.0 - o * o))])


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record(out, [(a, lambda g, o=out: g * o * (1.0 - o))])


def softplus(a: Var) -> Var:
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 1.0 / (1.0 + np.exp(-av))
    return a.tape.record(out, [(a, lambda g: g * sig)])


def relu(a: Var) -> Var:
    mask = (a.value > 0).astype(np.float64)
    return a.tape.record(a.value * mask, [(a, lambda g: g * mask)])


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T, [(a, lambda g: g.T)])


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.value.shape).copy()

    return a.tape.record(out, [(a, vjp)])


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    partials = []
    for k, p in enumerate(parts):
        if isinstance(p, Var):
            lo, hi = offsets[k], offsets[k + 1]

            def vjp(g, lo=lo, hi=hi):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return g[tuple(sl)]

            partials.append((p, vjp))
    return tape.record(out, partials)


def take(a: Var, index, axis: int = -1) -> Var:
    """Slice along one axis (index may be an int slice or slice object)."""
    sl = [slice(None)] * a.value.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = a.value[sl]

    def vjp(g):
        full = np.zeros_like(a.value)
        full[sl] = g
        return full

    return a.tape.record(out, [(a, vjp)])
