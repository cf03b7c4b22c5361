"""Reverse-mode differentiation on a tape of array-valued nodes.

Every operation appends a node to the tape that created its operands, so the
tape is always in topological order. ``Tape.gradient`` sweeps it backwards
once and hands back adjoints for the requested leaves.

Nodes hold numpy arrays rather than scalars; a scalar graph is the special
case of 0-d arrays, and batching keeps KAN training within desk-scale time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, NumericalError, StructuralError

__all__ = [
    "Tape",
    "Var",
    "AdamState",
    "DropoutMask",
    "adam_step",
    "apply_dropout",
    "draw_dropout_mask",
    "einsum",
    "exp",
    "log",
    "softplus",
    "silu",
    "relu",
    "clamp_zero_below",
    "absolute",
    "sum_all",
    "mean",
    "concat",
    "input_sensitivity",
]


class Var:
    """A node on a :class:`Tape`. Arithmetic operators record new nodes."""

    __slots__ = ("tape", "index", "value", "parents", "backward_fn", "requires_grad")

    __array_priority__ = 1000

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __len__(self):
        return len(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(self.tape.lift(other)))

    def __rsub__(self, other):
        return add(self.tape.lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


class Tape:
    """Records operations in creation order and runs the reverse sweep.

    Adjoints live in a scratch list that exists only for the duration of a
    :meth:`gradient` call, so a tape never carries stale adjoints between
    backward passes.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True) -> Var:
        """Register a differentiable input (parameter or data coordinate)."""
        return Var(self, value, requires_grad=requires_grad)

    def constant(self, value) -> Var:
        return Var(self, value, requires_grad=False)

    def lift(self, value) -> Var:
        if isinstance(value, Var):
            if value.tape is not self:
                raise StructuralError("operand belongs to a different tape")
            return value
        return self.constant(value)

    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Return d(output)/d(leaf) for every leaf in ``wrt``.

        ``output`` must be a scalar node recorded on this tape. Leaves that the
        output does not depend on get zero gradients.
        """
        if output.tape is not self or output.index >= len(self.nodes) or self.nodes[output.index] is not output:
            raise StructuralError("output node was not recorded on this tape")
        if output.value.size != 1:
            raise ArgumentError(f"backward needs a scalar output, got shape {output.value.shape}")
        for w in wrt:
            if w.tape is not self:
                raise StructuralError("gradient requested for a node from another tape")

        adjoints: list = [None] * (output.index + 1)
        adjoints[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            node = self.nodes[i]
            g = adjoints[i]
            if g is None or node.backward_fn is None:
                continue
            contributions = node.backward_fn(g)
            for parent, contrib in zip(node.parents, contributions):
                if parent.index >= i:
                    raise StructuralError(
                        f"node {i} depends on node {parent.index}, which is not earlier on the tape"
                    )
                if contrib is None:
                    continue
                if adjoints[parent.index] is None:
                    adjoints[parent.index] = contrib
                else:
                    adjoints[parent.index] = adjoints[parent.index] + contrib

        grads = []
        for w in wrt:
            g = adjoints[w.index] if w.index <= output.index else None
            grads.append(np.zeros_like(w.value) if g is None else np.array(g, dtype=np.float64))
        return grads


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Var):
            return op.tape
    raise StructuralError("at least one operand must be a tape node")


def _node(tape, value, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Var(tape, value)
    return Var(tape, value, parents, backward_fn, requires_grad=True)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _node(tape, a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return _node(a.tape, -a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    return _node(
        tape,
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def power(a: Var, exponent) -> Var:
    if isinstance(exponent, Var):
        raise ArgumentError("power supports constant exponents only")
    p = float(exponent)
    av = a.value
    return _node(a.tape, av**p, (a,), lambda g: (g * p * av ** (p - 1.0),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _node(a.tape, out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return _node(a.tape, np.log(av), (a,), lambda g: (g / av,))


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a: Var) -> Var:
    av = a.value
    out = np.logaddexp(0.0, av)
    return _node(a.tape, out, (a,), lambda g: (g * _logistic(av),))


def silu(a: Var) -> Var:
    """x * logistic(x), the fixed base activation on KAN edges."""
    av = a.value
    s = _logistic(av)
    return _node(a.tape, av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


def clamp_zero_below(a: Var) -> Var:
    """max(a, 0). The subgradient at exactly 0 is taken as 0."""
    av = a.value
    return _node(a.tape, np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


relu = clamp_zero_below


def absolute(a: Var) -> Var:
    av = a.value
    return _node(a.tape, np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return _node(a.tape, a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    n = a.value.size
    if n == 0:
        raise ArgumentError("mean of an empty node")
    return sum_all(a) * (1.0 / n)


def take(a: Var, key) -> Var:
    shape = a.value.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _node(a.tape, a.value[key], (a,), backward)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return _node(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*parts)
    parts = [tape.lift(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        tape,
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def einsum(subscripts: str, a, b) -> Var:
    """Two-operand einsum. Each operand index must appear in the other operand or the output."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    inputs, out = subscripts.replace(" ", "").split("->")
    sa, sb = inputs.split(",")
    for mine, other in ((sa, sb), (sb, sa)):
        for ch in mine:
            if ch not in other and ch not in out:
                raise ArgumentError(f"index {ch!r} in {subscripts!r} is summed within one operand")
    av, bv = a.value, b.value
    value = np.einsum(subscripts, av, bv, optimize=True)
    return _node(
        tape,
        value,
        (a, b),
        lambda g: (
            np.einsum(f"{out},{sb}->{sa}", g, bv, optimize=True),
            np.einsum(f"{out},{sa}->{sb}", g, av, optimize=True),
        ),
    )


def custom(parents: Sequence[Var], value: np.ndarray, backward_fn: Callable) -> Var:
    """Record an operation whose local vector-Jacobian product is supplied by the caller."""
    tape = _tape_of(*parents)
    return _node(tape, value, tuple(parents), backward_fn)


# ---------------------------------------------------------------------------
# input sensitivity


def input_sensitivity(model, x, feature_j: int) -> float:
    """Exact reverse-mode df/dx_j of ``model`` at the single input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= feature_j < x.shape[-1]:
        raise ArgumentError(f"feature index {feature_j} out of range for input width {x.shape[-1]}")
    return float(input_gradients(model, x.reshape(1, -1))[0, feature_j])


def input_gradients(model, X) -> np.ndarray:
    """Per-row input gradients of an evaluation-mode model, shape (n, d)."""
    tape = Tape()
    xv = tape.leaf(np.asarray(X, dtype=np.float64))
    params = model.param_nodes(tape, requires_grad=False)
    out = model.forward(tape, xv, params)
    (gx,) = tape.gradient(sum_all(out), [xv])
    return gx


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, learning_rate: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Inputs are left untouched; a non-finite gradient rejects the whole update.
    """
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ArgumentError("params, grads and optimizer state disagree in length")
    offset = 0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ArgumentError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NumericalError(f"non-finite gradient at parameter index {offset + int(bad[0])}")
        offset += p.size

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.epsilon)


# ---------------------------------------------------------------------------
# dropout


@dataclass(frozen=True)
class DropoutMask:
    keep: np.ndarray
    rate: float
    draw_id: int = 0
    scale: float = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ArgumentError(f"dropout rate must lie in [0, 1), got {self.rate}")
        object.__setattr__(self, "scale", 1.0 / (1.0 - self.rate))

    @property
    def multiplier(self) -> np.ndarray:
        return self.keep * self.scale


def draw_dropout_mask(shape, rate: float, rng: np.random.Generator, draw_id: int = 0) -> DropoutMask:
    if not 0.0 <= rate < 1.0:
        raise ArgumentError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return DropoutMask(np.ones(shape, dtype=bool), 0.0, draw_id)
    return DropoutMask(rng.random(shape) >= rate, rate, draw_id)


def apply_dropout(activations, mask: DropoutMask | None, training: bool = True):
    """Zero dropped entries and rescale survivors; identity outside training."""
    if mask is None or not training:
        return activations
    value = activations.value if isinstance(activations, Var) else np.asarray(activations)
    if mask.keep.shape != value.shape:
        raise ArgumentError(f"mask shape {mask.keep.shape} does not match activations {value.shape}")
    if mask.rate == 0.0:
        return activations
    if isinstance(activations, Var):
        return mul(activations, mask.multiplier)
    return value * mask.multiplier
