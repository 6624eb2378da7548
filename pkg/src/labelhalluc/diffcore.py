"""Minimal reverse-mode autodiff over dense float64 arrays of rank <= 2.

Every intermediate is a :class:`Node`.  Parameters are leaves created with
:func:`parameter`; anything built from them records a backward closure and is
differentiated by :meth:`Node.backward`.  Leaf gradients *accumulate* across
backward passes until the optimizer clears them, which is what lets one
training step combine several separately-masked loss terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError, NumericError

__all__ = [
    "Node",
    "parameter",
    "constant",
    "matmul",
    "add",
    "mul",
    "relu",
    "softmax",
    "log_softmax",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "kd_loss",
    "OptimizerState",
    "sgd_step",
    "zero_grad",
    "numeric_grad",
    "gradcheck",
    "softmax_np",
    "log_softmax_np",
]


class Node:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), op="leaf", backward=None, requires_grad=None):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise DimensionError(f"{op}: rank {value.ndim} > 2 is not supported")
        if not np.isfinite(value).all():
            raise NumericError(f"{op}: non-finite value in forward pass")
        self.value = value
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_node(other), -1.0))

    def backward(self):
        """Backpropagate from this scalar node into every reachable leaf."""
        if self.value.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        pending = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(value):
    """Trainable leaf owning a private copy of ``value``."""
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True)


def constant(value):
    return Node(value, requires_grad=False)


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None)

    return Node(av @ bv, (a, b), "matmul", backward)


def add(a, b):
    """Elementwise sum; ``b`` may broadcast over rows (e.g. a bias vector)."""
    a, b = _as_node(a), _as_node(b)
    try:
        out = np.add(a.value, b.value)
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out.shape != a.shape and out.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Node(out, (a, b), "add", backward)


def mul(a, b):
    """Scale by a Python number, or multiply two same-shape nodes elementwise."""
    a = _as_node(a)
    if not isinstance(b, Node):
        c = float(b)

        def backward_scalar(g):
            return (g * c,)

        return Node(a.value * c, (a,), "scale", backward_scalar)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value

    def backward(g):
        return g * bv, g * av

    return Node(av * bv, (a, b), "mul", backward)


def relu(a):
    a = _as_node(a)
    active = a.value > 0

    def backward(g):
        return (g * active,)

    return Node(np.where(active, a.value, 0.0), (a,), "relu", backward)


def softmax_np(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_nan(a, op):
    if np.isnan(a.value).any():
        raise NumericError(f"{op}: NaN input")


def softmax(logits):
    """Row-wise softmax (max-subtracted)."""
    logits = _as_node(logits)
    _check_nan(logits, "softmax")
    s = softmax_np(logits.value)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Node(s, (logits,), "softmax", backward)


def log_softmax(logits):
    logits = _as_node(logits)
    _check_nan(logits, "log_softmax")
    ls = log_softmax_np(logits.value)
    s = np.exp(ls)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Node(ls, (logits,), "log_softmax", backward)


def sum_all(a):
    a = _as_node(a)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(), (a,), "sum", backward)


def mean_all(a):
    a = _as_node(a)
    return mul(sum_all(a), 1.0 / max(a.value.size, 1))


def _check_logits(logits, op):
    if logits.value.ndim != 2:
        raise DimensionError(f"{op}: logits must be n x c, got {logits.shape}")
    _check_nan(logits, op)


def cross_entropy(logits, labels):
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = _as_node(logits)
    _check_logits(logits, "cross_entropy")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but labels have shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    ls = log_softmax_np(logits.value)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def backward(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Node(loss, (logits,), "cross_entropy", backward)


def kd_loss(student_logits, teacher_logits, temperature):
    """``T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T))``.

    The teacher is a constant; no gradient flows into it.
    """
    if not temperature > 0:
        raise ConfigError(f"kd_loss: temperature must be > 0, got {temperature}")
    student = _as_node(student_logits)
    _check_logits(student, "kd_loss")
    teacher = np.asarray(teacher_logits.value if isinstance(teacher_logits, Node)
                         else teacher_logits, dtype=np.float64)
    if teacher.shape != student.shape:
        raise DimensionError(f"kd_loss: student {student.shape} vs teacher {teacher.shape}")
    if np.isnan(teacher).any():
        raise NumericError("kd_loss: NaN teacher logits")
    t = float(temperature)
    n = student.shape[0]
    log_pt = log_softmax_np(teacher / t)
    pt = np.exp(log_pt)
    log_ps = log_softmax_np(student.value / t)
    # p*log p -> 0 where teacher mass underflows to zero
    kl_rows = np.where(pt > 0, pt * (log_pt - log_ps), 0.0).sum(axis=1)
    loss = t * t * kl_rows.mean()

    def backward(g):
        return ((np.exp(log_ps) - pt) * (g * t / n),)

    return Node(max(loss, 0.0), (student,), "kd_loss", backward)


@dataclass
class OptimizerState:
    """SGD hyper-parameters plus one velocity buffer per parameter."""

    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def sgd_step(params, state):
    """One momentum SGD update, then clear the gradients.

    ``v <- momentum * v + (g + weight_decay * theta)``; ``theta <- theta - lr * v``.
    """
    params = list(params)
    if not state.velocity:
        state.velocity = [np.zeros_like(p.value) for p in params]
    if len(state.velocity) != len(params):
        raise ContractViolation(
            f"optimizer holds {len(state.velocity)} velocity buffers for {len(params)} params")
    for i, (p, v) in enumerate(zip(params, state.velocity)):
        if p.grad is None:
            raise ContractViolation(f"parameter {i} {p.shape} has no gradient; run backward first")
        if v.shape != p.shape:
            raise ContractViolation(f"velocity {v.shape} does not match parameter {p.shape}")
    for p, v in zip(params, state.velocity):
        g = p.grad + state.weight_decay * p.value if state.weight_decay else p.grad
        v *= state.momentum
        v += g
        p.value -= state.learning_rate * v
        p.grad = None


def zero_grad(params):
    for p in params:
        p.grad = None


def numeric_grad(fn, param, eps=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``param.value``."""
    out = np.zeros_like(param.value)
    flat = param.value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().value)
        flat[i] = orig - eps
        down = float(fn().value)
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def gradcheck(fn, params, eps=1e-5):
    """Largest relative error between backprop and central differences.

    Per parameter the error is ``|analytic - numeric| / max(|analytic|, |numeric|)``
    in the Frobenius norm (floored at 1e-12 to survive all-zero gradients).
    """
    zero_grad(params)
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        numeric = numeric_grad(fn, p, eps)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    zero_grad(params)
    return worst
