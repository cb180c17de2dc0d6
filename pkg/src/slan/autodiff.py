"""Reverse-mode automatic differentiation on a flat tape of numpy tensors.

Values are float64 numpy arrays (vectors or small weight blocks).  Every
operation appends one node to a Tape; ``Tape.backward`` walks the tape in
reverse appending adjoints.  The tape is rebuilt per training instance, so
graphs whose topology changes from instance to instance (as switch-scheduled
rollouts do) need no padding or masking.

Gradient accumulation is additive: a node used by several consumers receives
the sum of their adjoint contributions.  Backward never mutates a cached
forward value, and a tape can run backward exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

__all__ = [
    "AutodiffError",
    "GradCheckReport",
    "Node",
    "Parameter",
    "Tape",
    "accumulate",
    "add",
    "check_gradients",
    "concat",
    "cross_entropy",
    "hadamard",
    "matmul",
    "scale",
    "set_finite_checks",
    "sigmoid",
    "sin",
    "softmax",
    "stack_max",
    "stack_mean",
    "sub",
    "tanh",
    "weighted_sum",
]


class AutodiffError(RuntimeError):
    """Structural misuse of the tape, or a non-finite value on it."""


_check_finite = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-node finiteness validation; returns the previous setting."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _check_finite


class Parameter:
    """Named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    """One tape entry: a value, a lazily allocated adjoint, a backward hook."""

    __slots__ = ("tape", "value", "grad", "idx", "_bwd")

    def __init__(self, tape: "Tape", value: np.ndarray, idx: int,
                 bwd: Callable[[np.ndarray], None] | None) -> None:
        self.tape = tape
        self.value = value
        self.grad: np.ndarray | None = None
        self.idx = idx
        self._bwd = bwd

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return hadamard(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __getitem__(self, key) -> "Node":
        return _take(self, key)

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, shape={self.value.shape})"


def accumulate(node: Node, grad: np.ndarray) -> None:
    """Add an adjoint contribution to ``node``.

    The first contribution is copied into a buffer the node owns; later
    ones add in place.  Incoming arrays are never retained or mutated.
    """
    if node.grad is None:
        node.grad = np.array(grad)
    else:
        node.grad += grad


class Tape:
    """Append-only node sequence in topological (construction) order."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._param_leaves: dict[int, tuple[Parameter, Node]] = {}
        self._ran_backward = False

    def __len__(self) -> int:
        return len(self._nodes)

    def custom(self, value: np.ndarray,
               bwd: Callable[[np.ndarray], None] | None,
               label: str = "custom", check: bool = False) -> Node:
        """Append a raw node; ``bwd`` receives the node's adjoint.

        Finiteness is validated where divergence actually surfaces: nodes
        created with ``check=True`` (kernel outputs, losses).  Elementwise
        ops cannot produce non-finite values from finite inputs, and
        anything else taints the loss node, so the guard still fires.
        """
        if check and _check_finite and not np.isfinite(value).all():
            raise AutodiffError(f"non-finite value produced by {label} "
                                f"(node #{len(self._nodes)})")
        node = Node(self, value, len(self._nodes), bwd)
        self._nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        """Constant input; receives an adjoint but propagates nowhere."""
        arr = np.asarray(value, dtype=np.float64)
        return self.custom(arr, None, label="leaf")

    def param(self, p: Parameter) -> Node:
        """Leaf bound to ``p``; one node per parameter per tape."""
        cached = self._param_leaves.get(id(p))
        if cached is not None:
            return cached[1]
        node = self.custom(p.value, None, label=f"param:{p.name}")
        self._param_leaves[id(p)] = (p, node)
        return node

    def backward(self, root: Node) -> None:
        """Propagate d(root)/d(node) to every node reachable from ``root``.

        ``root`` must be a size-1 node on this tape.  A second call without
        building a fresh tape is an error: adjoints would silently double.
        """
        if root.tape is not self:
            raise AutodiffError("root node belongs to a different tape")
        if self._ran_backward:
            raise AutodiffError("backward already ran on this tape; build a new tape")
        if root.value.size != 1:
            raise AutodiffError(f"backward root must be scalar, got shape {root.value.shape}")
        self._ran_backward = True
        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes[: root.idx + 1]):
            if node.grad is not None and node._bwd is not None:
                node._bwd(node.grad)

    def param_grads(self) -> Iterator[tuple[Parameter, np.ndarray]]:
        """Yield (parameter, adjoint) pairs for parameters touched by this tape.

        Parameters never reached by backward yield zeros.
        """
        for p, leaf in self._param_leaves.values():
            if leaf.grad is None:
                yield p, np.zeros_like(p.value)
            else:
                yield p, leaf.grad


def _as_vector(x: np.ndarray, label: str) -> None:
    if x.ndim != 1:
        raise AutodiffError(f"{label} expects a 1-D value, got shape {x.shape}")


def _same_tape(a: Node, b: Node) -> Tape:
    if a.tape is not b.tape:
        raise AutodiffError("operands live on different tapes")
    return a.tape


def add(a: Node, b: Node) -> Node:
    t = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise AutodiffError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

    def bwd(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    return t.custom(a.value + b.value, bwd, label="add")


def sub(a: Node, b: Node) -> Node:
    t = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise AutodiffError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")

    def bwd(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, -g)

    return t.custom(a.value - b.value, bwd, label="sub")


def hadamard(a: Node, b: Node) -> Node:
    t = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise AutodiffError(f"hadamard shape mismatch: {a.value.shape} vs {b.value.shape}")

    def bwd(g: np.ndarray) -> None:
        accumulate(a, g * b.value)
        accumulate(b, g * a.value)

    return t.custom(a.value * b.value, bwd, label="hadamard")


def scale(x: Node, k: float) -> Node:
    k = float(k)

    def bwd(g: np.ndarray) -> None:
        accumulate(x, g * k)

    return x.tape.custom(x.value * k, bwd, label="scale")


def matmul(a: Node, b: Node) -> Node:
    """(r,k) @ (k,c) -> (r,c), or (r,k) @ (k,) -> (r,)."""
    t = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim not in (1, 2) or av.shape[1] != bv.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    if bv.ndim == 1:
        def bwd(g: np.ndarray) -> None:
            accumulate(a, np.outer(g, bv))
            accumulate(b, av.T @ g)
    else:
        def bwd(g: np.ndarray) -> None:
            accumulate(a, g @ bv.T)
            accumulate(b, av.T @ g)

    return t.custom(av @ bv, bwd, label="matmul")


def concat(nodes: list[Node]) -> Node:
    if not nodes:
        raise AutodiffError("concat needs at least one node")
    t = nodes[0].tape
    for n in nodes:
        _same_tape(nodes[0], n)
        _as_vector(n.value, "concat")
    sizes = [n.value.shape[0] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray) -> None:
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            accumulate(n, g[lo:hi])

    return t.custom(np.concatenate([n.value for n in nodes]), bwd, label="concat")


def _take(x: Node, key) -> Node:
    """Row extraction (int key, ndim >= 2) or 1-D range slice."""
    if isinstance(key, (int, np.integer)):
        if x.value.ndim < 2:
            raise AutodiffError("integer indexing needs a node of ndim >= 2")
    elif isinstance(key, slice):
        if x.value.ndim != 1:
            raise AutodiffError("slice indexing is defined for 1-D nodes only")
        if key.step not in (None, 1):
            raise AutodiffError("slice step must be 1")
    else:
        raise AutodiffError(f"unsupported index {key!r}")

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(x.value)
        full[key] = g
        accumulate(x, full)

    return x.tape.custom(x.value[key], bwd, label="take")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Node) -> Node:
    s = _stable_sigmoid(x.value)

    def bwd(g: np.ndarray) -> None:
        accumulate(x, g * s * (1.0 - s))

    return x.tape.custom(s, bwd, label="sigmoid")


def tanh(x: Node) -> Node:
    v = np.tanh(x.value)

    def bwd(g: np.ndarray) -> None:
        accumulate(x, g * (1.0 - v * v))

    return x.tape.custom(v, bwd, label="tanh")


def sin(x: Node) -> Node:
    cv = np.cos(x.value)

    def bwd(g: np.ndarray) -> None:
        accumulate(x, g * cv)

    return x.tape.custom(np.sin(x.value), bwd, label="sin")


def softmax(x: Node) -> Node:
    """Stable softmax over a 1-D node; output sums to 1."""
    _as_vector(x.value, "softmax")
    z = x.value - x.value.max()
    e = np.exp(z)
    p = e / e.sum()

    def bwd(g: np.ndarray) -> None:
        accumulate(x, p * (g - float(np.dot(g, p))))

    return x.tape.custom(p, bwd, label="softmax")


def cross_entropy(logits: Node, label: int) -> Node:
    """Fused log-softmax negative log-likelihood; returns a (1,) node."""
    _as_vector(logits.value, "cross_entropy")
    label = int(label)
    if not 0 <= label < logits.value.shape[0]:
        raise AutodiffError(f"label {label} out of range for {logits.value.shape[0]} logits")
    m = logits.value.max()
    z = logits.value - m
    e = np.exp(z)
    se = e.sum()
    p = e / se
    loss = np.array([m + np.log(se) - logits.value[label]])

    def bwd(g: np.ndarray) -> None:
        d = p.copy()
        d[label] -= 1.0
        accumulate(logits, g[0] * d)

    return logits.tape.custom(loss, bwd, label="cross_entropy", check=True)


def stack_mean(nodes: list[Node]) -> Node:
    """Elementwise mean of same-shape nodes, computed as a left fold of
    weight-scaled terms so that it coincides bit for bit with a uniformly
    weighted ``weighted_sum``."""
    if not nodes:
        raise AutodiffError("stack_mean needs at least one node")
    t = nodes[0].tape
    w = 1.0 / len(nodes)
    value = nodes[0].value * w
    for n in nodes[1:]:
        _same_tape(nodes[0], n)
        value = value + n.value * w

    def bwd(g: np.ndarray) -> None:
        for n in nodes:
            accumulate(n, g * w)

    return t.custom(value, bwd, label="stack_mean")


def stack_max(nodes: list[Node]) -> Node:
    """Elementwise maximum of same-shape nodes; ties split the adjoint evenly."""
    if not nodes:
        raise AutodiffError("stack_max needs at least one node")
    t = nodes[0].tape
    for n in nodes[1:]:
        _same_tape(nodes[0], n)
    value = np.maximum.reduce([n.value for n in nodes])

    def bwd(g: np.ndarray) -> None:
        hits = [(n.value == value) for n in nodes]
        count = np.add.reduce([h.astype(np.float64) for h in hits])
        for n, h in zip(nodes, hits):
            accumulate(n, g * h / count)

    return t.custom(value, bwd, label="stack_max")


def weighted_sum(weights: Node, nodes: list[Node]) -> Node:
    """sum_i weights[i] * nodes[i] over same-shape vector nodes."""
    if not nodes:
        raise AutodiffError("weighted_sum needs at least one node")
    t = _same_tape(weights, nodes[0])
    wv = weights.value
    if wv.shape != (len(nodes),):
        raise AutodiffError(f"weights shape {wv.shape} != ({len(nodes)},)")
    value = nodes[0].value * wv[0]
    for i, n in enumerate(nodes[1:], start=1):
        _same_tape(nodes[0], n)
        value = value + n.value * wv[i]

    def bwd(g: np.ndarray) -> None:
        accumulate(weights, np.array([float(np.dot(g, n.value)) for n in nodes]))
        for i, n in enumerate(nodes):
            accumulate(n, g * wv[i])

    return t.custom(value, bwd, label="weighted_sum")


@dataclass
class GradCheckReport:
    """Per-parameter finite-difference comparison of tape gradients."""

    tol: float
    per_param: dict[str, float]
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_err:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} (tol {self.tol:g})")


def check_gradients(build: Callable[[], Node], params: Iterable[Parameter],
                    h: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``build()`` against central finite differences.

    ``build`` must deterministically construct a fresh tape and return its
    scalar loss node.  Every element of every parameter is perturbed by
    ``+-h``; the relative error uses ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    params = list(params)
    root = build()
    root.tape.backward(root)
    analytic = {p.name: np.zeros_like(p.value) for p in params}
    for p, g in root.tape.param_grads():
        if p.name in analytic:
            analytic[p.name] = g

    def loss_value() -> float:
        node = build()
        return float(node.value.reshape(()))

    per_param: dict[str, float] = {}
    worst = (0.0, "", ())
    for p in params:
        flat = p.value.reshape(-1)
        g_ad = analytic[p.name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            g_fd = (up - down) / (2.0 * h)
            rel = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
            if rel > worst_here:
                worst_here = rel
            if rel > worst[0]:
                worst = (rel, p.name, np.unravel_index(i, p.value.shape))
        per_param[p.name] = worst_here
    return GradCheckReport(tol=tol, per_param=per_param, max_rel_err=worst[0],
                           worst_param=worst[1], worst_index=tuple(int(k) for k in worst[2]))
