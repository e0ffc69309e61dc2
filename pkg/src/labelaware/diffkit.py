"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`GradTape` records every primitive applied to its nodes; the
gradient of a scalar output is obtained by walking the record backwards.
All values are C-ordered float64 numpy arrays, which keeps central
finite-difference checks tight.

Subgradient conventions (deliberate, relied on by callers):

* ``relu``/``hinge`` return gradient 0 when the argument is exactly 0.
* ``reduce_max``/``reduce_min`` route the full gradient to the lowest
  index among tied extrema.
* ``arccos_clamped`` clips its input to ``[-1 + 1e-7, 1 - 1e-7]``; the
  gradient is 0 wherever the clip is active, so it stays bounded.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

ARCCOS_CLIP = 1e-7


class DiffError(ValueError):
    """Shape mismatch or invalid gradient request in a tape operation."""


class Node:
    """A value produced on a tape. Holds the concrete float64 array."""

    __slots__ = ("tape", "value", "idx")

    def __init__(self, tape: "GradTape", value: np.ndarray, idx: int):
        self.tape = tape
        self.value = value
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape


class GradTape:
    """Ordered record of primitive applications.

    Each record is ``(out_idx, input_idxs, forward_fn, backward_fn)``.
    ``forward_fn`` recomputes the output from the recorded inputs (used
    by :meth:`replay_forward`); ``backward_fn`` maps the adjoint of the
    output to adjoints of the inputs. A tape instance must not be shared
    across threads while recording.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._records: list[tuple[int, tuple[int, ...], Callable, Callable]] = []

    def _new_node(self, value: np.ndarray) -> Node:
        value = np.asarray(value, dtype=np.float64)
        idx = len(self._values)
        self._values.append(value)
        return Node(self, value, idx)

    def constant(self, value) -> Node:
        """A leaf node; gradients are accumulated but usually ignored."""
        return self._new_node(np.asarray(value, dtype=np.float64))

    # Inputs and constants are identical leaves; the distinction is
    # only which ones the caller asks gradients for.
    input = constant

    def record(self, out_value, inputs: Sequence[Node], forward_fn, backward_fn) -> Node:
        out = self._new_node(out_value)
        self._records.append((out.idx, tuple(n.idx for n in inputs), forward_fn, backward_fn))
        return out

    def backward(self, out: Node) -> dict[int, np.ndarray]:
        """Adjoints of every node reachable from ``out``, keyed by index."""
        if out.value.size != 1:
            raise DiffError(
                f"gradient requested for non-scalar output of shape {out.value.shape}"
            )
        adjoint: dict[int, np.ndarray] = {out.idx: np.ones_like(out.value)}
        for out_idx, in_idxs, _fwd, bwd in reversed(self._records):
            g = adjoint.get(out_idx)
            if g is None:
                continue
            for in_idx, contrib in zip(in_idxs, bwd(g)):
                if contrib is None:
                    continue
                prev = adjoint.get(in_idx)
                adjoint[in_idx] = contrib if prev is None else prev + contrib
        return adjoint

    def replay_forward(self) -> bool:
        """Re-run every recorded primitive; True iff outputs are bit-identical."""
        for out_idx, in_idxs, fwd, _bwd in self._records:
            redone = fwd(*(self._values[i] for i in in_idxs))
            if not np.array_equal(redone, self._values[out_idx], equal_nan=True):
                return False
        return True


def _tape_of(*args) -> GradTape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise DiffError("at least one argument must be a tape Node")


def _lift(tape: GradTape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    try:
        out = a.value + b.value
    except ValueError:
        raise DiffError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return tape.record(
        out, (a, b), lambda x, y: x + y,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    try:
        out = a.value - b.value
    except ValueError:
        raise DiffError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
    return tape.record(
        out, (a, b), lambda x, y: x - y,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    try:
        out = a.value * b.value
    except ValueError:
        raise DiffError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    av, bv = a.value, b.value
    return tape.record(
        out, (a, b), lambda x, y: x * y,
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def divide(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    try:
        out = a.value / b.value
    except ValueError:
        raise DiffError(f"divide: shapes {a.shape} and {b.shape} do not broadcast")
    av, bv = a.value, b.value
    return tape.record(
        out, (a, b), lambda x, y: x / y,
        lambda g: (
            _unbroadcast(g / bv, a.shape),
            _unbroadcast(-g * av / (bv * bv), b.shape),
        ),
    )


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return a.tape.record(a.value * s, (a,), lambda x: x * s, lambda g: (g * s,))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return a.tape.record(
        np.where(mask, a.value, 0.0), (a,),
        lambda x: np.where(x > 0.0, x, 0.0), lambda g: (g * mask,),
    )


# The hinge max(0, .) is the same primitive; gradient at the kink is 0.
hinge = relu


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), np.tanh, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.record(
        out, (a,), lambda x: 1.0 / (1.0 + np.exp(-x)),
        lambda g: (g * out * (1.0 - out),),
    )


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), np.exp, lambda g: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    return a.tape.record(np.log(av), (a,), np.log, lambda g: (g / av,))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), np.sqrt, lambda g: (g / (2.0 * out),))


def arccos_clamped(a: Node) -> Node:
    """arccos of the input clipped to [-1 + 1e-7, 1 - 1e-7].

    Gradient is 0 wherever the clip is active, which bounds it by
    ~1/sqrt(2e-7) near the endpoints.
    """
    lo, hi = -1.0 + ARCCOS_CLIP, 1.0 - ARCCOS_CLIP
    clipped = np.clip(a.value, lo, hi)
    interior = (a.value > lo) & (a.value < hi)
    return a.tape.record(
        np.arccos(clipped), (a,),
        lambda x: np.arccos(np.clip(x, lo, hi)),
        lambda g: (np.where(interior, -g / np.sqrt(1.0 - clipped * clipped), 0.0),),
    )


# ---------------------------------------------------------------------------
# matrix / reduction primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DiffError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return tape.record(
        av @ bv, (a, b), lambda x, y: x @ y,
        lambda g: (g @ bv.T, av.T @ g),
    )


def transpose2d(a: Node) -> Node:
    if a.value.ndim != 2:
        raise DiffError(f"transpose2d: expected a matrix, got shape {a.shape}")
    return a.tape.record(
        a.value.T.copy(), (a,), lambda x: x.T.copy(), lambda g: (g.T.copy(),)
    )


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    old = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise DiffError(f"reshape: cannot view shape {old} as {shape}")
    return a.tape.record(
        out.copy(), (a,), lambda x: x.reshape(shape).copy(),
        lambda g: (g.reshape(old),),
    )


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    av = a.value
    if axis is None:
        return a.tape.record(
            np.add.reduce(av, axis=None), (a,),
            lambda x: np.add.reduce(x, axis=None),
            lambda g: (np.broadcast_to(g, av.shape).copy(),),
        )
    return a.tape.record(
        np.add.reduce(av, axis=axis), (a,),
        lambda x: np.add.reduce(x, axis=axis),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),),
    )


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    n = a.value.size if axis is None else a.value.shape[axis]
    if n == 0:
        raise DiffError("reduce_mean: empty reduction")
    return scale(reduce_sum(a, axis), 1.0 / n)


def _extreme(a: Node, axis: int | None, argfn, redfn, name: str) -> Node:
    av = a.value
    if av.size == 0:
        raise DiffError(f"{name}: empty input")
    if axis is None:
        flat_idx = int(argfn(av))  # lowest index on ties

        def bwd(g):
            z = np.zeros_like(av)
            z.flat[flat_idx] = g if np.ndim(g) == 0 else g.item()
            return (z,)

        return a.tape.record(redfn(av, axis=None), (a,), lambda x: redfn(x, axis=None), bwd)
    idx = argfn(av, axis=axis)

    def bwd_axis(g):
        z = np.zeros_like(av)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return a.tape.record(redfn(av, axis=axis), (a,), lambda x: redfn(x, axis=axis), bwd_axis)


def reduce_max(a: Node, axis: int | None = None) -> Node:
    """Max selection; gradient routes entirely to the lowest tied index."""
    return _extreme(a, axis, np.argmax, np.max, "reduce_max")


def reduce_min(a: Node, axis: int | None = None) -> Node:
    """Min selection; gradient routes entirely to the lowest tied index."""
    return _extreme(a, axis, np.argmin, np.min, "reduce_min")


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Per-row cross-entropy of softmax(logits) against integer labels.

    Returns a vector of length n for (n, V) logits. ``labels`` is a plain
    integer array, not a node.
    """
    labels = np.asarray(labels)
    lv = logits.value
    if lv.ndim != 2 or labels.shape != (lv.shape[0],):
        raise DiffError(
            f"softmax_cross_entropy: logits {logits.shape} incompatible with "
            f"labels {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= lv.shape[1]):
        raise DiffError("softmax_cross_entropy: label outside [0, V)")
    rows = np.arange(lv.shape[0])

    def fwd(x):
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        return lse - shifted[rows, labels]

    shifted = lv - lv.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    softmax = expv / expv.sum(axis=1, keepdims=True)

    def bwd(g):
        grad = softmax * g[:, None]
        grad[rows, labels] -= g
        return (grad,)

    return logits.tape.record(fwd(lv), (logits,), fwd, bwd)


# ---------------------------------------------------------------------------
# gather / structure primitives
# ---------------------------------------------------------------------------


def gather_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    av = a.value

    def bwd(g):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return a.tape.record(av[idx].copy(), (a,), lambda x: x[idx].copy(), bwd)


def take_pairs(a: Node, rows, cols) -> Node:
    """Vector of matrix entries a[rows[k], cols[k]]."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    av = a.value
    if av.ndim != 2:
        raise DiffError(f"take_pairs: expected a matrix, got shape {a.shape}")

    def bwd(g):
        z = np.zeros_like(av)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return a.tape.record(av[rows, cols].copy(), (a,), lambda x: x[rows, cols].copy(), bwd)


def concat_vec(parts: Sequence[Node]) -> Node:
    """Concatenate 1-D nodes."""
    if not parts:
        raise DiffError("concat_vec: no parts")
    tape = parts[0].tape
    sizes = [p.value.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return tape.record(
        np.concatenate([p.value.ravel() for p in parts]), parts,
        lambda *xs: np.concatenate([x.ravel() for x in xs]), bwd,
    )


def context_stack(a: Node, segments: Sequence[tuple[int, int]], c: int) -> Node:
    """Stack each row with its c left/right neighbours within its segment.

    ``a`` is (N, F); rows outside a segment contribute zeros, so row t of
    the output depends only on rows [t-c, t+c] of the same segment. The
    output is (N, (2c+1)*F) with neighbour offset -c first.
    """
    av = a.value
    if av.ndim != 2:
        raise DiffError(f"context_stack: expected a matrix, got shape {a.shape}")
    n, f = av.shape
    spans = [(int(s), int(e)) for s, e in segments]

    def fwd(x):
        out = np.zeros((n, (2 * c + 1) * f))
        for k in range(-c, c + 1):
            blk = slice((k + c) * f, (k + c + 1) * f)
            for s, e in spans:
                t0, t1 = max(s, s - k), min(e, e - k)
                if t1 > t0:
                    out[t0:t1, blk] = x[t0 + k:t1 + k]
        return out

    def bwd(g):
        gx = np.zeros_like(av)
        for k in range(-c, c + 1):
            blk = slice((k + c) * f, (k + c + 1) * f)
            for s, e in spans:
                t0, t1 = max(s, s - k), min(e, e - k)
                if t1 > t0:
                    gx[t0 + k:t1 + k] += g[t0:t1, blk]
        return (gx,)

    return a.tape.record(fwd(av), (a,), fwd, bwd)


def segment_mean(a: Node, segments: Sequence[tuple[int, int]]) -> Node:
    """Mean of the rows of each segment; (B, D) for B segments.

    Uses np.add.reduce per segment so the result for a segment does not
    depend on what else is in the batch.
    """
    av = a.value
    if av.ndim != 2:
        raise DiffError(f"segment_mean: expected a matrix, got shape {a.shape}")
    spans = [(int(s), int(e)) for s, e in segments]
    for s, e in spans:
        if e <= s:
            raise DiffError("segment_mean: empty segment")

    def fwd(x):
        return np.stack([np.add.reduce(x[s:e], axis=0) / (e - s) for s, e in spans])

    def bwd(g):
        gx = np.zeros_like(av)
        for i, (s, e) in enumerate(spans):
            gx[s:e] += g[i] / (e - s)
        return (gx,)

    return a.tape.record(fwd(av), (a,), fwd, bwd)


# ---------------------------------------------------------------------------
# graph evaluation
# ---------------------------------------------------------------------------

Graph = Callable[[Mapping[str, Node]], Node]


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Pure forward evaluation of a graph over named inputs."""
    tape = GradTape()
    nodes = {k: tape.input(v) for k, v in inputs.items()}
    return graph(nodes).value


def evaluate_with_gradients(
    graph: Graph, inputs: Mapping[str, np.ndarray], wrt
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Forward value plus gradients of the scalar output for each name in wrt."""
    tape = GradTape()
    nodes = {k: tape.input(v) for k, v in inputs.items()}
    out = graph(nodes)
    adjoint = tape.backward(out)
    grads = {}
    for name in wrt:
        if name not in nodes:
            raise DiffError(f"gradient requested for unknown input {name!r}")
        node = nodes[name]
        g = adjoint.get(node.idx)
        grads[name] = np.zeros_like(node.value) if g is None else np.broadcast_to(
            g, node.value.shape
        ).astype(np.float64, copy=True)
    return out.value, grads


def finite_difference_gradient(
    graph: Graph, inputs: Mapping[str, np.ndarray], wrt, eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, coordinate by coordinate."""
    if not 0.0 < eps <= 1e-2:
        raise DiffError(f"finite_difference_gradient: eps {eps} outside (0, 1e-2]")
    # Owned contiguous copies: the probe loop mutates entries in place.
    base = {k: np.array(v, dtype=np.float64, order="C") for k, v in inputs.items()}
    probe = evaluate(graph, base)
    if probe.size != 1:
        raise DiffError(
            f"finite_difference_gradient: non-scalar output of shape {probe.shape}"
        )
    grads = {}
    for name in wrt:
        x = base[name]
        g = np.zeros_like(x)
        flat = x.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(evaluate(graph, base))
            flat[i] = orig - eps
            lo = float(evaluate(graph, base))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads
