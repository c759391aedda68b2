"""Tape based reverse-mode autodiff over dense float64 arrays.

Arrays are numpy float64, row-major. A Tape records primitive applications
in execution order; backward() replays them in reverse, accumulating
adjoints. Only the primitives below exist, which keeps every gradient
checkable against central finite differences.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class DimensionError(AutodiffError):
    """Shape mismatch between primitive inputs."""


class NumericError(AutodiffError):
    """A primitive produced a non-finite value."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2:
        raise DimensionError(f"arrays must be at most 2-d, got shape {a.shape}")
    return a


class Node:
    __slots__ = ("value", "index")

    def __init__(self, value: np.ndarray, index: int):
        self.value = value
        self.index = index

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Wengert list. Ops append (output, parent indices, vjp closure)."""

    def __init__(self):
        self._nodes: list[Node] = []
        # parallel to _nodes: (parent_indices, vjp) with vjp(g) -> tuple of
        # adjoint contributions, one per parent. Leaves store ((), None).
        self._ops: list[tuple[tuple[int, ...], object]] = []

    def _record(self, op: str, value: np.ndarray, parents: tuple[Node, ...], vjp) -> Node:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{op} produced a non-finite value")
        node = Node(value, len(self._nodes))
        self._nodes.append(node)
        self._ops.append((tuple(p.index for p in parents), vjp))
        return node

    def leaf(self, value) -> Node:
        v = _as_array(value)
        if not np.all(np.isfinite(v)):
            raise NumericError("leaf holds a non-finite value")
        node = Node(v, len(self._nodes))
        self._nodes.append(node)
        self._ops.append(((), None))
        return node

    # ---- primitives ------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape}")
        av, bv = a.value, b.value

        def vjp(g):
            return g @ bv.T, av.T @ g

        return self._record("matmul", av @ bv, (a, b), vjp)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise DimensionError(f"add: {a.value.shape} vs {b.value.shape}")

        def vjp(g):
            return g, g

        return self._record("add", a.value + b.value, (a, b), vjp)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise DimensionError(f"mul: {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value

        def vjp(g):
            return g * bv, g * av

        return self._record("mul", av * bv, (a, b), vjp)

    def add_bias(self, x: Node, bias: Node) -> Node:
        # the one permitted broadcast: (n, d) + (d,) over rows
        if x.value.ndim != 2 or bias.value.ndim != 1 or x.value.shape[1] != bias.value.shape[0]:
            raise DimensionError(f"add_bias: {x.value.shape} + {bias.value.shape}")

        def vjp(g):
            return g, g.sum(axis=0)

        return self._record("add_bias", x.value + bias.value, (x, bias), vjp)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0

        def vjp(g):
            return (g * mask,)

        return self._record("relu", np.where(mask, x.value, 0.0), (x,), vjp)

    def softmax(self, x: Node) -> Node:
        v, squeeze = _rows(x.value)
        p = _softmax_rows(v)
        out = p[0] if squeeze else p

        def vjp(g):
            gr = g.reshape(p.shape)
            inner = (gr * p).sum(axis=1, keepdims=True)
            grad = p * (gr - inner)
            return (grad[0] if squeeze else grad,)

        return self._record("softmax", out, (x,), vjp)

    def log_softmax(self, x: Node) -> Node:
        v, squeeze = _rows(x.value)
        # max subtraction keeps exp in range; p computed as e/sum so the
        # backward pass agrees bitwise with the forward softmax elsewhere
        shifted = v - v.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        sum_e = e.sum(axis=1, keepdims=True)
        logp = shifted - np.log(sum_e)
        p = e / sum_e
        out = logp[0] if squeeze else logp

        def vjp(g):
            gr = g.reshape(logp.shape)
            grad = gr - p * gr.sum(axis=1, keepdims=True)
            return (grad[0] if squeeze else grad,)

        return self._record("log_softmax", out, (x,), vjp)

    def cross_entropy_soft(self, probs: Node, targets: Node) -> Node:
        """Total cross-entropy -sum(t * log p) over all entries.

        Rows where a target weight is zero contribute nothing for that class
        even if the probability underflowed to zero; cross_entropy_soft(p, p)
        is the Shannon entropy of p.
        """
        if probs.value.shape != targets.value.shape:
            raise DimensionError(
                f"cross_entropy_soft: {probs.value.shape} vs {targets.value.shape}"
            )
        pv = np.maximum(probs.value, np.finfo(np.float64).tiny)
        tv = targets.value
        logp = np.log(pv)
        value = np.asarray(-np.sum(np.where(tv > 0.0, tv * logp, 0.0)))

        def vjp(g):
            return -g * tv / pv, -g * logp

        return self._record("cross_entropy_soft", value, (probs, targets), vjp)

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)

        def vjp(g):
            return (g * c,)

        return self._record("scale", x.value * c, (x,), vjp)

    def sum(self, x: Node) -> Node:
        shape = x.value.shape

        def vjp(g):
            return (np.broadcast_to(np.asarray(g), shape).copy() if shape else np.asarray(g),)

        return self._record("sum", np.asarray(x.value.sum()), (x,), vjp)

    def square(self, x: Node) -> Node:
        v = x.value

        def vjp(g):
            return (2.0 * v * g,)

        return self._record("square", v * v, (x,), vjp)

    def segment(self, x: Node, start: int, shape: tuple[int, ...]) -> Node:
        """View a contiguous slice of a flat vector as `shape`."""
        if x.value.ndim != 1:
            raise DimensionError(f"segment expects a flat vector, got {x.value.shape}")
        size = int(np.prod(shape)) if shape else 1
        if start < 0 or start + size > x.value.shape[0]:
            raise DimensionError(
                f"segment [{start}:{start + size}] out of range for length {x.value.shape[0]}"
            )
        total = x.value.shape[0]

        def vjp(g):
            buf = np.zeros(total)
            buf[start : start + size] = np.asarray(g).ravel()
            return (buf,)

        return self._record("segment", x.value[start : start + size].reshape(shape), (x,), vjp)

    # ---- reverse pass ----------------------------------------------------

    def backward(self, root: Node) -> None:
        if root.value.shape != ():
            raise DimensionError(f"backward needs a scalar root, got shape {root.value.shape}")
        adj: list = [None] * len(self._nodes)
        adj[root.index] = np.asarray(1.0)
        for idx in range(root.index, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            parents, vjp = self._ops[idx]
            if vjp is None:
                continue
            for pidx, contrib in zip(parents, vjp(g)):
                if not np.all(np.isfinite(contrib)):
                    raise NumericError("backward produced a non-finite adjoint")
                if adj[pidx] is None:
                    adj[pidx] = np.array(contrib, dtype=np.float64)
                else:
                    adj[pidx] = adj[pidx] + contrib
        self._adjoints = adj

    def grad(self, node: Node) -> np.ndarray:
        g = getattr(self, "_adjoints", None)
        if g is None:
            raise AutodiffError("call backward() before grad()")
        out = g[node.index]
        return np.zeros_like(node.value) if out is None else np.asarray(out)


def _rows(v: np.ndarray) -> tuple[np.ndarray, bool]:
    if v.ndim == 1:
        return v.reshape(1, -1), True
    if v.ndim == 2:
        return v, False
    raise DimensionError(f"expected vector or matrix, got shape {v.shape}")


def _softmax_rows(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


PRIMITIVES = (
    "matmul",
    "add",
    "mul",
    "add_bias",
    "relu",
    "log_softmax",
    "softmax",
    "cross_entropy_soft",
    "scale",
    "sum",
    "square",
    "segment",
)


def apply_primitive(op: str, *inputs, **kwargs) -> np.ndarray:
    """Run one primitive on raw arrays, returning its value.

    Dispatch facade used by generic tests; `op` must name a registered
    primitive.
    """
    if op not in PRIMITIVES:
        raise AutodiffError(f"unknown primitive {op!r}")
    tape = Tape()
    args = []
    for x in inputs:
        # bare ints/floats are op parameters (scale factor, offsets), not data
        if isinstance(x, Node) or isinstance(x, (int, float)) and not isinstance(x, bool):
            args.append(x)
        else:
            args.append(tape.leaf(x))
    return getattr(tape, op)(*args, **kwargs).value


def value_and_grad(f, at: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate scalar-valued f(tape, leaf) and its gradient at `at`."""
    tape = Tape()
    leaf = tape.leaf(at)
    out = f(tape, leaf)
    tape.backward(out)
    return float(out.value), tape.grad(leaf)


def gradient(f, at: np.ndarray) -> np.ndarray:
    return value_and_grad(f, at)[1]
