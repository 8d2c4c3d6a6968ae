"""Reverse-mode differentiation over a fixed primitive set.

A Tape records primitive applications in topological order; backward walks
the record once in reverse and accumulates gradients into trainable Params.
The primitive list is closed on purpose: the model architecture is fixed,
so every gradient rule can be (and is) verified against central finite
differences.

All values are 2-D float64 arrays. Scalars are 1x1 matrices. Vectors are
1xd row matrices.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError, NumericError

L2_EPS = 1e-12  # clamp for l2_normalize / cosine denominators


class Param:
    """A named weight matrix with an accumulated gradient buffer."""

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value: np.ndarray, trainable: bool = True,
                 name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise DimensionError(f"Param {name}: expected 2-D value")
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Node:
    __slots__ = ("value", "parents", "backward_fn", "param")

    def __init__(self, value: np.ndarray, parents: tuple = (),
                 backward_fn: Optional[Callable] = None,
                 param: Optional[Param] = None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param


class Tape:
    """Single-owner record of one forward computation."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value, parents=(), backward_fn=None, param=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), parents, backward_fn, param)
        self.nodes.append(node)
        return node

    # -- leaves ----------------------------------------------------------

    def const(self, value) -> Node:
        return self._record(value)

    def param(self, p: Param) -> Node:
        return self._record(p.value, param=p)

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape}")
        av, bv = a.value, b.value

        def backward(g):
            return g @ bv.T, av.T @ g

        return self._record(av @ bv, (a, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise DimensionError(f"add: {a.value.shape} vs {b.value.shape}")

        def backward(g):
            return g, g

        return self._record(a.value + b.value, (a, b), backward)

    def scale(self, a: Node, s: float) -> Node:
        s = float(s)

        def backward(g):
            return (g * s,)

        return self._record(a.value * s, (a,), backward)

    def row_mean(self, a: Node) -> Node:
        n = a.value.shape[0]

        def backward(g):
            return (np.repeat(g / n, n, axis=0),)

        return self._record(a.value.mean(axis=0, keepdims=True), (a,), backward)

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)

        def backward(g):
            return (g * (1.0 - y * y),)

        return self._record(y, (a,), backward)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0

        def backward(g):
            return (g * mask,)

        return self._record(np.where(mask, a.value, 0.0), (a,), backward)

    def l2_normalize(self, a: Node, eps: float = L2_EPS) -> Node:
        """Normalize a 1xd row vector; norms below eps are clamped to eps."""
        if a.value.shape[0] != 1:
            raise DimensionError("l2_normalize: expected a 1xd row vector")
        norm = float(np.sqrt(np.sum(a.value * a.value)))
        clamped = norm < eps
        denom = eps if clamped else norm
        y = a.value / denom

        def backward(g):
            if clamped:
                return (g / denom,)
            return ((g - y * float(np.sum(g * y))) / denom,)

        return self._record(y, (a,), backward)

    def cosine(self, u: Node, v: Node) -> Node:
        """Cosine similarity of two 1xd row vectors; returns a 1x1 scalar."""
        if u.value.shape != v.value.shape or u.value.shape[0] != 1:
            raise DimensionError(
                f"cosine: expected matching 1xd vectors, got {u.value.shape} vs {v.value.shape}")
        uv, vv = u.value, v.value
        nu = max(float(np.sqrt(np.sum(uv * uv))), L2_EPS)
        nv = max(float(np.sqrt(np.sum(vv * vv))), L2_EPS)
        c = float(np.sum(uv * vv)) / (nu * nv)

        def backward(g):
            gs = float(g[0, 0])
            du = gs * (vv / (nu * nv) - c * uv / (nu * nu))
            dv = gs * (uv / (nu * nv) - c * vv / (nv * nv))
            return du, dv

        return self._record(np.array([[c]]), (u, v), backward)

    def softmax_cross_entropy(self, logits: Node, target_ids) -> Node:
        """Mean cross-entropy over rows; target_ids is an int or sequence."""
        lv = logits.value
        if np.isscalar(target_ids):
            targets = np.array([int(target_ids)])
        else:
            targets = np.asarray(target_ids, dtype=np.int64)
        if targets.shape[0] != lv.shape[0]:
            raise DimensionError(
                f"softmax_cross_entropy: {targets.shape[0]} targets for {lv.shape[0]} rows")
        if np.any(targets < 0) or np.any(targets >= lv.shape[1]):
            raise InputError("softmax_cross_entropy: target id out of range")
        shifted = lv - lv.max(axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1))
        rows = np.arange(lv.shape[0])
        losses = lse - shifted[rows, targets]
        n = lv.shape[0]
        softmax = np.exp(shifted)
        softmax /= softmax.sum(axis=1, keepdims=True)

        def backward(g):
            gs = float(g[0, 0])
            grad = softmax.copy()
            grad[rows, targets] -= 1.0
            return (grad * (gs / n),)

        return self._record(np.array([[float(losses.mean())]]), (logits,), backward)

    def frobenius_sq(self, a: Node) -> Node:
        av = a.value

        def backward(g):
            return (2.0 * av * float(g[0, 0]),)

        return self._record(np.array([[float(np.sum(av * av))]]), (a,), backward)

    def log(self, a: Node) -> Node:
        if np.any(a.value <= 0):
            raise NumericError("log: non-positive input")
        av = a.value

        def backward(g):
            return (g / av,)

        return self._record(np.log(av), (a,), backward)

    def exp_sum(self, a: Node) -> Node:
        """Sum of elementwise exp; returns a 1x1 scalar."""
        ev = np.exp(a.value)

        def backward(g):
            return (ev * float(g[0, 0]),)

        return self._record(np.array([[float(ev.sum())]]), (a,), backward)

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(param) into every trainable Param's grad."""
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward: loss must be 1x1, got {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        seen_loss = False
        for node in reversed(self.nodes):
            if node is loss:
                seen_loss = True
            if not seen_loss:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.param is not None:
                if node.param.trainable:
                    node.param.grad += g
                continue
            if node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                acc = grads.get(id(parent))
                if acc is None:
                    # always copy: some rules (add) hand the same buffer
                    # to several parents
                    grads[id(parent)] = pg.copy()
                else:
                    acc += pg


def check_gradient(build: Callable[[Tape, Sequence[Param]], Node],
                   params: Sequence[Param], h: float = 1e-5) -> float:
    """Max relative error of tape gradients vs central finite differences.

    ``build`` constructs the scalar loss on a fresh tape from the given
    params. Relative error is measured where the analytic gradient
    magnitude exceeds 1e-8, absolute error below that.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = build(tape, params)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for pi, p in enumerate(params):
        if not p.trainable:
            continue
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(build(Tape(), params).value[0, 0])
            flat[i] = orig - h
            fm = float(build(Tape(), params).value[0, 0])
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[pi].reshape(-1)[i]
            if abs(a) > 1e-8:
                worst = max(worst, abs(a - numeric) / abs(a))
            else:
                worst = max(worst, abs(a - numeric))
    return worst
