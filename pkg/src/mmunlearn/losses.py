"""Objective terms for contrastive visual forgetting.

All losses are built on a Tape from the unlearned model's IVRs; reference
quantities (reference IVRs, queue entries, the retain-batch anchor) enter
as constants, so no gradient ever reaches the reference path.

The push loss is an inverted InfoNCE: the queued negatives sit in the
numerator, so minimizing it drives the unlearned embedding away from its
reference counterpart and toward the negative pool. It is evaluated with
a max-shifted log-sum-exp; the shift is a detached constant, so gradients
are unaffected.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Node, Tape
from .errors import ConfigError, ContractError, DimensionError

CVF_METHODS = ("cvf_ncu", "cvf_random", "cvf_only", "nmse")


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0    # push weight inside the CVF term
    alpha: float = 1.0  # CVF term weight in the total objective
    beta: float = 1.0   # retention term weight
    tau: float = 0.1    # similarity temperature

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError("tau must be strictly positive")
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ConfigError("loss weights must be >= 0")


class NegativeQueue:
    """FIFO store of unit-norm reference IVRs from previous steps."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[np.ndarray] = deque()

    def push(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(vec)
        vec = vec / max(norm, 1e-12)
        if len(self._entries) == self.capacity:
            self._entries.popleft()
        self._entries.append(vec)

    def push_all(self, vecs) -> None:
        for v in vecs:
            self.push(v)

    def __len__(self) -> int:
        return len(self._entries)

    def as_matrix(self) -> np.ndarray:
        if not self._entries:
            raise ContractError("negative queue is empty")
        return np.stack(list(self._entries), axis=0)


def _row(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    return v.reshape(1, -1)


def _sub(tape: Tape, a: Node, b: Node) -> Node:
    return tape.add(a, tape.scale(b, -1.0))


def cvf_push_loss(tape: Tape, z_u: Node, z_r, queue_matrix: np.ndarray,
                  tau: float) -> Node:
    """Negatives-in-the-numerator contrastive loss (scalar node)."""
    if queue_matrix.size == 0:
        raise ContractError("cvf_push_loss: empty negative queue")
    z_r = _row(z_r)
    z_r_bar = z_r / max(np.linalg.norm(z_r), 1e-12)
    zu_bar = tape.l2_normalize(z_u)
    s_neg = tape.scale(tape.matmul(zu_bar, tape.const(queue_matrix.T)), 1.0 / tau)
    s_pos = tape.scale(tape.matmul(zu_bar, tape.const(z_r_bar.T)), 1.0 / tau)
    shift = float(max(np.max(s_neg.value), float(s_pos.value[0, 0])))
    num = tape.exp_sum(tape.add(s_neg, tape.const(np.full_like(s_neg.value, -shift))))
    den = tape.add(num, tape.exp_sum(tape.add(s_pos, tape.const([[-shift]]))))
    return _sub(tape, tape.log(den), tape.log(num))


def cvf_push_value_logistic(z_u, z_r, queue_matrix: np.ndarray, tau: float) -> float:
    """Algebraically equal form log(1 + exp(s_pos - logsumexp(negatives)))."""
    zu = _row(z_u)
    zu = zu / max(np.linalg.norm(zu), 1e-12)
    zr = _row(z_r)
    zr = zr / max(np.linalg.norm(zr), 1e-12)
    s_neg = (zu @ queue_matrix.T).ravel() / tau
    s_pos = float((zu @ zr.T)[0, 0]) / tau
    m = s_neg.max()
    lse_neg = m + np.log(np.exp(s_neg - m).sum())
    return float(np.log1p(np.exp(s_pos - lse_neg)))


def cvf_pull_loss(tape: Tape, z_u: Node, anchor) -> Node:
    """1 - cos(z_u, anchor); anchor is the retain-batch reference mean."""
    anchor = _row(anchor)
    if not np.any(anchor):
        raise ContractError("cvf_pull_loss: anchor undefined (zero vector)")
    cos = tape.cosine(z_u, tape.const(anchor))
    return _sub(tape, tape.const([[1.0]]), cos)


def nmse_loss(tape: Tape, z_u: Node, z_r) -> Node:
    """Negative squared distance to the reference IVR (ablation baseline)."""
    z_r = _row(z_r)
    if z_u.value.shape != z_r.shape:
        raise DimensionError(f"nmse_loss: {z_u.value.shape} vs {z_r.shape}")
    return tape.scale(tape.frobenius_sq(_sub(tape, z_u, tape.const(z_r))), -1.0)


def ret_loss(tape: Tape, h_u: Node, h_r: np.ndarray, tokens_per_sample: int) -> Node:
    """Token-wise MSE between unlearned and reference retain IVRs.

    h_u / h_r stack all retain-batch token rows; the result is the
    per-sample (1/P)||H_u - H_r||_F^2 averaged over the batch.
    """
    if h_u.value.shape != h_r.shape:
        raise DimensionError(f"ret_loss: {h_u.value.shape} vs {h_r.shape}")
    n_samples = h_r.shape[0] // tokens_per_sample
    diff = _sub(tape, h_u, tape.const(h_r))
    return tape.scale(tape.frobenius_sq(diff), 1.0 / (tokens_per_sample * n_samples))


def gum_loss(tape: Tape, logits: Node, answer_ids) -> Node:
    """Mean negative log-likelihood of the ground-truth answers."""
    return tape.softmax_cross_entropy(logits, answer_ids)


def total_loss(tape: Tape, model, forget_batch: Sequence, retain_batch: Sequence,
               queue: NegativeQueue, weights: LossWeights,
               method: str = "cvf_ncu",
               queue_membership: str = "forget") -> tuple[Node, dict, list[np.ndarray]]:
    """Full unlearning objective for one step.

    Returns (loss node, per-term component values, the reference pooled
    IVRs to enqueue after the step). Which batch feeds the queue is an
    open modeling choice; "forget" contrasts against the forget set's own
    reference manifold, "retain" against the preserved entities.
    """
    weights.validate()
    if method not in CVF_METHODS:
        raise ConfigError(f"total_loss: unknown method {method!r}")
    if queue_membership not in ("forget", "retain"):
        raise ConfigError(f"total_loss: bad queue membership {queue_membership!r}")
    if not forget_batch or not retain_batch:
        raise ContractError("total_loss: both batches must be non-empty")

    p = model.config.patches

    # reference path: same checkpoint with adapters disabled, no gradient
    forget_refs = [model.extract_ivr(s.image, adapters_enabled=False)
                   for s in forget_batch]
    retain_refs = [model.extract_ivr(s.image, adapters_enabled=False)
                   for s in retain_batch]
    anchor = np.mean([z for _, z in retain_refs], axis=0)
    queue_matrix = queue.as_matrix()

    # unlearned path: adapters enabled
    _, z_forget = model.ivr_graph(tape, [s.image for s in forget_batch],
                                  adapters_enabled=True)
    b_f = len(forget_batch)

    push_terms, pull_terms = [], []
    for i, (_, z_r) in enumerate(forget_refs):
        sel = np.zeros((1, b_f))
        sel[0, i] = 1.0
        z_u_i = tape.matmul(tape.const(sel), z_forget)
        if method == "nmse":
            push_terms.append(nmse_loss(tape, z_u_i, z_r))
        else:
            push_terms.append(cvf_push_loss(tape, z_u_i, z_r, queue_matrix,
                                            weights.tau))
        pull_terms.append(cvf_pull_loss(tape, z_u_i, anchor))

    def mean_nodes(nodes):
        acc = nodes[0]
        for n in nodes[1:]:
            acc = tape.add(acc, n)
        return tape.scale(acc, 1.0 / len(nodes))

    push_mean = mean_nodes(push_terms)
    pull_mean = mean_nodes(pull_terms)
    cvf = tape.add(tape.scale(push_mean, weights.lam), pull_mean)

    include_aux = method != "cvf_only"
    components = {
        "push": float(push_mean.value[0, 0]),
        "pull": float(pull_mean.value[0, 0]),
        "ret": 0.0,
        "gum": 0.0,
    }

    loss = tape.scale(cvf, weights.alpha)
    if include_aux:
        fused, h_u, _ = model.fused_vqa_graph(
            tape, [s.image for s in retain_batch],
            [s.question_tokens for s in retain_batch], adapters_enabled=True)
        h_ref = np.concatenate([h for h, _ in retain_refs], axis=0)
        ret = ret_loss(tape, h_u, h_ref, p)
        logits = model.body_graph(tape, fused)
        gum = gum_loss(tape, logits, [s.answer_id for s in retain_batch])
        components["ret"] = float(ret.value[0, 0])
        components["gum"] = float(gum.value[0, 0])
        loss = tape.add(loss, tape.add(tape.scale(ret, weights.beta), gum))

    components["total"] = float(loss.value[0, 0])
    source = forget_refs if queue_membership == "forget" else retain_refs
    enqueue = [z for _, z in source]
    return loss, components, enqueue
