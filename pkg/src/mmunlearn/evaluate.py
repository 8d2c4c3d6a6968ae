"""Six-slice evaluation (forget/retain/real-world x visual/text QA),
sequence overlap scoring, and CSV export of continual-run grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, InputError
from .world import FORGET, QA, REALWORLD, RETAIN, VQA, World

SLICES = (
    ("forget_vqa", FORGET, VQA),
    ("forget_qa", FORGET, QA),
    ("retain_vqa", RETAIN, VQA),
    ("retain_qa", RETAIN, QA),
    ("rw_vqa", REALWORLD, VQA),
    ("rw_qa", REALWORLD, QA),
)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def predict(model, sample, adapters_enabled: bool) -> int:
    """Argmax over answer logits; ties go to the smallest answer id."""
    if sample.modality == VQA:
        logits = model.forward_vqa(sample.image, sample.question_tokens,
                                   adapters_enabled)
    else:
        logits = model.forward_qa(sample.question_tokens)
    return int(np.argmax(logits))  # np.argmax picks the first maximum


def accuracy(model, samples: Sequence, adapters_enabled: bool) -> float:
    if not samples:
        raise ContractError("accuracy: empty slice")
    modalities = {s.modality for s in samples}
    if len(modalities) != 1:
        raise ContractError(f"accuracy: mixed modalities {sorted(modalities)}")
    correct = sum(predict(model, s, adapters_enabled) == s.answer_id
                  for s in samples)
    return correct / len(samples)


def rouge_l(reference_tokens: Sequence[int], generated_tokens: Sequence[int]) -> float:
    """Longest-common-subsequence F-measure over integer token sequences."""
    ref, gen = list(reference_tokens), list(generated_tokens)
    if not ref or not gen:
        raise InputError("rouge_l: empty sequence")
    n, m = len(ref), len(gen)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if ref[i - 1] == gen[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    lcs = table[n][m]
    if lcs == 0:
        return 0.0
    recall = lcs / n
    precision = lcs / m
    return 2.0 * recall * precision / (recall + precision)


@dataclass
class MetricsReport:
    forget_vqa: float
    forget_qa: float
    retain_vqa: float
    retain_qa: float
    rw_vqa: float
    rw_qa: float
    counts: dict[str, int]
    stage: Optional[int] = None
    task: Optional[int] = None
    rouge: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.stage is None:
            d.pop("stage")
            d.pop("task")
        if not self.rouge:
            d.pop("rouge")
        return d

    def to_json(self) -> str:
        def walk(v):
            if isinstance(v, float):
                return float(_fmt(v))
            if isinstance(v, dict):
                return {k: walk(x) for k, x in v.items()}
            return v
        return json.dumps(walk(self.as_dict()), sort_keys=True, indent=2)


def eval_suite(model, world: World, adapters_enabled: bool = True,
               stage: Optional[int] = None,
               task: Optional[int] = None) -> MetricsReport:
    """Accuracy on all six slices. Pure: no model or world state changes."""
    values, counts = {}, {}
    for name, split, modality in SLICES:
        samples = world.split_samples(split, modality)
        if not samples:
            raise ContractError(f"eval_suite: slice {name} is empty")
        values[name] = accuracy(model, samples, adapters_enabled)
        counts[name] = len(samples)
    return MetricsReport(counts=counts, stage=stage, task=task, **values)


@dataclass(frozen=True)
class StageRecord:
    """Evaluation taken after finishing one continual unlearning stage."""
    stage: int                          # 1-based
    per_task_forget_vqa: tuple[float, ...]  # tasks 1..stage
    retain_vqa: float
    rw_vqa: float
    retain_qa: float
    forget_qa: float


@dataclass(frozen=True)
class HeatmapMatrix:
    """stages x tasks grid of forget-slice visual accuracy; entry (s, t)
    is defined only for t <= s (lower triangle with diagonal)."""
    grid: tuple[tuple[Optional[float], ...], ...]

    @property
    def n_stages(self) -> int:
        return len(self.grid)


def export_continual(records: Sequence[StageRecord]) -> tuple[HeatmapMatrix, str, str]:
    """Build the heatmap plus CSV text for the heatmap and the per-stage
    curves (cumulative forget average, retain, real-world)."""
    if not records:
        raise ContractError("export_continual: no stage records")
    records = sorted(records, key=lambda r: r.stage)
    n = len(records)
    grid = []
    for r in records:
        if len(r.per_task_forget_vqa) != r.stage:
            raise ContractError(
                f"stage {r.stage} carries {len(r.per_task_forget_vqa)} task entries")
        row = list(r.per_task_forget_vqa) + [None] * (n - r.stage)
        grid.append(tuple(row))
    heatmap = HeatmapMatrix(tuple(grid))

    lines = ["stage," + ",".join(f"task_{t + 1}" for t in range(n))]
    for s, row in enumerate(grid):
        cells = [_fmt(v) if v is not None else "" for v in row]
        lines.append(f"{s + 1}," + ",".join(cells))
    heatmap_csv = "\n".join(lines) + "\n"

    lines = ["stage,cumulative_forget_vqa,retain_vqa,rw_vqa,retain_qa,forget_qa"]
    for r in records:
        cumulative = sum(r.per_task_forget_vqa) / r.stage
        lines.append(",".join([str(r.stage), _fmt(cumulative), _fmt(r.retain_vqa),
                               _fmt(r.rw_vqa), _fmt(r.retain_qa), _fmt(r.forget_qa)]))
    curves_csv = "\n".join(lines) + "\n"
    return heatmap, heatmap_csv, curves_csv
