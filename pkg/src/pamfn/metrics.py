"""Rank-correlation evaluation: Spearman rho, Fisher-z averaging, report assembly."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Manifest, load_bundle


class MetricError(ValueError):
    """Metric preconditions violated (length, variance, or range)."""


def rank_average(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties receiving the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of the average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or len(x) != len(y):
        raise MetricError(f"need two equal-length 1-D series, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise MetricError(f"need at least 2 points, got {len(x)}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise MetricError("non-finite values in input series")
    rx = rank_average(x)
    ry = rank_average(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise MetricError("rank variance is zero (constant series); correlation undefined")
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def fisher_z_average(rhos) -> float:
    """Average correlations in Fisher z-space: tanh(mean(arctanh(rho)))."""
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.ndim != 1 or len(rhos) == 0:
        raise MetricError(f"need a non-empty 1-D list of correlations, got shape {rhos.shape}")
    if (np.abs(rhos) >= 1.0).any():
        raise MetricError(f"|rho| >= 1 is outside the Fisher transform's domain: {rhos}")
    return float(np.tanh(np.mean(np.arctanh(rhos))))


@dataclass(frozen=True)
class TaskResult:
    task: str
    rho: float
    n: int


@dataclass(frozen=True)
class EvalReport:
    per_task: tuple[TaskResult, ...]
    fisher_avg: float

    def format(self) -> str:
        lines = [f"{r.task}: rho={r.rho:.4f} (n={r.n})" for r in self.per_task]
        lines.append(f"fisher_avg: {self.fisher_avg:.4f}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task", "n", "rho", "fisher_avg"])
            for r in self.per_task:
                writer.writerow([r.task, r.n, repr(r.rho), repr(self.fisher_avg)])


def assemble_report(results: list[TaskResult]) -> EvalReport:
    """Build a report, clamping perfect correlations so the average stays defined."""
    clamped = []
    for r in results:
        rho = r.rho
        if abs(rho) >= 1.0:
            warnings.warn(
                f"task {r.task}: |rho|=1 clamped for Fisher averaging", stacklevel=2
            )
            rho = float(np.sign(rho)) * (1.0 - 1e-7)
        clamped.append(TaskResult(r.task, rho, r.n))
    return EvalReport(tuple(clamped), fisher_z_average([r.rho for r in clamped]))


def predict_scores(model, manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions over full sequences for every video in a split."""
    entries = manifest.split_entries(split)
    if not entries:
        raise MetricError(f"split {split!r} is empty")
    was_training = model.training
    model.eval()
    preds, labels = [], []
    with torch.no_grad():
        for entry in entries:
            bundle = load_bundle(manifest, entry.video_id)
            tensors = [
                torch.from_numpy(np.ascontiguousarray(bundle.feature(m))).unsqueeze(0)
                for m in ("rgb", "flow", "audio")
            ]
            score, _ = model(*tensors)
            preds.append(float(score.squeeze(0)))
            labels.append(bundle.label)
    if was_training:
        model.train()
    return np.asarray(preds), np.asarray(labels)


def evaluate(model, manifest: Manifest, split: str, task: str = "all") -> EvalReport:
    """Score every video of ``split`` with all its segments and report Spearman rho."""
    preds, labels = predict_scores(model, manifest, split)
    rho = spearman(preds, labels)
    return assemble_report([TaskResult(task, rho, len(preds))])
