"""Evaluation metrics. All rates are reported in percent."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .core import AnnotationSet, PreconditionError, as_label_array, label_runs

Averaging = Literal["pooled", "per_video"]

AC_NOTE = (
    "accuracy is the overall frame accuracy; phase_accuracy is the per-class "
    "recall, reported as mean/std over classes"
)


def _as_list(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == 1:
        return [x.astype(np.int64)]
    if hasattr(x, "labels"):
        return [as_label_array(x)]
    items = list(x)
    if items and np.isscalar(items[0]):
        return [np.asarray(items, dtype=np.int64)]
    return [as_label_array(v) for v in items]


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class PhaseMetrics:
    accuracy: float
    classes: list[int]
    precision: dict[int, float]
    recall: dict[int, float]
    jaccard: dict[int, float]
    averaging: str = "pooled"
    notes: list[str] = field(default_factory=lambda: [AC_NOTE])

    @property
    def phase_accuracy(self) -> dict[int, float]:
        return self.recall

    def summary(self) -> dict[str, tuple[float, float]]:
        """Mean and population std over classes for each metric."""
        out = {}
        for name in ("precision", "recall", "jaccard", "phase_accuracy"):
            vals = np.array([getattr(self, name)[c] for c in self.classes], dtype=float)
            out[name] = (float(vals.mean()), float(vals.std())) if vals.size else (0.0, 0.0)
        return out

    def to_dict(self) -> dict:
        summary = self.summary()
        return {
            "averaging": self.averaging,
            "accuracy": self.accuracy,
            "classes": self.classes,
            "per_class": {
                name: {str(c): getattr(self, name)[c] for c in self.classes}
                for name in ("precision", "recall", "jaccard")
            },
            "mean": {k: v[0] for k, v in summary.items()},
            "std": {k: v[1] for k, v in summary.items()},
            "notes": list(self.notes),
        }


def _confusion_counts(pred: np.ndarray, gt: np.ndarray, classes: Iterable[int]):
    counts = {}
    for c in classes:
        p, g = pred == c, gt == c
        tp = int(np.count_nonzero(p & g))
        counts[c] = (tp, int(np.count_nonzero(p & ~g)), int(np.count_nonzero(~p & g)))
    return counts


def _per_class(pred: np.ndarray, gt: np.ndarray):
    # classes absent from both prediction and ground truth are skipped
    classes = sorted(set(np.unique(gt).tolist()) | set(np.unique(pred).tolist()))
    classes = [c for c in classes if c != 0]
    pr, re, ja = {}, {}, {}
    for c, (tp, fp, fn) in _confusion_counts(pred, gt, classes).items():
        pr[c] = 100.0 * _safe_div(tp, tp + fp)
        re[c] = 100.0 * _safe_div(tp, tp + fn)
        ja[c] = 100.0 * _safe_div(tp, tp + fp + fn)
    return classes, pr, re, ja


def phase_metrics(pred, gt, averaging: Averaging = "pooled") -> PhaseMetrics:
    """Frame-level AC plus per-class PR, RE and JA.

    ``pooled`` concatenates all videos before counting. ``per_video``
    computes each video separately and averages per class over the videos
    in which that class occurs (in prediction or ground truth). Undefined
    ratios (zero denominator) count as 0.
    """
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise PreconditionError("prediction and ground-truth video counts differ")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise PreconditionError(f"length mismatch: {p.size} vs {g.size}")
        if np.any(g == 0):
            raise PreconditionError("ground truth must be fully labeled")

    if averaging == "pooled":
        p, g = np.concatenate(preds), np.concatenate(gts)
        classes, pr, re, ja = _per_class(p, g)
        acc = 100.0 * float(np.mean(p == g))
        return PhaseMetrics(acc, classes, pr, re, ja, "pooled")

    if averaging != "per_video":
        raise ValueError(f"unknown averaging {averaging!r}")
    acc = float(np.mean([100.0 * np.mean(p == g) for p, g in zip(preds, gts)]))
    buckets: dict[int, list[tuple[float, float, float]]] = {}
    for p, g in zip(preds, gts):
        classes, pr, re, ja = _per_class(p, g)
        for c in classes:
            buckets.setdefault(c, []).append((pr[c], re[c], ja[c]))
    classes = sorted(buckets)
    means = {c: np.mean(buckets[c], axis=0) for c in classes}
    return PhaseMetrics(
        acc,
        classes,
        {c: float(means[c][0]) for c in classes},
        {c: float(means[c][1]) for c in classes},
        {c: float(means[c][2]) for c in classes},
        "per_video",
    )


def pseudo_label_quality(pseudo, gt) -> tuple[float, float]:
    """(labelling rate, labelling accuracy) in percent.

    Accuracy is NaN when nothing is labeled.
    """
    ps, gs = _as_list(pseudo), _as_list(gt)
    p, g = np.concatenate(ps), np.concatenate(gs)
    if p.shape != g.shape:
        raise PreconditionError("pseudo and ground-truth lengths differ")
    labeled = p != 0
    n = int(np.count_nonzero(labeled))
    rate = 100.0 * n / p.size
    acc = 100.0 * float(np.mean(p[labeled] == g[labeled])) if n else float("nan")
    return rate, acc


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; pairs involving a zero row score 0."""
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1)
    unit = np.divide(e, norms[:, None], out=np.zeros_like(e), where=norms[:, None] > 0)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = (sim + sim.T) / 2
    np.fill_diagonal(sim, np.where(norms > 0, 1.0, 0.0))
    return sim


POSITION_BINS = [f"({i / 10:.1f},{(i + 1) / 10:.1f}]" for i in range(10)]


def relative_position(t: int, start: int, length: int) -> float:
    return (t - start + 0.5) / length


def annotation_position_stats(annotations: Sequence[AnnotationSet]) -> np.ndarray:
    """Percentage of timestamps in each tenth of their phase.

    A timestamp at frame t in a phase starting at ``start`` with ``length``
    frames sits at ``(t - start + 0.5) / length``; bins are half-open on the
    left, ``(0, 0.1], ..., (0.9, 1.0]``.
    """
    counts = np.zeros(10, dtype=np.int64)
    for ann in annotations:
        if ann.full_labels is None:
            raise PreconditionError(f"{ann.sequence_id}: full labels required")
        runs = label_runs(ann.full_labels.labels)
        for t, _ in ann.timestamps:
            start, end, _ = next(r for r in runs if r[0] <= t <= r[1])
            length = end - start + 1
            k = t - start
            # exact integer form of ceil(10 * (k + 0.5) / length) - 1
            b = -(-5 * (2 * k + 1) // length) - 1
            counts[min(max(b, 0), 9)] += 1
    total = counts.sum()
    return 100.0 * counts / total if total else counts.astype(float)
