"""Pseudo-label generation from timestamp annotations.

Includes uncertainty-gated diffusion, the naive and uniform baselines,
simulated timestamp annotation, and ground-truth boundary masking.
"""
from __future__ import annotations

import math
from typing import Literal, Optional

import numpy as np

from .core import (
    AnnotationSet,
    ConfigError,
    DiffusionMode,
    LabelSequence,
    PreconditionError,
    UncertaintySequence,
    as_label_array,
    label_runs,
)

TimestampPolicy = Literal["random", "start", "middle", "end"]
POLICIES = ("random", "start", "middle", "end")


def _anchor_bounds(ann: AnnotationSet):
    """Yield ``(index, class, lo, hi)`` per anchor, 0-based and inclusive.

    ``lo..hi`` is the stretch an anchor may claim: everything strictly
    between its neighbouring anchors, or up to the sequence edge.
    """
    idx = [t - 1 for t in ann.frames]
    T = ann.num_frames
    for i, (a, c) in enumerate(zip(idx, ann.classes)):
        lo = idx[i - 1] + 1 if i > 0 else 0
        hi = idx[i + 1] - 1 if i + 1 < len(idx) else T - 1
        yield a, c, lo, hi


def temporal_diffusion(
    unc: UncertaintySequence,
    ann: AnnotationSet,
    tau: float = 0.1,
    mode: DiffusionMode = "contiguous",
) -> LabelSequence:
    """Grow labels outward from each timestamp anchor.

    A frame joins its anchor's class when its uncertainty is below ``tau``
    and its predicted class equals the anchor class. In ``contiguous`` mode
    growth in each direction halts at the first frame that fails; in
    ``filter`` mode every qualifying frame between the neighbouring anchors
    is kept. Anchors are always labeled with their annotated class.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if mode not in ("contiguous", "filter"):
        raise ConfigError(f"unknown diffusion mode {mode!r}")
    problems = ann.violations()
    if problems:
        raise PreconditionError("; ".join(problems))
    if len(unc) != ann.num_frames:
        raise PreconditionError(
            f"uncertainty length {len(unc)} != num_frames {ann.num_frames}"
        )

    pred = unc.predicted_class
    confident = unc.uncertainty < tau
    out = np.zeros(ann.num_frames, dtype=np.int64)

    for a, c, lo, hi in _anchor_bounds(ann):
        accept = confident & (pred == c)
        if mode == "filter":
            region = slice(lo, hi + 1)
            out[region][accept[region]] = c
            continue
        j = a - 1
        while j >= lo and accept[j]:
            out[j] = c
            j -= 1
        j = a + 1
        while j <= hi and accept[j]:
            out[j] = c
            j += 1

    for t, c in ann.timestamps:
        out[t - 1] = c
    return LabelSequence(out, ann.sequence_id)


def naive_baseline(ann: AnnotationSet) -> LabelSequence:
    return ann.to_labels()


def uniform_baseline(ann: AnnotationSet) -> LabelSequence:
    """Fill every frame, switching class at the midpoint between timestamps.

    Between ``t1 < t2`` the frames up to ``t1 + (t2 - t1) // 2`` keep the
    first class and the rest take the second. Frames before the first or
    after the last timestamp copy the nearest one.
    """
    T = ann.num_frames
    out = np.zeros(T, dtype=np.int64)
    ts = ann.timestamps
    first_t, first_c = ts[0]
    out[:first_t] = first_c
    for (t1, c1), (t2, c2) in zip(ts, ts[1:]):
        mid = t1 + (t2 - t1) // 2
        out[t1 - 1 : mid] = c1
        out[mid : t2 - 1] = c2
    last_t, last_c = ts[-1]
    out[last_t - 1 :] = last_c
    return LabelSequence(out, ann.sequence_id)


def policy_region(start: int, end: int, policy: TimestampPolicy) -> tuple[int, int]:
    """Inclusive frame range a timestamp may be drawn from within one phase.

    Start/middle/end regions cover 10% of the phase, rounded up to at least
    one frame.
    """
    length = end - start + 1
    if policy == "random":
        return start, end
    width = max(1, math.ceil(0.1 * length))
    if policy == "start":
        return start, start + width - 1
    if policy == "end":
        return end - width + 1, end
    if policy == "middle":
        lo = start + (length - width) // 2
        return lo, lo + width - 1
    raise ConfigError(f"unknown timestamp policy {policy!r}")


def sample_timestamps(
    gt: LabelSequence,
    policy: TimestampPolicy = "random",
    seed: int | np.random.Generator | None = 0,
    num_classes: Optional[int] = None,
) -> AnnotationSet:
    """Simulate a one-click-per-phase annotator from dense ground truth."""
    labels = as_label_array(gt)
    if labels.size == 0 or np.any(labels == 0):
        raise PreconditionError("ground truth must be fully labeled")
    if policy not in POLICIES:
        raise ConfigError(f"unknown timestamp policy {policy!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    stamps = []
    for start, end, cls in label_runs(labels):
        lo, hi = policy_region(start, end, policy)
        stamps.append((int(rng.integers(lo, hi + 1)), cls))
    sid = gt.sequence_id if isinstance(gt, LabelSequence) else ""
    return AnnotationSet(
        sequence_id=sid,
        num_frames=labels.size,
        num_classes=num_classes or int(labels.max()),
        timestamps=tuple(stamps),
        full_labels=LabelSequence(labels, sid),
    )


def clean_gt_with_uatd(gt: LabelSequence, pseudo: LabelSequence) -> LabelSequence:
    """Drop ground-truth labels wherever diffusion left a frame unlabeled."""
    g, p = as_label_array(gt), as_label_array(pseudo)
    if g.shape != p.shape:
        raise PreconditionError(f"length mismatch: {g.size} vs {p.size}")
    sid = gt.sequence_id if isinstance(gt, LabelSequence) else ""
    return LabelSequence(np.where(p == 0, 0, g), sid)


def mask_fixed_width(gt: LabelSequence, width: int) -> LabelSequence:
    """Unlabel ``width`` frames on each side of every phase boundary.

    Masks may swallow short phases entirely, timestamp frames included.
    """
    if width < 0:
        raise ConfigError("mask width must be >= 0")
    g = as_label_array(gt)
    out = g.copy()
    if width:
        # boundary b sits between 0-based indices b-1 and b
        for b in np.flatnonzero(g[1:] != g[:-1]) + 1:
            out[max(0, b - width) : b + width] = 0
    sid = gt.sequence_id if isinstance(gt, LabelSequence) else ""
    return LabelSequence(out, sid)
