"""Domain types shared across the package.

Frames are 1-indexed in every public interface (``t = 1..T``); arrays are
stored 0-based, so frame ``t`` lives at index ``t - 1``. Class ``0`` is the
"unlabeled" sentinel and phase classes run ``1..C``.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Literal, Optional, Sequence

import numpy as np

DiffusionMode = Literal["contiguous", "filter"]
CENormalization = Literal["sequence_length", "labeled_count"]


class ConfigError(ValueError):
    """Invalid configuration value."""


class PreconditionError(ValueError):
    """Operation called on inputs that violate its preconditions."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class _ArrayRecord:
    """Field-by-field equality that understands numpy arrays."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None:
                    return False
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


@dataclass(frozen=True, eq=False)
class FeatureSequence(_ArrayRecord):
    sequence_id: str
    frames: np.ndarray  # T x D, float32
    frame_rate: float = 1.0

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32)
        if frames.ndim == 1:
            frames = frames[:, None]
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D (T x D), got shape {frames.shape}")
        object.__setattr__(self, "frames", _frozen(frames))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True, eq=False)
class LabelSequence(_ArrayRecord):
    labels: np.ndarray  # length T, int64, 0 = unlabeled
    sequence_id: str = ""

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels != 0

    @property
    def num_labeled(self) -> int:
        return int(np.count_nonzero(self.labels))

    @property
    def is_fully_labeled(self) -> bool:
        return bool(np.all(self.labels != 0))

    def phases(self) -> list[tuple[int, int, int]]:
        """Maximal constant runs as ``(start, end, class)``, 1-indexed inclusive."""
        return label_runs(self.labels)


def label_runs(labels: np.ndarray) -> list[tuple[int, int, int]]:
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [labels.size]])
    return [(int(s) + 1, int(e), int(labels[s])) for s, e in zip(starts, ends)]


@dataclass(frozen=True, eq=False)
class AnnotationSet(_ArrayRecord):
    sequence_id: str
    num_frames: int
    num_classes: int
    timestamps: tuple[tuple[int, int], ...]
    full_labels: Optional[LabelSequence] = None

    def __post_init__(self):
        ts = tuple((int(t), int(c)) for t, c in self.timestamps)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "num_frames", int(self.num_frames))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        if self.full_labels is not None and not isinstance(self.full_labels, LabelSequence):
            object.__setattr__(
                self, "full_labels", LabelSequence(self.full_labels, self.sequence_id)
            )

    @property
    def frames(self) -> list[int]:
        return [t for t, _ in self.timestamps]

    @property
    def classes(self) -> list[int]:
        return [c for _, c in self.timestamps]

    def to_labels(self) -> LabelSequence:
        """Sparse label sequence holding only the timestamp frames."""
        out = np.zeros(self.num_frames, dtype=np.int64)
        for t, c in self.timestamps:
            out[t - 1] = c
        return LabelSequence(out, self.sequence_id)

    def violations(self) -> list[str]:
        problems = []
        T, C = self.num_frames, self.num_classes
        if T < 1:
            problems.append("num_frames must be >= 1")
        if C < 1:
            problems.append("num_classes must be >= 1")
        N = len(self.timestamps)
        if N < 1:
            problems.append("no timestamps")
        if N > max(T, 0):
            problems.append("more timestamps than frames")
        for t, c in self.timestamps:
            if not 1 <= t <= T:
                problems.append(f"timestamp frame {t} outside 1..{T}")
            if not 1 <= c <= C:
                problems.append(f"timestamp class {c} at frame {t} outside 1..{C}")
        frames = self.frames
        if any(b <= a for a, b in zip(frames, frames[1:])):
            problems.append("timestamps not increasing")
        for (t1, c1), (t2, c2) in zip(self.timestamps, self.timestamps[1:]):
            if c1 == c2:
                problems.append(f"adjacent timestamps at frames {t1} and {t2} share class {c1}")
        if self.full_labels is not None:
            fl = self.full_labels.labels
            if fl.shape[0] != T:
                problems.append("full_labels length mismatch")
            elif fl.size and (fl.min() < 0 or fl.max() > C):
                problems.append(f"full_labels values outside 0..{C}")
        return problems


@dataclass(frozen=True, eq=False)
class ProbabilityStack(_ArrayRecord):
    probs: np.ndarray  # K x T x C, float32

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float32)
        if probs.ndim != 3:
            raise ValueError(f"probs must be K x T x C, got shape {probs.shape}")
        if probs.shape[0] < 1:
            raise ValueError("probability stack needs K >= 1")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("probabilities must be finite and nonnegative")
        if not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-5):
            raise ValueError("every probability row must sum to 1")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape


@dataclass(frozen=True, eq=False)
class UncertaintySequence(_ArrayRecord):
    predicted_class: np.ndarray  # length T, values 1..C
    uncertainty: np.ndarray  # length T, >= 0
    mean_probs: np.ndarray  # T x C

    def __post_init__(self):
        object.__setattr__(
            self, "predicted_class", _frozen(np.array(self.predicted_class, dtype=np.int64))
        )
        object.__setattr__(
            self, "uncertainty", _frozen(np.array(self.uncertainty, dtype=np.float64))
        )
        object.__setattr__(
            self, "mean_probs", _frozen(np.array(self.mean_probs, dtype=np.float64))
        )

    def __len__(self) -> int:
        return self.predicted_class.shape[0]


@dataclass(frozen=True)
class DiffusionConfig:
    tau: float = 0.1
    mode: DiffusionMode = "contiguous"
    mc_passes: int = 5
    dropout_rate: float = 0.5

    def __post_init__(self):
        if not (self.tau > 0):
            raise ConfigError(f"tau must be > 0 (or inf), got {self.tau}")
        if self.mode not in ("contiguous", "filter"):
            raise ConfigError(f"unknown diffusion mode {self.mode!r}")
        if self.mc_passes < 2:
            raise ConfigError("mc_passes must be >= 2 for uncertainty estimation")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    """Loop-training schedule and optimizer settings.

    Defaults are a short fine-tuning schedule that assumes a pretrained
    image backbone; :meth:`desk_scale` returns the settings used
    for synthetic runs where both models start from random weights.
    """

    diffusion_rounds_spatial: int = 2
    diffusion_rounds_temporal: int = 4
    loop_iterations: int = 2
    lambda_smooth: float = 0.015
    gamma: float = 4.0
    ce_normalization: CENormalization = "sequence_length"
    # spatial stage
    spatial_lr: float = 1e-4
    spatial_weight_decay: float = 1e-5
    spatial_step_size: int = 2
    spatial_step_gamma: float = 0.5
    spatial_epochs: int = 5
    spatial_batch_size: int = 8
    # temporal stage
    temporal_lr: float = 1e-3
    temporal_weight_decay: float = 0.0
    temporal_epochs: int = 5
    temporal_batch_size: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in (
            "diffusion_rounds_spatial",
            "diffusion_rounds_temporal",
            "loop_iterations",
            "spatial_epochs",
            "spatial_batch_size",
            "spatial_step_size",
            "temporal_epochs",
            "temporal_batch_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lambda_smooth < 0:
            raise ConfigError("lambda_smooth must be >= 0")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if self.ce_normalization not in ("sequence_length", "labeled_count"):
            raise ConfigError(f"unknown ce_normalization {self.ce_normalization!r}")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        params = dict(
            spatial_lr=1e-2,
            spatial_epochs=30,
            spatial_batch_size=32,
            spatial_step_size=10,
            temporal_epochs=8,
        )
        params.update(overrides)
        return cls(**params)


def validate(annotation: AnnotationSet, features: FeatureSequence) -> list[str]:
    """Return every invariant violated by an annotation/feature pair.

    An empty list means the pair is usable. Nothing is raised.
    """
    problems = []
    if annotation.sequence_id != features.sequence_id:
        problems.append(
            f"sequence_id mismatch: {annotation.sequence_id!r} vs {features.sequence_id!r}"
        )
    frames = features.frames
    if frames.shape[0] < 1:
        problems.append("feature sequence is empty")
    if frames.shape[1] < 1:
        problems.append("feature dimension is zero")
    if not np.all(np.isfinite(frames)):
        problems.append("non-finite feature values")
    if annotation.num_frames != frames.shape[0]:
        problems.append(
            f"length mismatch: num_frames={annotation.num_frames}, T={frames.shape[0]}"
        )
    problems.extend(annotation.violations())
    return problems


def as_label_array(labels: LabelSequence | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(labels, LabelSequence):
        return labels.labels
    return np.asarray(labels, dtype=np.int64)
