"""Synthetic phase-structured feature sequences.

Each class owns a centroid; frames are centroid plus isotropic Gaussian
noise. Within ``ambiguity`` frames of every phase boundary the clean signal
blends linearly between the two neighbouring centroids, which gives the
ambiguous transition frames a real workflow video has.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AnnotationSet, ConfigError, FeatureSequence, LabelSequence
from .diffusion import TimestampPolicy, sample_timestamps


@dataclass(frozen=True)
class SynthSpec:
    num_videos: int = 30
    num_classes: int = 5
    t_range: tuple[int, int] = (150, 250)
    dim: int = 16
    phase_len_range: tuple[int, int] = (25, 60)
    separation: float = 4.0
    ambiguity: int = 5
    noise: float = 1.0

    def check(self) -> None:
        lo_t, hi_t = self.t_range
        lo_p, hi_p = self.phase_len_range
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.dim < self.num_classes:
            raise ConfigError("dim must be >= num_classes for equidistant centroids")
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if not 1 <= lo_t <= hi_t:
            raise ConfigError(f"bad t_range {self.t_range}")
        if not 1 <= lo_p <= hi_p:
            raise ConfigError(f"bad phase_len_range {self.phase_len_range}")
        if self.ambiguity < 0 or lo_p < 2 * self.ambiguity + 1:
            raise ConfigError("shortest phase must be >= 2 * ambiguity + 1")
        if self.noise < 0 or self.separation <= 0:
            raise ConfigError("noise must be >= 0 and separation > 0")
        if not _feasible_lengths(self):
            raise ConfigError("no video length in t_range splits into allowed phases")


def _phase_counts(T: int, lo: int, hi: int) -> list[int]:
    return [n for n in range(max(1, math.ceil(T / hi)), T // lo + 1) if n * lo <= T <= n * hi]


def _feasible_lengths(spec: SynthSpec) -> list[int]:
    lo_p, hi_p = spec.phase_len_range
    return [
        T for T in range(spec.t_range[0], spec.t_range[1] + 1) if _phase_counts(T, lo_p, hi_p)
    ]


def class_centroids(rng: np.random.Generator, spec: SynthSpec) -> np.ndarray:
    """C x D centroids, every pair exactly ``separation`` apart."""
    q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.num_classes)))
    return (spec.separation / math.sqrt(2.0)) * q.T


def _split_length(rng, T: int, n: int, lo: int, hi: int) -> list[int]:
    lengths = np.full(n, lo)
    spare = T - n * lo
    while spare > 0:
        room = np.flatnonzero(lengths < hi)
        share = rng.dirichlet(np.ones(room.size)) * spare
        add = np.minimum(np.floor(share).astype(int), hi - lengths[room])
        if add.sum() == 0:
            add[rng.integers(room.size)] = 1
        lengths[room] += add
        spare -= int(add.sum())
    return lengths.tolist()


def _class_order(rng, n: int, C: int) -> list[int]:
    order = [int(rng.integers(1, C + 1))]
    for _ in range(n - 1):
        choices = [c for c in range(1, C + 1) if c != order[-1]]
        order.append(int(rng.choice(choices)))
    return order


def blend_weights(labels: np.ndarray, ambiguity: int) -> np.ndarray:
    """Blend weights for the ``ambiguity`` frames on each side of a boundary.

    Returns a T x 2 float array. Column 0 is the weight given to the other
    phase's centroid; column 1 is the 0-based index of a frame in that phase.
    Pure frames have weight 0.
    """
    T = labels.size
    alpha = np.zeros(T)
    partner = np.arange(T)
    if ambiguity == 0:
        return np.stack([alpha, partner.astype(float)], axis=1)
    for b in np.flatnonzero(labels[1:] != labels[:-1]) + 1:
        # b is the 0-based first frame of the new phase; the boundary sits at b - 0.5
        for j in range(b - ambiguity, b + ambiguity):
            a = (j - (b - ambiguity) + 0.5) / (2 * ambiguity)
            if j < b:
                alpha[j], partner[j] = a, b
            else:
                alpha[j], partner[j] = 1.0 - a, b - 1
    return np.stack([alpha, partner.astype(float)], axis=1)


def ambiguous_mask(labels: np.ndarray, ambiguity: int) -> np.ndarray:
    return blend_weights(np.asarray(labels), ambiguity)[:, 0] > 0


def _clean_signal(labels: np.ndarray, centroids: np.ndarray, ambiguity: int) -> np.ndarray:
    own = centroids[labels - 1]
    weights = blend_weights(labels, ambiguity)
    alpha = weights[:, :1]
    other = centroids[labels[weights[:, 1].astype(int)] - 1]
    return (1.0 - alpha) * own + alpha * other


def generate(
    seed: int,
    spec: SynthSpec = SynthSpec(),
    policy: TimestampPolicy = "random",
    prefix: str = "video",
) -> list[tuple[FeatureSequence, AnnotationSet]]:
    """Generate ``spec.num_videos`` sequences with dense labels and timestamps."""
    spec.check()
    rng = np.random.default_rng(seed)
    centroids = class_centroids(rng, spec)
    lengths = _feasible_lengths(spec)
    lo_p, hi_p = spec.phase_len_range
    out = []
    for v in range(spec.num_videos):
        sid = f"{prefix}_{v:03d}"
        T = int(rng.choice(lengths))
        n = int(rng.choice(_phase_counts(T, lo_p, hi_p)))
        runs = _split_length(rng, T, n, lo_p, hi_p)
        order = _class_order(rng, n, spec.num_classes)
        labels = np.repeat(order, runs).astype(np.int64)
        frames = _clean_signal(labels, centroids, spec.ambiguity)
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
        gt = LabelSequence(labels, sid)
        ann = sample_timestamps(gt, policy, rng, num_classes=spec.num_classes)
        out.append((FeatureSequence(sid, frames), ann))
    return out


def generate_split(
    seed: int,
    spec: SynthSpec = SynthSpec(),
    num_test: int = 10,
    policy: TimestampPolicy = "random",
):
    """Train/test split drawn from one generator run (shared centroids).

    The first ``spec.num_videos - num_test`` videos form the training set.
    """
    if not 0 < num_test < spec.num_videos:
        raise ConfigError("num_test must leave at least one training video")
    videos = generate(seed, spec, policy)
    cut = spec.num_videos - num_test
    return videos[:cut], videos[cut:]


def reannotate(
    videos: list[tuple[FeatureSequence, AnnotationSet]],
    policy: TimestampPolicy,
    seed: int,
) -> list[tuple[FeatureSequence, AnnotationSet]]:
    """Redraw timestamps for existing videos under another policy."""
    rng = np.random.default_rng(seed)
    out = []
    for feats, ann in videos:
        new = sample_timestamps(ann.full_labels, policy, rng, num_classes=ann.num_classes)
        out.append((feats, new))
    return out
