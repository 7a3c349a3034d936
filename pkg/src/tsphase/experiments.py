"""Study runners shared by the CLI and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .core import AnnotationSet, DiffusionConfig, FeatureSequence, LabelSequence, TrainConfig
from .diffusion import clean_gt_with_uatd, mask_fixed_width
from .metrics import PhaseMetrics, phase_metrics, pseudo_label_quality
from .models import SpatialConfig, SpatialModel, TemporalConfig, TemporalModel
from .training import LoopResult, Labeler, loop_train, predict

Video = tuple[FeatureSequence, AnnotationSet]


@dataclass(frozen=True)
class ModelSizes:
    hidden: int = 64
    layers: int = 10
    channels: int = 64
    causal: bool = False


def build_models(
    dim: int,
    num_classes: int,
    seed: int,
    sizes: ModelSizes = ModelSizes(),
    dropout: float = 0.5,
) -> tuple[SpatialModel, TemporalModel]:
    torch.manual_seed(seed)
    spatial = SpatialModel(SpatialConfig(dim, num_classes, sizes.hidden, dropout))
    temporal = TemporalModel(
        TemporalConfig(sizes.hidden, num_classes, sizes.layers, sizes.channels, dropout, sizes.causal)
    )
    return spatial, temporal


@dataclass
class RunOutcome:
    method: str
    result: LoopResult
    test_metrics: Optional[PhaseMetrics]
    predictions: dict[str, LabelSequence] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.test_metrics.accuracy if self.test_metrics else float("nan")

    def history_quality(self, annotations: Sequence[AnnotationSet]) -> list[dict]:
        """Labelling rate/accuracy (percent) for the timestamps and every snapshot."""
        gts = {a.sequence_id: a.full_labels for a in annotations}
        ids = list(gts)
        rows = []
        rate, acc = pseudo_label_quality([a.to_labels() for a in annotations], [gts[i] for i in ids])
        rows.append({"stage": "timestamps", "loop": 0, "round": 0, "rate": rate, "accuracy": acc})
        for snap in self.result.history:
            rate, acc = pseudo_label_quality(
                [snap.labels[i] for i in ids], [gts[i] for i in ids]
            )
            rows.append(
                {"stage": snap.stage, "loop": snap.loop, "round": snap.round, "rate": rate, "accuracy": acc}
            )
        return rows


def evaluate(spatial, temporal, test: Sequence[Video], averaging="pooled"):
    preds = {f.sequence_id: predict(spatial, temporal, f) for f, _ in test}
    gts = [a.full_labels for _, a in test]
    metrics = phase_metrics([preds[f.sequence_id] for f, _ in test], gts, averaging)
    return metrics, preds


def run_method(
    train: Sequence[Video],
    test: Sequence[Video],
    method: Labeler,
    config: TrainConfig,
    diffusion: DiffusionConfig = DiffusionConfig(),
    sizes: ModelSizes = ModelSizes(),
    fixed_labels: Optional[Mapping[str, LabelSequence]] = None,
) -> RunOutcome:
    """Train from scratch with one pseudo-labeling method and score on ``test``."""
    start = time.perf_counter()
    f0, a0 = train[0]
    spatial, temporal = build_models(
        f0.dim, a0.num_classes, config.seed, sizes, diffusion.dropout_rate
    )
    result = loop_train(
        [f for f, _ in train],
        [a for _, a in train],
        spatial,
        temporal,
        config,
        diffusion,
        labeler=method,
        fixed_labels=fixed_labels,
    )
    metrics, preds = evaluate(spatial, temporal, test) if test else (None, {})
    return RunOutcome(method, result, metrics, preds, time.perf_counter() - start)


def cleaned_ground_truth(
    train: Sequence[Video],
    kind: str,
    pseudo: Optional[Mapping[str, LabelSequence]] = None,
    width: int = 0,
) -> dict[str, LabelSequence]:
    """Ground truth masked by diffusion output (``uatd``) or a fixed ``width``."""
    out = {}
    for _, ann in train:
        gt = ann.full_labels
        if kind == "uatd":
            out[ann.sequence_id] = clean_gt_with_uatd(gt, pseudo[ann.sequence_id])
        elif kind == "fixed-width":
            out[ann.sequence_id] = mask_fixed_width(gt, width)
        elif kind == "none":
            out[ann.sequence_id] = gt
        else:
            raise ValueError(f"unknown cleaning kind {kind!r}")
    return out
