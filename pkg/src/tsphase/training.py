"""Losses and the alternating (loop) training procedure."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    AnnotationSet,
    CENormalization,
    DiffusionConfig,
    FeatureSequence,
    LabelSequence,
    PreconditionError,
    TrainConfig,
)
from .diffusion import naive_baseline, temporal_diffusion, uniform_baseline
from .models import SpatialModel, TemporalModel
from .uncertainty import collect_probability_stack, estimate

log = logging.getLogger(__name__)

Labeler = Literal["uatd", "naive", "uniform", "fixed"]
LOG_EPS = math.log(1e-8)


def _log_probs(probs: torch.Tensor, log_input: bool) -> torch.Tensor:
    if log_input:
        return probs
    return torch.log(probs.clamp_min(1e-8))


def masked_cross_entropy(
    probs: torch.Tensor,
    labels,
    normalization: CENormalization = "sequence_length",
    log_input: bool = False,
) -> torch.Tensor:
    """Negative log-likelihood summed over labeled frames only.

    ``probs`` is T x C (log-probabilities if ``log_input``). Frames with
    label 0 contribute nothing. The sum is divided by T, or by the number of
    labeled frames with ``normalization="labeled_count"``.
    """
    logp = _log_probs(probs, log_input)
    if not isinstance(labels, torch.Tensor):
        labels = torch.as_tensor(np.array(getattr(labels, "labels", labels), dtype=np.int64))
    if labels.shape[0] != logp.shape[0]:
        raise PreconditionError(f"{labels.shape[0]} labels for {logp.shape[0]} frames")
    mask = labels != 0
    picked = logp[mask, labels[mask] - 1]
    total = -picked.sum()
    if normalization == "sequence_length":
        denom = labels.shape[0]
    elif normalization == "labeled_count":
        denom = max(int(mask.sum()), 1)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return total / denom


def smoothing_loss(probs: torch.Tensor, gamma: float = 4.0, log_input: bool = False) -> torch.Tensor:
    """Truncated squared log-ratio between adjacent frames.

    Each term is the squared absolute log difference when it is below
    ``gamma``, else the constant ``gamma`` (not ``gamma**2``). The sum is
    divided by T * C.
    """
    logp = _log_probs(probs, log_input)
    if log_input:
        logp = logp.clamp_min(LOG_EPS)
    T, C = logp.shape
    if T < 2:
        return logp.sum() * 0.0
    diff = logp[1:] - logp[:-1]
    terms = torch.where(diff.abs() < gamma, diff**2, torch.full_like(diff, gamma))
    return terms.sum() / (T * C)


def combined_loss(
    probs: torch.Tensor,
    labels,
    lambda_smooth: float = 0.015,
    gamma: float = 4.0,
    normalization: CENormalization = "sequence_length",
    log_input: bool = False,
) -> torch.Tensor:
    ce = masked_cross_entropy(probs, labels, normalization, log_input)
    if lambda_smooth == 0:
        return ce
    return ce + lambda_smooth * smoothing_loss(probs, gamma, log_input)


def _label_array(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels), dtype=np.int64)


def optimize_spatial(
    model: SpatialModel,
    dataset: Sequence[tuple[np.ndarray, LabelSequence]],
    config: TrainConfig,
    batch_hook: Optional[Callable[[torch.Tensor], None]] = None,
) -> list[float]:
    """Fit the per-frame classifier on labeled frames only.

    Unlabeled frames never enter a batch. Returns the mean loss per epoch;
    ``model`` is updated in place.
    """
    xs, ys = [], []
    for x, labels in dataset:
        y = _label_array(labels)
        keep = y != 0
        xs.append(np.asarray(getattr(x, "frames", x), dtype=np.float32)[keep])
        ys.append(y[keep])
    X = torch.from_numpy(np.concatenate(xs)) if xs else torch.zeros(0)
    Y = torch.from_numpy(np.concatenate(ys)) if ys else torch.zeros(0, dtype=torch.long)
    if Y.numel() == 0:
        raise PreconditionError("no labeled frames to train the spatial model on")

    opt = torch.optim.Adam(
        model.parameters(), lr=config.spatial_lr, weight_decay=config.spatial_weight_decay
    )
    sched = torch.optim.lr_scheduler.StepLR(
        opt, step_size=config.spatial_step_size, gamma=config.spatial_step_gamma
    )
    model.train()
    losses = []
    for _ in range(config.spatial_epochs):
        order = torch.randperm(Y.numel())
        running, count = 0.0, 0
        for start in range(0, Y.numel(), config.spatial_batch_size):
            idx = order[start : start + config.spatial_batch_size]
            yb = Y[idx]
            assert bool((yb != 0).all()), "unlabeled frame sampled into a spatial batch"
            if batch_hook is not None:
                batch_hook(yb)
            logp = F.log_softmax(model(X[idx]), dim=-1)
            loss = masked_cross_entropy(logp, yb, "labeled_count", log_input=True)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * yb.numel()
            count += yb.numel()
        sched.step()
        losses.append(running / count)
    model.eval()
    return losses


def optimize_temporal(
    model: TemporalModel,
    dataset: Sequence[tuple[np.ndarray, LabelSequence]],
    config: TrainConfig,
) -> list[float]:
    """Fit the temporal model on whole sequences with CE plus smoothing.

    Returns the mean loss per epoch; ``model`` is updated in place.
    """
    seqs = [
        (torch.as_tensor(np.asarray(x), dtype=torch.float32), _label_array(y))
        for x, y in dataset
    ]
    if not any(np.any(y != 0) for _, y in seqs):
        raise PreconditionError("no labeled frames to train the temporal model on")

    opt = torch.optim.Adam(
        model.parameters(), lr=config.temporal_lr, weight_decay=config.temporal_weight_decay
    )
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.temporal_epochs)
    model.train()
    losses = []
    B = config.temporal_batch_size
    for _ in range(config.temporal_epochs):
        order = torch.randperm(len(seqs)).tolist()
        running = 0.0
        for start in range(0, len(order), B):
            batch = [seqs[i] for i in order[start : start + B]]
            loss = 0.0
            for x, y in batch:
                logp = F.log_softmax(model(x), dim=-1)
                loss = loss + combined_loss(
                    logp,
                    y,
                    config.lambda_smooth,
                    config.gamma,
                    config.ce_normalization,
                    log_input=True,
                )
            loss = loss / len(batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(batch)
        sched.step()
        losses.append(running / len(seqs))
    model.eval()
    return losses


@dataclass
class Snapshot:
    """Pseudo labels produced by one diffusion step."""

    stage: str  # "spatial" or "temporal"
    loop: int  # 0 for the spatial warm-up, 1..m for loop iterations
    round: int
    labels: dict[str, LabelSequence]

    def labelling_rate(self) -> float:
        total = sum(len(v) for v in self.labels.values())
        return sum(v.num_labeled for v in self.labels.values()) / total


@dataclass
class LoopResult:
    spatial: SpatialModel
    temporal: TemporalModel
    history: list[Snapshot] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)

    @property
    def final_labels(self) -> dict[str, LabelSequence]:
        return self.history[-1].labels if self.history else {}


def uatd(
    model,
    inputs: np.ndarray,
    ann: AnnotationSet,
    dcfg: DiffusionConfig,
    seed: Optional[int] = 0,
) -> LabelSequence:
    """Pseudo labels for one sequence from a model's MC-dropout uncertainty."""
    stack = collect_probability_stack(model, inputs, dcfg.mc_passes, seed=seed)
    return temporal_diffusion(estimate(stack), ann, dcfg.tau, dcfg.mode)


def _seed_for(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def loop_train(
    features: Sequence[FeatureSequence],
    annotations: Sequence[AnnotationSet],
    spatial: SpatialModel,
    temporal: TemporalModel,
    config: TrainConfig,
    diffusion: DiffusionConfig = DiffusionConfig(),
    labeler: Labeler = "uatd",
    fixed_labels: Optional[Mapping[str, LabelSequence]] = None,
) -> LoopResult:
    """Alternate spatial and temporal optimization with pseudo-label refresh.

    With ``labeler="uatd"`` every refresh diffuses from the original
    timestamps, never from the previous pseudo labels. The other labelers
    keep one fixed label set for the whole schedule (timestamps only,
    midpoint split, or caller-supplied ``fixed_labels``) so baselines share
    the same optimization budget.
    """
    if len(features) != len(annotations):
        raise PreconditionError("features and annotations differ in length")
    anns = {a.sequence_id: a for a in annotations}
    xs = {f.sequence_id: f.frames for f in features}
    ids = [f.sequence_id for f in features]
    if set(ids) != set(anns):
        raise PreconditionError("features and annotations cover different sequences")

    torch.manual_seed(config.seed)
    if labeler == "uatd" or labeler == "naive":
        pseudo = {i: naive_baseline(anns[i]) for i in ids}
    elif labeler == "uniform":
        pseudo = {i: uniform_baseline(anns[i]) for i in ids}
    elif labeler == "fixed":
        if fixed_labels is None:
            raise PreconditionError("labeler='fixed' needs fixed_labels")
        pseudo = {i: fixed_labels[i] for i in ids}
    else:
        raise ValueError(f"unknown labeler {labeler!r}")

    result = LoopResult(spatial, temporal)
    step = 0

    def refresh(model, inputs, stage, loop, rnd):
        nonlocal pseudo, step
        step += 1
        if labeler == "uatd":
            pseudo = {
                sid: uatd(model, inputs[sid], anns[sid], diffusion, _seed_for(config.seed, step, n))
                for n, sid in enumerate(ids)
            }
        result.history.append(Snapshot(stage, loop, rnd, dict(pseudo)))
        log.info(
            "%s loop %d round %d: labelling rate %.4f",
            stage, loop, rnd, result.history[-1].labelling_rate(),
        )

    def fit_spatial(loop, rnd):
        losses = optimize_spatial(spatial, [(xs[i], pseudo[i]) for i in ids], config)
        result.losses.append({"stage": "spatial", "loop": loop, "round": rnd, "losses": losses})

    for rnd in range(1, config.diffusion_rounds_spatial + 1):
        fit_spatial(0, rnd)
        refresh(spatial, xs, "spatial", 0, rnd)

    for loop in range(1, config.loop_iterations + 1):
        emb = {i: spatial.embed(xs[i]) for i in ids}
        for rnd in range(1, config.diffusion_rounds_temporal + 1):
            losses = optimize_temporal(temporal, [(emb[i], pseudo[i]) for i in ids], config)
            result.losses.append(
                {"stage": "temporal", "loop": loop, "round": rnd, "losses": losses}
            )
            refresh(temporal, emb, "temporal", loop, rnd)
        fit_spatial(loop, config.diffusion_rounds_temporal + 1)

    return result


def predict(spatial: SpatialModel, temporal: TemporalModel, features: FeatureSequence) -> LabelSequence:
    """Deterministic frame-wise phase prediction (classes 1..C)."""
    probs = temporal.predict_proba(spatial.embed(features.frames))
    return LabelSequence(np.argmax(probs, axis=1) + 1, features.sequence_id)
