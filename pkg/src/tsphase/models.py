"""Reference per-frame and temporal models.

``SpatialModel`` stands in for the frame encoder plus classifier head and
works on precomputed feature vectors. ``TemporalModel`` is a single-stage
dilated residual TCN in the MS-TCN style, optionally causal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigError


@dataclass(frozen=True)
class SpatialConfig:
    in_dim: int
    num_classes: int
    hidden: int = 64
    dropout: float = 0.5


@dataclass(frozen=True)
class TemporalConfig:
    in_dim: int
    num_classes: int
    layers: int = 10
    channels: int = 64
    dropout: float = 0.5
    causal: bool = False


def _shrink_(layer: nn.Module, scale: float = 0.1) -> None:
    # small output layer so an untrained model predicts close to uniform
    with torch.no_grad():
        layer.weight.mul_(scale)
        layer.bias.zero_()


class _ProbaMixin:
    num_classes: int

    def _check_input(self, x, width):
        x = torch.as_tensor(np.array(x, dtype=np.float32))
        if x.ndim != 2 or x.shape[1] != width:
            raise ConfigError(f"expected input of shape (T, {width}), got {tuple(x.shape)}")
        return x

    def predict_proba(self, inputs, stochastic: bool = False) -> np.ndarray:
        """T x C probabilities. ``stochastic`` keeps dropout active."""
        was_training = self.training
        self.train(stochastic)
        try:
            with torch.no_grad():
                logits = self(inputs)
        finally:
            self.train(was_training)
        return F.softmax(logits.double(), dim=-1).numpy()


class SpatialModel(_ProbaMixin, nn.Module):
    """Two-layer perceptron; dropout sits between the embedding and the head."""

    def __init__(self, config: SpatialConfig):
        super().__init__()
        self.config = config
        self.num_classes = config.num_classes
        self.encoder = nn.Sequential(nn.Linear(config.in_dim, config.hidden), nn.ReLU())
        self.dropout = nn.Dropout(config.dropout)
        self.head = nn.Linear(config.hidden, config.num_classes)
        _shrink_(self.head)

    @property
    def embed_dim(self) -> int:
        return self.config.hidden

    def forward(self, x):
        if not isinstance(x, torch.Tensor):
            x = self._check_input(x, self.config.in_dim)
        return self.head(self.dropout(self.encoder(x)))

    def embed(self, inputs) -> np.ndarray:
        """Deterministic frame embeddings fed to the temporal model."""
        x = self._check_input(inputs, self.config.in_dim)
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self.encoder(x).numpy()
        finally:
            self.train(was_training)


class DilatedResidualLayer(nn.Module):
    def __init__(self, dilation: int, channels: int, dropout: float, causal: bool):
        super().__init__()
        self.dilation = dilation
        self.causal = causal
        self.conv_dilated = nn.Conv1d(channels, channels, 3, dilation=dilation)
        self.conv_1x1 = nn.Conv1d(channels, channels, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        d = self.dilation
        pad = (2 * d, 0) if self.causal else (d, d)
        out = F.relu(self.conv_dilated(F.pad(x, pad)))
        out = self.dropout(self.conv_1x1(out))
        return x + out


class TemporalModel(_ProbaMixin, nn.Module):
    def __init__(self, config: TemporalConfig):
        super().__init__()
        if config.layers < 1 or config.channels < 1:
            raise ConfigError("temporal model needs at least one layer and channel")
        self.config = config
        self.num_classes = config.num_classes
        self.conv_in = nn.Conv1d(config.in_dim, config.channels, 1)
        self.layers = nn.ModuleList(
            DilatedResidualLayer(2**i, config.channels, config.dropout, config.causal)
            for i in range(config.layers)
        )
        self.conv_out = nn.Conv1d(config.channels, config.num_classes, 1)
        _shrink_(self.conv_out)

    @property
    def receptive_field(self) -> int:
        """Frames reachable on each side (acausal) or backwards (causal)."""
        reach = 2**self.config.layers - 1
        return 2 * reach if self.config.causal else reach

    def forward(self, x):
        """Logits. Accepts (T, D) or batched (B, T, D)."""
        if not isinstance(x, torch.Tensor):
            x = self._check_input(x, self.config.in_dim)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = self.conv_in(x.transpose(1, 2))
        for layer in self.layers:
            h = layer(h)
        out = self.conv_out(h).transpose(1, 2)
        return out[0] if squeeze else out


def manifest(model: nn.Module) -> dict:
    kind = "spatial" if isinstance(model, SpatialModel) else "temporal"
    return {"kind": kind, **asdict(model.config)}


def from_manifest(info: dict) -> nn.Module:
    info = dict(info)
    kind = info.pop("kind")
    if kind == "spatial":
        return SpatialModel(SpatialConfig(**info))
    if kind == "temporal":
        return TemporalModel(TemporalConfig(**info))
    raise ConfigError(f"unknown model kind {kind!r}")


def spatial_forward(model: SpatialModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic probabilities and embeddings for one sequence."""
    x = getattr(features, "frames", features)
    return model.predict_proba(x), model.embed(x)


def temporal_forward(model: TemporalModel, embeddings) -> np.ndarray:
    return model.predict_proba(embeddings)
