"""Monte Carlo dropout uncertainty estimation."""
from __future__ import annotations

from typing import Optional, Protocol, runtime_checkable

import numpy as np
import torch

from .core import ConfigError, FeatureSequence, ProbabilityStack, UncertaintySequence


@runtime_checkable
class StochasticClassifier(Protocol):
    num_classes: int

    def predict_proba(self, inputs: np.ndarray, stochastic: bool = False) -> np.ndarray:
        """T x C class probabilities; fresh dropout masks when ``stochastic``."""
        ...


def collect_probability_stack(
    model: StochasticClassifier,
    inputs: FeatureSequence | np.ndarray,
    k_passes: int = 5,
    seed: Optional[int] = 0,
) -> ProbabilityStack:
    """Run ``k_passes`` dropout-active forward passes over one sequence.

    The global torch RNG is forked, so seeding here never disturbs a
    surrounding training run. ``seed=None`` draws from the current RNG state.
    """
    if k_passes < 1:
        raise ConfigError("k_passes must be >= 1")
    x = inputs.frames if isinstance(inputs, FeatureSequence) else np.asarray(inputs)
    passes = []
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        for _ in range(k_passes):
            p = np.asarray(model.predict_proba(x, stochastic=True))
            if p.ndim != 2 or p.shape[1] != model.num_classes:
                raise ConfigError(
                    f"model returned shape {p.shape}, expected (T, {model.num_classes})"
                )
            passes.append(p)
    return ProbabilityStack(np.stack(passes))


def estimate(stack: ProbabilityStack | np.ndarray) -> UncertaintySequence:
    """Mean prediction, winning class and its spread across passes.

    The uncertainty of frame t is the population standard deviation (divide
    by K) of the winning class's probability over the K passes. Argmax ties
    resolve to the lowest class index.
    """
    probs = stack.probs if isinstance(stack, ProbabilityStack) else np.asarray(stack)
    # per-column sort makes the result exactly invariant to pass order
    probs = np.sort(probs.astype(np.float64), axis=0)
    mean = probs.mean(axis=0)
    winner = np.argmax(mean, axis=1)  # first maximum wins ties
    column = np.take_along_axis(probs, winner[None, :, None], axis=2)[..., 0]
    spread = column.std(axis=0, ddof=0)
    return UncertaintySequence(
        predicted_class=winner + 1, uncertainty=spread, mean_probs=mean
    )
