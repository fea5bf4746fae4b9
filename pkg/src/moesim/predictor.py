"""Critical-expert prediction during drafting.

The real system feeds draft-model attention outputs into the target
model's gating networks. Without real tensors, the ``fidelity`` knob
stands in for draft/target similarity: predicted scores are a convex
mixture of the ground-truth gating scores and a fresh uniform-simplex
draw, calibrated so top-1 accuracy matches measured behavior. The
coarse-history strategy ranks experts by how often they activated so
far; the random strategy is the uniform control.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trace import ActivationTrace, LayerActivation, top_k_indices


class PredictionStrategy(str, enum.Enum):
    GATING_BASED = "gating_based"
    COARSE_HISTORY = "coarse_history"
    RANDOM = "random"


@dataclass(frozen=True)
class PredictorModel:
    """Immutable predictor configuration.

    fidelity=1 reproduces ground-truth gating scores exactly; fidelity=0
    is statistically indistinguishable from the random strategy.
    """

    fidelity: float
    noise_seed: int
    strategy: PredictionStrategy = PredictionStrategy.GATING_BASED

    def __post_init__(self):
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValueError("fidelity must be in [0, 1]")


@dataclass(frozen=True)
class CriticalExpertSet:
    """Top-k predicted experts for one layer, descending score order."""

    layer: int
    experts: tuple[int, ...]
    scores: tuple[float, ...]


class HistoryCounter:
    """Per-layer activation frequency counts over past tokens (no decay)."""

    def __init__(self, num_layers: int, experts_per_layer: int):
        self.counts = np.zeros((num_layers, experts_per_layer), dtype=np.int64)

    def record(self, layer: int, experts: Sequence[int]) -> None:
        for e in experts:
            self.counts[layer, e] += 1

    def scores(self, layer: int) -> np.ndarray:
        """Normalized counts; uniform when the layer has no history yet."""
        row = self.counts[layer]
        total = row.sum()
        if total == 0:
            return np.full(row.shape[0], 1.0 / row.shape[0])
        return row / total


def _noise_rng(model: PredictorModel, token_index: int, layer: int) -> np.random.Generator:
    # one stream per (seed, token, layer): reproducible regardless of call order
    return np.random.default_rng([model.noise_seed, token_index, layer])


def predict_scores(
    model: PredictorModel,
    layer: int,
    truth: LayerActivation,
    history: HistoryCounter | None = None,
    token_index: int = 0,
) -> np.ndarray:
    """Predicted expert scores for one (token, layer); always a probability vector."""
    E = len(truth.gating_scores)
    if model.strategy is PredictionStrategy.COARSE_HISTORY:
        if history is None:
            raise ValueError("coarse-history prediction requires a HistoryCounter")
        return history.scores(layer)
    rng = _noise_rng(model, token_index, layer)
    noise = rng.dirichlet(np.ones(E))
    if model.strategy is PredictionStrategy.RANDOM:
        return noise
    mixed = model.fidelity * np.asarray(truth.gating_scores) + (1.0 - model.fidelity) * noise
    return mixed / mixed.sum()


def select_critical(scores: Sequence[float], k: int, layer: int = 0) -> CriticalExpertSet:
    """Top-k experts by score, ties broken by lowest index."""
    arr = np.asarray(scores, dtype=float)
    if k > arr.shape[0]:
        raise ValueError(f"k={k} exceeds score vector length {arr.shape[0]}")
    experts = top_k_indices(arr, k)
    return CriticalExpertSet(layer=layer, experts=experts, scores=tuple(float(x) for x in arr))


def run_predictor_over_trace(
    model: PredictorModel,
    trace: ActivationTrace,
    k: int,
    layers: Sequence[int] | None = None,
) -> list[list[CriticalExpertSet]]:
    """Predict critical experts for every (token, layer) of a trace.

    History is updated causally: token t's prediction sees activations of
    tokens < t only.
    """
    layer_ids = list(layers) if layers is not None else list(range(trace.num_layers))
    history = HistoryCounter(trace.num_layers, trace.experts_per_layer)
    out: list[list[CriticalExpertSet]] = []
    for t in range(trace.num_tokens):
        row = []
        for l in layer_ids:
            truth = trace.layer(t, l)
            scores = predict_scores(model, l, truth, history, token_index=t)
            row.append(select_critical(scores, k, layer=l))
        out.append(row)
        for l in range(trace.num_layers):
            history.record(l, trace.layer(t, l).required())
    return out


def prediction_accuracy(
    predicted: Sequence[Sequence[CriticalExpertSet]],
    trace: ActivationTrace,
    mode: str = "top1",
) -> list[float]:
    """Per-layer accuracy of a prediction stream against trace ground truth.

    ``top1`` counts a prediction correct when its highest-scored expert is
    in the token's routed activation set; ``set`` requires the predicted
    set to equal the activation set exactly.
    """
    if mode not in ("top1", "set"):
        raise ValueError("mode must be 'top1' or 'set'")
    if len(predicted) != trace.num_tokens:
        raise ValueError(
            f"misaligned streams: {len(predicted)} predictions for {trace.num_tokens} tokens"
        )
    layer_ids = [c.layer for c in predicted[0]]
    hits = {l: 0 for l in layer_ids}
    for t, row in enumerate(predicted):
        if [c.layer for c in row] != layer_ids:
            raise ValueError(f"misaligned streams: layer mismatch at token {t}")
        for crit in row:
            truth = set(trace.layer(t, crit.layer).activated)
            if mode == "top1":
                ok = crit.experts[0] in truth
            else:
                ok = set(crit.experts) == truth
            if ok:
                hits[crit.layer] += 1
    return [hits[l] / trace.num_tokens for l in layer_ids]
