"""Per-token expert-activation traces and their statistics.

A trace is the simulator's workload: for every token and layer it stores
the gating score vector and the activated top-k expert set. Synthetic
traces come from a per-layer skewed base distribution (power-law over a
random expert permutation) blended token-to-token by a first-order
correlation mixture, which reproduces the neighboring-token overlap and
skewed-entropy behavior of real gating. Knobs ``skew`` and
``correlation`` are exposed so users can fit real workloads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelSpec


class TraceError(Exception):
    """Raised for malformed trace files or invalid trace queries."""


def top_k_indices(scores: Sequence[float], k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, ties broken by lowest index.

    Returned in descending score order so the first entry is the argmax.
    """
    arr = np.asarray(scores)
    if k > arr.shape[0]:
        raise ValueError(f"k={k} exceeds vector length {arr.shape[0]}")
    order = np.argsort(-arr, kind="stable")
    return tuple(int(i) for i in order[:k])


@dataclass(frozen=True)
class LayerActivation:
    """Gating scores and the resulting activation for one (token, layer).

    ``activated`` holds the routed top-k experts (descending score,
    ties by lowest index); ``shared`` marks always-active experts, kept
    separate from the routed set.
    """

    gating_scores: tuple[float, ...]
    activated: tuple[int, ...]
    shared: tuple[int, ...] = ()

    def required(self) -> tuple[int, ...]:
        """All experts this token needs at this layer, ascending."""
        return tuple(sorted(set(self.activated) | set(self.shared)))


@dataclass(frozen=True)
class TokenRecord:
    token_index: int
    per_layer: tuple[LayerActivation, ...]


@dataclass
class ActivationTrace:
    """Ordered token records plus the routing shape needed to rebuild them."""

    model_ref: str
    topk_activated: int
    shared_experts: int
    tokens: list[TokenRecord]
    seed: int | None = None

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    @property
    def num_layers(self) -> int:
        return len(self.tokens[0].per_layer) if self.tokens else 0

    @property
    def experts_per_layer(self) -> int:
        return len(self.tokens[0].per_layer[0].gating_scores) if self.tokens else 0

    def layer(self, token: int, layer: int) -> LayerActivation:
        return self.tokens[token].per_layer[layer]

    def matches_model(self, model: ModelSpec) -> bool:
        return (
            self.num_layers == model.num_layers
            and self.experts_per_layer == model.experts_per_layer
            and self.topk_activated == model.topk_activated
            and self.shared_experts == model.shared_experts
        )


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_synthetic_trace(
    model: ModelSpec,
    num_tokens: int,
    skew: float = 1.0,
    correlation: float = 0.0,
    seed: int = 0,
    concentration: float | None = None,
) -> ActivationTrace:
    """Generate a synthetic activation trace for ``model``.

    Each layer gets a base Dirichlet concentration proportional to
    ``rank**(-skew)`` over a random expert permutation; skew=0 makes every
    token's score vector an exchangeable draw, so activated sets are
    uniform random k-subsets. Each token's scores are
    ``correlation * previous + (1 - correlation) * fresh draw``,
    renormalized. The total ``concentration`` controls per-token
    sharpness; the default ``max(2, topk_activated)`` keeps individual
    gating vectors sharper than the layer's aggregate expert popularity,
    the way trained gates behave, while leaving signal in every routed
    slot. Deterministic for equal arguments.
    """
    if num_tokens < 1:
        raise ValueError("num_tokens must be >= 1")
    if skew < 0:
        raise ValueError("skew must be >= 0")
    if not 0.0 <= correlation <= 1.0:
        raise ValueError("correlation must be in [0, 1]")
    if concentration is None:
        concentration = max(2.0, float(model.topk_activated))
    if concentration <= 0:
        raise ValueError("concentration must be > 0")

    E = model.experts_per_layer
    rng = np.random.default_rng(seed)
    alphas = []
    for _ in range(model.num_layers):
        perm = rng.permutation(E)
        ranks = np.empty(E)
        ranks[perm] = np.arange(1, E + 1)
        weights = ranks ** (-skew)
        alphas.append(weights / weights.sum() * concentration)

    shared = tuple(range(model.shared_experts))
    prev: list[np.ndarray | None] = [None] * model.num_layers
    tokens: list[TokenRecord] = []
    for t in range(num_tokens):
        layers = []
        for l in range(model.num_layers):
            fresh = rng.dirichlet(alphas[l])
            if prev[l] is None:
                scores = fresh
            else:
                scores = correlation * prev[l] + (1.0 - correlation) * fresh
            scores = scores / scores.sum()
            prev[l] = scores
            activated = top_k_indices(scores, model.topk_activated)
            layers.append(
                LayerActivation(
                    gating_scores=tuple(float(x) for x in scores),
                    activated=activated,
                    shared=shared,
                )
            )
        tokens.append(TokenRecord(token_index=t, per_layer=tuple(layers)))
    return ActivationTrace(
        model_ref=model.name,
        topk_activated=model.topk_activated,
        shared_experts=model.shared_experts,
        tokens=tokens,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def activation_rate(trace: ActivationTrace, window: int) -> list[float]:
    """Per-layer mean fraction of experts touched by ``window`` consecutive tokens.

    For each layer, slides a window of N tokens over the trace and averages
    ``|union of required expert sets| / experts_per_layer``.
    """
    N = window
    if N < 1 or N > trace.num_tokens:
        raise TraceError(f"window must be in [1, {trace.num_tokens}], got {N}")
    E = trace.experts_per_layer
    rates = []
    for l in range(trace.num_layers):
        sets = [set(trace.layer(t, l).required()) for t in range(trace.num_tokens)]
        total = 0
        count = 0
        for start in range(trace.num_tokens - N + 1):
            union: set[int] = set()
            for t in range(start, start + N):
                union |= sets[t]
            total += len(union)
            count += 1
        rates.append(total / count / E)
    return rates


def overlap_percentage(trace: ActivationTrace, all_pairs: bool = False) -> tuple[list[float], float]:
    """Fraction of token pairs whose routed activation sets intersect.

    Adjacent pairs by default; ``all_pairs=True`` compares every pair in
    the trace. Shared experts are excluded (they would trivially overlap).
    Returns (per-layer rates, macro average).
    """
    if trace.num_tokens < 2:
        raise TraceError("overlap_percentage needs at least 2 tokens")
    per_layer = []
    for l in range(trace.num_layers):
        sets = [set(trace.layer(t, l).activated) for t in range(trace.num_tokens)]
        if all_pairs:
            pairs = [
                (i, j)
                for i in range(len(sets))
                for j in range(i + 1, len(sets))
            ]
        else:
            pairs = [(i, i + 1) for i in range(len(sets) - 1)]
        hits = sum(1 for i, j in pairs if sets[i] & sets[j])
        per_layer.append(hits / len(pairs))
    return per_layer, sum(per_layer) / len(per_layer)


def activation_entropy(probabilities: Sequence[float], tolerance: float = 1e-6) -> float:
    """Shannon entropy of a probability vector, in bits (0 log 0 := 0)."""
    p = np.asarray(probabilities, dtype=float)
    if p.min() < -tolerance:
        raise ValueError("probabilities must be nonnegative")
    total = p.sum()
    if abs(total - 1.0) > tolerance:
        raise ValueError(f"probabilities must sum to 1 (got {total})")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def mean_trace_entropy(trace: ActivationTrace) -> float:
    """Mean gating-score entropy over all (token, layer) pairs, in bits."""
    total = 0.0
    n = 0
    for tok in trace.tokens:
        for la in tok.per_layer:
            total += activation_entropy(la.gating_scores, tolerance=1e-6)
            n += 1
    return total / n


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_HEADER_PREFIX = "# trace-v1"


def save_trace(trace: ActivationTrace, path: str | Path) -> None:
    """Write the line-oriented trace format.

    Header carries the routing shape; one line per (token, layer) holds
    the comma-separated gating scores in token-major order. Activated
    sets are recomputed on load, never stored.
    """
    lines = [
        f"{_HEADER_PREFIX} model={trace.model_ref} layers={trace.num_layers}"
        f" experts={trace.experts_per_layer} topk={trace.topk_activated}"
        f" shared={trace.shared_experts}"
        f" seed={'none' if trace.seed is None else trace.seed}"
    ]
    for tok in trace.tokens:
        for la in tok.per_layer:
            lines.append(",".join(repr(s) for s in la.gating_scores))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trace(path: str | Path) -> ActivationTrace:
    """Parse a trace file; raises TraceError with a line number on failure."""
    path = Path(path)
    if not path.exists():
        raise TraceError(f"file not found: {path}")
    raw = path.read_text().splitlines()
    if not raw:
        raise TraceError(f"{path}:1: empty trace file")
    header = raw[0]
    if not header.startswith(_HEADER_PREFIX):
        raise TraceError(f"{path}:1: missing trace header")
    fields = {}
    for part in header[len(_HEADER_PREFIX):].split():
        if "=" not in part:
            raise TraceError(f"{path}:1: malformed header field {part!r}")
        key, value = part.split("=", 1)
        fields[key] = value
    try:
        model_ref = fields["model"]
        num_layers = int(fields["layers"])
        experts = int(fields["experts"])
        topk = int(fields["topk"])
        shared_n = int(fields["shared"])
        seed = None if fields["seed"] == "none" else int(fields["seed"])
    except (KeyError, ValueError) as exc:
        raise TraceError(f"{path}:1: bad header: {exc}") from exc

    body = raw[1:]
    if not body:
        raise TraceError(f"{path}:2: trace has no token records")
    if len(body) % num_layers != 0:
        raise TraceError(
            f"{path}: got {len(body)} score lines, not a multiple of layers={num_layers}"
        )
    shared = tuple(range(shared_n))
    tokens = []
    for t in range(len(body) // num_layers):
        layers = []
        for l in range(num_layers):
            lineno = 2 + t * num_layers + l
            line = body[t * num_layers + l]
            parts = line.split(",")
            if len(parts) != experts:
                raise TraceError(
                    f"{path}:{lineno}: expected {experts} scores, got {len(parts)}"
                )
            try:
                scores = tuple(float(p) for p in parts)
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: bad score: {exc}") from exc
            total = math.fsum(scores)
            if abs(total - 1.0) > 1e-6:
                raise TraceError(f"{path}:{lineno}: scores sum to {total}, expected 1")
            layers.append(
                LayerActivation(
                    gating_scores=scores,
                    activated=top_k_indices(scores, topk),
                    shared=shared,
                )
            )
        tokens.append(TokenRecord(token_index=t, per_layer=tuple(layers)))
    return ActivationTrace(
        model_ref=model_ref,
        topk_activated=topk,
        shared_experts=shared_n,
        tokens=tokens,
        seed=seed,
    )
