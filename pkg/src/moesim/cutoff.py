"""Analytical cutoff-layer solver.

Prefetching during drafting is allowed only for layers 0..L, where L is
the deepest layer such that (a) the prefetched experts fit beside the
non-expert peak in device memory and (b) their transfers finish within
the drafting window, whichever of compute or I/O dominates:

    n_expert(L) = (L + 1) * k
    memory:   m_peak + n_expert * m_expert < m_gpu
    overlap:  max((L - 1) * t_comp + k * t_io, n_expert * t_io) <= l_all * t_comp

``t_comp`` and ``l_all`` describe the draft model by default, since the
transfers must hide inside drafting; a target-side reading is available
for sensitivity studies by building the input from target timings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .config import HardwareSpec, ModelSpec, ProfiledTimings


class BindingConstraint(str, enum.Enum):
    MEMORY = "memory"
    OVERLAP = "overlap"
    NONE = "none"


@dataclass(frozen=True)
class CutoffInput:
    k: int
    l_all: int
    t_comp: float
    t_io: float
    m_expert: int
    m_gpu: int
    m_peak: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l_all < 1:
            raise ValueError("l_all must be >= 1")
        if self.t_comp < 0 or self.t_io < 0:
            raise ValueError("times must be >= 0")
        if self.m_expert <= 0:
            raise ValueError("m_expert must be > 0")
        if self.m_peak >= self.m_gpu:
            raise ValueError("m_peak must be < m_gpu")


@dataclass(frozen=True)
class CutoffResult:
    """Solver output; ``layer`` is None when even L=0 violates a constraint."""

    layer: int | None
    n_expert: int
    binding_constraint: BindingConstraint
    feasible: bool


def cutoff_input_from_specs(
    model: ModelSpec,
    hw: HardwareSpec,
    timings: ProfiledTimings,
    k: int,
    side: str = "draft",
) -> CutoffInput:
    """Build solver input from loaded specs.

    ``side='draft'`` (default) uses the draft model's depth and per-layer
    compute; ``side='target'`` uses the target model's, for sensitivity runs.
    """
    if side not in ("draft", "target"):
        raise ValueError("side must be 'draft' or 'target'")
    if side == "draft":
        l_all, t_comp = model.draft_layers, timings.t_comp_draft
    else:
        l_all, t_comp = model.num_layers, timings.t_comp_target
    return CutoffInput(
        k=k,
        l_all=l_all,
        t_comp=t_comp,
        t_io=timings.t_io_expert,
        m_expert=model.expert_size,
        m_gpu=hw.gpu_memory,
        m_peak=hw.peak_non_expert_memory,
    )


def _memory_ok(inp: CutoffInput, n_expert: int) -> bool:
    return inp.m_peak + n_expert * inp.m_expert < inp.m_gpu


def _overlap_ok(inp: CutoffInput, layer: int, n_expert: int) -> bool:
    lhs = max((layer - 1) * inp.t_comp + inp.k * inp.t_io, n_expert * inp.t_io)
    return lhs <= inp.l_all * inp.t_comp


def _violated_at(inp: CutoffInput, layer: int) -> BindingConstraint:
    n = (layer + 1) * inp.k
    if not _memory_ok(inp, n):
        return BindingConstraint.MEMORY
    if not _overlap_ok(inp, layer, n):
        return BindingConstraint.OVERLAP
    return BindingConstraint.NONE


def solve_cutoff(inp: CutoffInput) -> CutoffResult:
    """Largest integer L in [0, l_all - 1] satisfying both constraints.

    Searching integers directly subsumes the flooring rule for fractional
    bounds. Reports which constraint fails first past the returned L;
    infeasibility (L=0 already violating) is a result, not an error.
    """
    best: int | None = None
    for layer in range(inp.l_all - 1, -1, -1):
        if _violated_at(inp, layer) is BindingConstraint.NONE:
            best = layer
            break
    if best is None:
        return CutoffResult(
            layer=None,
            n_expert=0,
            binding_constraint=_violated_at(inp, 0),
            feasible=False,
        )
    if best == inp.l_all - 1:
        binding = BindingConstraint.NONE
    else:
        binding = _violated_at(inp, best + 1)
    return CutoffResult(
        layer=best,
        n_expert=(best + 1) * inp.k,
        binding_constraint=binding,
        feasible=True,
    )


@dataclass(frozen=True)
class FeasibilityReport:
    """Constraint slacks for a candidate L; negative means violated."""

    layer: int
    n_expert: int
    memory_slack_bytes: float
    overlap_slack_seconds: float


def feasibility_report(inp: CutoffInput, layer: int) -> FeasibilityReport:
    """Memory and overlap slack at ``layer``.

    Memory slack is ``m_gpu - (m_peak + n_expert * m_expert)``; because the
    memory constraint is strict, zero slack still means violated. Overlap
    slack is the drafting-window budget left after the worse of the two
    overlap terms.
    """
    if not 0 <= layer < inp.l_all:
        raise ValueError(f"layer must be in [0, {inp.l_all - 1}], got {layer}")
    n = (layer + 1) * inp.k
    mem_slack = inp.m_gpu - (inp.m_peak + n * inp.m_expert)
    overlap_lhs = max((layer - 1) * inp.t_comp + inp.k * inp.t_io, n * inp.t_io)
    return FeasibilityReport(
        layer=layer,
        n_expert=n,
        memory_slack_bytes=float(mem_slack),
        overlap_slack_seconds=inp.l_all * inp.t_comp - overlap_lhs,
    )
