"""Discrete-event engine for the draft/verify decode loop.

Plays an activation trace through speculative decoding under a chosen
offloading policy. Each iteration drafts N tokens (sequential per-layer
compute slots, with prediction and prefetch task publication below the
cutoff layer), then verifies the drafted positions in one parallel pass
over the target layers: every layer looks up the union of experts the
verified positions activate, demand-loads the misses, and finishes at
the later of compute and loading. Acceptance is sampled i.i.d. per
draft token with the longest-prefix rule; the accepted tokens plus one
correction/bonus token advance the trace position.

The engine is single-threaded and deterministic. Transfers live on one
shared channel; prefetch transfers already issued occupy it ahead of
demand loads, and their cache installation is deferred to the transfer
end time so residency never runs ahead of the simulated clock.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .cache import ExpertCache, ExpertId, InsertKind
from .config import (
    HardwareSpec,
    ModelSpec,
    Policy,
    PolicySpec,
    ProfiledTimings,
    ValidationError,
    cache_capacity_slots,
)
from .cutoff import cutoff_input_from_specs, solve_cutoff
from .predictor import (
    CriticalExpertSet,
    HistoryCounter,
    PredictionStrategy,
    PredictorModel,
    predict_scores,
    select_critical,
)
from .prefetch import (
    IoChannel,
    PrefetchQueue,
    TransferRecord,
    enqueue_critical,
    on_demand_load,
    vanilla_prefetch_step,
    worker_step,
)
from .trace import ActivationTrace


@dataclass(frozen=True)
class IterationRecord:
    index: int
    start: float
    draft_end: float
    verify_end: float
    position: int
    drafted: int
    accepted: int
    emitted: int


@dataclass(frozen=True)
class ComputeSlot:
    kind: str  # draft | verify
    iteration: int
    token: int
    layer: int
    start: float
    end: float


@dataclass
class SimReport:
    """Aggregate metrics plus the timelines they were computed from."""

    policy: PolicySpec
    seed: int
    tpot: float
    hit_rate: float
    eviction_rate: float
    latency_breakdown: dict[str, float]
    total_time: float
    emitted_tokens: int
    cutoff_effective: int | None
    cache_capacity: int
    iterations: list[IterationRecord]
    transfers: list[TransferRecord]
    compute_slots: list[ComputeSlot]
    counters: dict[str, int]

    CSV_FIELDS = (
        "policy",
        "seed",
        "tpot_ms",
        "hit_rate",
        "eviction_rate",
        "frac_draft",
        "frac_expert_load",
        "frac_attention_other",
        "total_time_ms",
        "emitted_tokens",
        "iterations",
        "cutoff_layer",
        "cache_capacity",
        "hits",
        "misses",
        "prefetch_insertions",
        "prefetch_evictions",
        "demand_insertions",
        "tasks_completed",
        "tasks_aborted",
    )

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def csv_row(self) -> str:
        vals = {
            "policy": self.policy.policy.value,
            "seed": str(self.seed),
            "tpot_ms": f"{self.tpot * 1000:.3f}",
            "hit_rate": f"{self.hit_rate:.6f}",
            "eviction_rate": f"{self.eviction_rate:.6f}",
            "frac_draft": f"{self.latency_breakdown['draft']:.6f}",
            "frac_expert_load": f"{self.latency_breakdown['expert_load']:.6f}",
            "frac_attention_other": f"{self.latency_breakdown['attention_and_other']:.6f}",
            "total_time_ms": f"{self.total_time * 1000:.3f}",
            "emitted_tokens": str(self.emitted_tokens),
            "iterations": str(len(self.iterations)),
            "cutoff_layer": "" if self.cutoff_effective is None else str(self.cutoff_effective),
            "cache_capacity": str(self.cache_capacity),
            "hits": str(self.counters["hits"]),
            "misses": str(self.counters["misses"]),
            "prefetch_insertions": str(self.counters["prefetch_insertions"]),
            "prefetch_evictions": str(self.counters["prefetch_evictions"]),
            "demand_insertions": str(self.counters["demand_insertions"]),
            "tasks_completed": str(self.counters["tasks_completed"]),
            "tasks_aborted": str(self.counters["tasks_aborted"]),
        }
        return ",".join(vals[f] for f in self.CSV_FIELDS)

    def to_text(self) -> str:
        b = self.latency_breakdown
        lines = [
            f"policy: {self.policy.policy.value}",
            f"seed: {self.seed}",
            f"tpot_ms: {self.tpot * 1000:.3f}",
            f"total_time_ms: {self.total_time * 1000:.3f}",
            f"emitted_tokens: {self.emitted_tokens}",
            f"iterations: {len(self.iterations)}",
            f"hit_rate: {self.hit_rate:.6f}",
            f"eviction_rate: {self.eviction_rate:.6f}",
            f"cutoff_layer: {self.cutoff_effective}",
            f"cache_capacity: {self.cache_capacity}",
            "latency_breakdown:",
            f"  draft: {b['draft']:.6f}",
            f"  expert_load: {b['expert_load']:.6f}",
            f"  attention_and_other: {b['attention_and_other']:.6f}",
            "counters:",
        ]
        lines += [f"  {k}: {v}" for k, v in sorted(self.counters.items())]
        return "\n".join(lines) + "\n"


def default_predictor(policy: PolicySpec) -> PredictorModel:
    strategy = (
        PredictionStrategy.COARSE_HISTORY
        if policy.policy is Policy.COARSE_HISTORY
        else PredictionStrategy.GATING_BASED
    )
    return PredictorModel(fidelity=policy.fidelity, noise_seed=policy.seed, strategy=strategy)


def effective_cutoff(
    model: ModelSpec, hw: HardwareSpec, timings: ProfiledTimings, policy: PolicySpec
) -> int | None:
    """Cutoff layer the simulation will honor: explicit, else solved.

    Clamped to both model depths; None disables drafting-stage prefetch
    (the fallback when even L=0 is infeasible).
    """
    if policy.cutoff_layer is not None:
        layer = policy.cutoff_layer
    else:
        result = solve_cutoff(cutoff_input_from_specs(model, hw, timings, policy.prefetch_k))
        if not result.feasible:
            return None
        layer = result.layer
    return min(layer, model.draft_layers - 1, model.num_layers - 1)


class Simulation:
    def __init__(
        self,
        model: ModelSpec,
        hw: HardwareSpec,
        timings: ProfiledTimings,
        policy: PolicySpec,
        trace: ActivationTrace,
        predictor: PredictorModel | None = None,
        warm_start: bool = False,
    ):
        if not trace.matches_model(model):
            raise ValidationError(
                "trace does not match model dimensions "
                f"(trace {trace.num_layers}x{trace.experts_per_layer}"
                f" topk={trace.topk_activated} shared={trace.shared_experts},"
                f" model {model.num_layers}x{model.experts_per_layer}"
                f" topk={model.topk_activated} shared={model.shared_experts})"
            )
        capacity = cache_capacity_slots(model, hw, policy)
        if capacity < model.experts_per_layer:
            raise ValidationError(
                f"cache capacity {capacity} is below experts_per_layer "
                f"{model.experts_per_layer}; a single layer could not be loaded"
            )
        self.model = model
        self.hw = hw
        self.timings = timings
        self.policy = policy
        self.trace = trace
        self.capacity = capacity
        self.predictor = predictor if predictor is not None else default_predictor(policy)

        self.cache = ExpertCache(capacity)
        self.channel = IoChannel(hw.pcie_bandwidth, hw.io_launch_overhead)
        self.queue = PrefetchQueue()
        self.history = HistoryCounter(model.num_layers, model.experts_per_layer)
        self.cutoff = (
            effective_cutoff(model, hw, timings, policy)
            if policy.policy is Policy.DRAFT_PREFETCH
            else None
        )
        self._acc_rng = np.random.default_rng([policy.seed, 7])
        self._arrivals: deque[tuple[float, tuple[ExpertId, ...]]] = deque()

        self._draft_time = 0.0
        self._stall_time = 0.0
        self._target_time = 0.0
        self._evicted_queued_targets = 0
        self._iterations: list[IterationRecord] = []
        self._slots: list[ComputeSlot] = []
        self._iter = 0

        if warm_start:
            self._warm_fill()

    # -- event plumbing -----------------------------------------------------

    def _arrive(self, end: float, ids: tuple[ExpertId, ...]) -> None:
        self._arrivals.append((end, ids))

    def _pending_prefetch_targets(self) -> set[ExpertId]:
        targets: set[ExpertId] = set()
        for _, ids in self._arrivals:
            targets.update(ids)
        for task in self.queue.pending_tasks():
            targets.update(task.experts)
        return targets

    def _settle(self, now: float) -> None:
        """Install prefetch arrivals whose transfers ended by ``now``."""
        while self._arrivals and self._arrivals[0][0] <= now:
            _, ids = self._arrivals.popleft()
            evicted = self.cache.insert_batch(ids, InsertKind.PREFETCH)
            if evicted:
                # no guard keeps an eviction victim from being a queued
                # prefetch target of a later task; surface how often it bites
                overlap = set(evicted) & self._pending_prefetch_targets()
                self._evicted_queued_targets += len(overlap)

    def _drain_queue(self) -> None:
        """Run the worker over everything published so far.

        All queued tasks were published in the simulated past, so their
        transfer times depend only on readiness and channel occupancy;
        executing them here keeps the channel timeline exact while
        installation waits for _settle.
        """
        while len(self.queue):
            worker_step(
                self.queue,
                self.cache,
                self.channel,
                self.model.expert_size,
                now=0.0,
                batched=self.policy.batched_io,
                on_complete=self._arrive,
            )

    def _warm_fill(self) -> None:
        # seed residency from the first token's activations, layer-major
        for l in range(self.model.num_layers):
            ids = [ExpertId(l, e) for e in self.trace.layer(0, l).required()]
            room = self.capacity - len(self.cache)
            if room <= 0:
                break
            self.cache.insert_batch(ids[:room], InsertKind.DEMAND)
        self.cache.reset_stats()

    # -- stages -------------------------------------------------------------

    def _predict_critical(self, token: int, layer: int) -> CriticalExpertSet:
        truth = self.trace.layer(token, layer)
        scores = predict_scores(self.predictor, layer, truth, self.history, token_index=token)
        return select_critical(scores, self.policy.prefetch_k, layer=layer)

    def _enqueue_history_prefetch(self, now: float, position: int) -> None:
        self._drain_queue()
        self._settle(now)
        for l in range(self.model.num_layers):
            crit = select_critical(self.history.scores(l), self.policy.prefetch_k, layer=l)
            enqueue_critical(self.queue, crit, self.cache, now=now, issue_token=position)

    def _draft_stage(self, t: float, position: int, n_draft: int) -> float:
        spmoe = self.policy.policy is Policy.DRAFT_PREFETCH and self.cutoff is not None
        for d in range(n_draft):
            token = position + d
            for l in range(self.model.draft_layers):
                predicting = spmoe and l <= self.cutoff and l < self.model.num_layers
                slot = self.timings.t_comp_draft + (self.timings.t_predict if predicting else 0.0)
                comp_end = t + slot
                self._draft_time += slot
                self._slots.append(ComputeSlot("draft", self._iter, token, l, t, comp_end))
                next_t = comp_end
                if predicting:
                    self._drain_queue()
                    self._settle(comp_end)
                    crit = self._predict_critical(token, l)
                    if self.policy.worker_prefetch:
                        enqueue_critical(
                            self.queue, crit, self.cache, now=comp_end, issue_token=token
                        )
                    else:
                        res = vanilla_prefetch_step(
                            crit,
                            self.cache,
                            self.channel,
                            self.model.expert_size,
                            compute_start=t,
                            compute_end=comp_end,
                        )
                        self._stall_time += res.blocking_until - comp_end
                        next_t = res.blocking_until
                t = next_t
        return t

    def _verify_stage(self, t: float, position: int, n_draft: int) -> float:
        verify_pos = ([position - 1] if position > 0 else []) + [
            position + i for i in range(n_draft)
        ]
        for l in range(self.model.num_layers):
            t_layer = t
            self._drain_queue()
            self._settle(t_layer)

            required: set[int] = set()
            for p in verify_pos:
                required.update(self.trace.layer(p, l).required())
            missing = [
                ExpertId(l, e)
                for e in sorted(required)
                if not self.cache.lookup(ExpertId(l, e), touch=True)
            ]

            load_end = t_layer
            if missing:
                # experts already in flight arrive with their transfer; the
                # rest are demand-loaded behind everything the channel holds
                pending_ids = set()
                needed_arrival = t_layer
                for end, ids in self._arrivals:
                    overlap = set(ids) & set(missing)
                    if overlap:
                        pending_ids.update(overlap)
                        needed_arrival = max(needed_arrival, end)
                truly_absent = [eid for eid in missing if eid not in pending_ids]
                if truly_absent:
                    self._settle(self.channel.busy_until)
                    load_end = on_demand_load(
                        truly_absent,
                        self.cache,
                        self.channel,
                        self.model.expert_size,
                        now=t_layer,
                    )
                load_end = max(load_end, needed_arrival)

            comp_end = t_layer + self.timings.t_comp_target
            layer_end = max(comp_end, load_end)
            self._target_time += self.timings.t_comp_target
            self._stall_time += layer_end - comp_end
            self._slots.append(
                ComputeSlot("verify", self._iter, position, l, t_layer, layer_end)
            )

            t_next = layer_end
            if self.policy.policy is Policy.GATING_NEXT_LAYER and l + 1 < self.model.num_layers:
                crit = self._predict_critical(position, l + 1)
                res = vanilla_prefetch_step(
                    crit,
                    self.cache,
                    self.channel,
                    self.model.expert_size,
                    compute_start=t_layer,
                    compute_end=layer_end,
                )
                self._stall_time += res.blocking_until - layer_end
                t_next = res.blocking_until

            for p in verify_pos:
                self.history.record(l, self.trace.layer(p, l).required())
            t = t_next
        return t

    # -- main loop ----------------------------------------------------------

    def run(self) -> SimReport:
        t = 0.0
        pos = 0
        total = self.trace.num_tokens
        emitted_total = 0
        while pos < total:
            n_draft = min(self.policy.draft_length, total - pos)
            iter_start = t
            if self.policy.policy is Policy.COARSE_HISTORY:
                self._enqueue_history_prefetch(t, pos)
            t = self._draft_stage(t, pos, n_draft)
            draft_end = t
            t = self._verify_stage(t, pos, n_draft)

            accepted = 0
            for _ in range(n_draft):
                if self._acc_rng.random() < self.policy.acceptance_rate:
                    accepted += 1
                else:
                    break
            emitted = min(accepted + 1, total - pos)
            self._iterations.append(
                IterationRecord(
                    index=self._iter,
                    start=iter_start,
                    draft_end=draft_end,
                    verify_end=t,
                    position=pos,
                    drafted=n_draft,
                    accepted=accepted,
                    emitted=emitted,
                )
            )
            emitted_total += emitted
            pos += emitted
            self._iter += 1

        aborted = self.queue.abort_pending()
        self._settle(float("inf"))
        return self._build_report(t, emitted_total, aborted)

    def _build_report(self, total_time: float, emitted: int, aborted: int) -> SimReport:
        if total_time > 0:
            breakdown = {
                "draft": self._draft_time / total_time,
                "expert_load": self._stall_time / total_time,
                "attention_and_other": self._target_time / total_time,
            }
        else:
            breakdown = {"draft": 0.0, "expert_load": 0.0, "attention_and_other": 1.0}
        counters = {
            "hits": self.cache.hits,
            "misses": self.cache.misses,
            "evictions": self.cache.evictions,
            "prefetch_insertions": self.cache.prefetch_insertions,
            "prefetch_evictions": self.cache.prefetch_evictions,
            "demand_insertions": self.cache.demand_insertions,
            "tasks_completed": self.queue.completed,
            "tasks_aborted": aborted,
            "evictions_of_queued_targets": self._evicted_queued_targets,
        }
        return SimReport(
            policy=self.policy,
            seed=self.policy.seed,
            tpot=total_time / emitted if emitted else 0.0,
            hit_rate=self.cache.hit_rate(),
            eviction_rate=self.cache.eviction_rate(),
            latency_breakdown=breakdown,
            total_time=total_time,
            emitted_tokens=emitted,
            cutoff_effective=self.cutoff,
            cache_capacity=self.capacity,
            iterations=self._iterations,
            transfers=list(self.channel.log),
            compute_slots=self._slots,
            counters=counters,
        )


def simulate(
    model: ModelSpec,
    hw: HardwareSpec,
    timings: ProfiledTimings,
    policy: PolicySpec,
    trace: ActivationTrace,
    predictor: PredictorModel | None = None,
    warm_start: bool = False,
) -> SimReport:
    """Run one policy over one trace; deterministic given the seed."""
    return Simulation(model, hw, timings, policy, trace, predictor, warm_start).run()


def compare_policies(
    model: ModelSpec,
    hw: HardwareSpec,
    timings: ProfiledTimings,
    policies: list[PolicySpec],
    trace: ActivationTrace,
    warm_start: bool = False,
) -> list[SimReport]:
    """One report per policy over the identical workload and seed."""
    return [simulate(model, hw, timings, p, trace, warm_start=warm_start) for p in policies]


SWEEP_PARAMETERS = {
    "cutoff_layer": "cutoff_layer",
    "draft_length": "draft_length",
    "cache_capacity": "cache_capacity_experts",
    "prefetch_k": "prefetch_k",
}


def sweep(
    parameter: str,
    values: list,
    model: ModelSpec,
    hw: HardwareSpec,
    timings: ProfiledTimings,
    policy: PolicySpec,
    trace: ActivationTrace,
    warm_start: bool = False,
) -> list[tuple[object, SimReport]]:
    """One simulation per parameter value, shared trace and seed."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValidationError(
            f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_PARAMETERS)}"
        )
    if not values:
        raise ValidationError("sweep range is empty")
    if parameter == "cutoff_layer" and policy.policy is not Policy.DRAFT_PREFETCH:
        raise ValidationError("cutoff_layer sweeps require the draft_prefetch policy")
    if parameter == "prefetch_k" and policy.policy is Policy.ON_DEMAND:
        raise ValidationError("prefetch_k does not apply to the on_demand policy")
    field_name = SWEEP_PARAMETERS[parameter]
    out = []
    for v in values:
        p = replace(policy, **{field_name: int(v)})
        out.append((v, simulate(model, hw, timings, p, trace, warm_start=warm_start)))
    return out
