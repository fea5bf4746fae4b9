"""Static experiment inputs: model, hardware, profiled timings, and policy.

One YAML file with four top-level sections (``model``, ``hardware``,
``timings``, ``policy``) describes a full experiment. The ``timings``
section is optional; missing values fall back to documented defaults and
the per-expert I/O time derived from expert size and PCIe bandwidth.

Unit conventions: byte quantities in files accept plain integers or
``MB``/``GB``/``MiB``/``GiB`` suffixes; every time field is written in
milliseconds (``_ms`` suffix) and held in seconds internally.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Raised when an experiment file cannot be read or parsed."""


class ValidationError(ConfigError):
    """Raised when a parsed value violates a documented invariant."""


# ---------------------------------------------------------------------------
# unit parsing
# ---------------------------------------------------------------------------

_BYTE_UNITS = {
    "b": 1,
    "kb": 10**3,
    "mb": 10**6,
    "gb": 10**9,
    "tb": 10**12,
    "kib": 2**10,
    "mib": 2**20,
    "gib": 2**30,
    "tib": 2**40,
}

_BYTES_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*([A-Za-z/]*)\s*$")


def parse_bytes(value: int | float | str, *, what: str = "byte quantity") -> int:
    """Parse a byte quantity, accepting MB/GB style suffixes.

    A trailing ``/s`` is tolerated so bandwidths read naturally
    (``"32 GB/s"``).
    """
    if isinstance(value, bool):
        raise ValidationError(f"{what}: expected bytes, got a boolean")
    if isinstance(value, (int, float)):
        if value < 0:
            raise ValidationError(f"{what}: must be nonnegative, got {value}")
        return int(value)
    m = _BYTES_RE.match(str(value))
    if not m:
        raise ValidationError(f"{what}: cannot parse {value!r}")
    number = float(m.group(1))
    unit = m.group(2).lower().removesuffix("/s")
    if unit == "":
        return int(number)
    if unit not in _BYTE_UNITS:
        raise ValidationError(f"{what}: unknown unit {m.group(2)!r} in {value!r}")
    return int(round(number * _BYTE_UNITS[unit]))


def _ms_to_seconds(value, *, what: str) -> float:
    try:
        ms = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{what}: expected milliseconds, got {value!r}") from None
    return ms / 1000.0


def _require(cond: bool, invariant: str) -> None:
    if not cond:
        raise ValidationError(invariant)


# ---------------------------------------------------------------------------
# spec dataclasses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a draft/target MoE model pair.

    ``expert_size`` is bytes per expert; ``shared_experts`` counts the
    always-active experts per layer (0 for Mixtral-style routing). The
    draft model is described only by its depth and routing width since
    the simulator never executes real weights.
    """

    name: str
    num_layers: int
    experts_per_layer: int
    topk_activated: int
    shared_experts: int
    expert_size: int
    draft_layers: int
    draft_topk: int = 0

    def __post_init__(self):
        _require(self.num_layers >= 1, "num_layers must be >= 1")
        _require(self.draft_layers >= 1, "draft_layers must be >= 1")
        _require(self.expert_size > 0, "expert_size must be > 0")
        _require(
            1 <= self.topk_activated <= self.experts_per_layer,
            "topk_activated must satisfy 1 <= topk_activated <= experts_per_layer",
        )
        _require(self.shared_experts >= 0, "shared_experts must be >= 0")
        _require(
            self.shared_experts + self.topk_activated <= self.experts_per_layer,
            "shared_experts + topk_activated must not exceed experts_per_layer",
        )
        _require(self.draft_topk >= 0, "draft_topk must be >= 0")

    @property
    def total_experts(self) -> int:
        return self.num_layers * self.experts_per_layer


@dataclass(frozen=True)
class HardwareSpec:
    """Device description: memory budget and CPU->GPU link."""

    gpu_memory: int
    peak_non_expert_memory: int
    pcie_bandwidth: float
    io_launch_overhead: float = 0.0
    name: str = "generic"

    def __post_init__(self):
        _require(self.pcie_bandwidth > 0, "pcie_bandwidth must be > 0")
        _require(
            self.peak_non_expert_memory < self.gpu_memory,
            "peak_non_expert_memory must be < gpu_memory",
        )
        _require(self.io_launch_overhead >= 0, "io_launch_overhead must be >= 0")


@dataclass(frozen=True)
class ProfiledTimings:
    """Measured per-layer compute and per-expert I/O costs, in seconds.

    ``io_calibration_limit`` bounds how far a profiled per-expert load time
    may exceed the pure bandwidth cost: launch and copy overheads only add
    time, so ``expert_size/bandwidth <= t_io_expert <=
    limit * (expert_size/bandwidth + launch_overhead)``.
    """

    t_comp_target: float
    t_comp_draft: float
    t_io_expert: float
    t_predict: float = 0.0
    io_calibration_limit: float = 4.0

    def __post_init__(self):
        for name in ("t_comp_target", "t_comp_draft", "t_io_expert", "t_predict"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        _require(self.io_calibration_limit >= 1.0, "io_calibration_limit must be >= 1")


class Policy(str, enum.Enum):
    """Offloading policy under simulation.

    ``on_demand`` loads missing experts only when a verification layer
    needs them. ``coarse_history`` prefetches the historically most
    frequent experts for every layer at iteration start.
    ``gating_next_layer`` prefetches next-layer predictions during
    verification with blocking synchronization. ``draft_prefetch``
    predicts and prefetches during the drafting stage through the
    asynchronous worker queue.
    """

    ON_DEMAND = "on_demand"
    COARSE_HISTORY = "coarse_history"
    GATING_NEXT_LAYER = "gating_next_layer"
    DRAFT_PREFETCH = "draft_prefetch"


@dataclass(frozen=True)
class PolicySpec:
    """Prefetch/caching policy and experiment parameters."""

    policy: Policy
    prefetch_k: int
    draft_length: int
    acceptance_rate: float
    seed: int
    cutoff_layer: int | None = None
    cache_capacity_experts: int | None = None
    batched_io: bool = True
    worker_prefetch: bool = True
    fidelity: float = 1.0

    def __post_init__(self):
        _require(self.prefetch_k >= 1, "prefetch_k must be >= 1")
        _require(self.draft_length >= 1, "draft_length must be >= 1")
        _require(
            0.0 <= self.acceptance_rate <= 1.0,
            "acceptance_rate must be in [0, 1]",
        )
        _require(0.0 <= self.fidelity <= 1.0, "fidelity must be in [0, 1]")
        _require(self.seed >= 0, "seed must be a nonnegative 64-bit integer")
        _require(self.seed < 2**64, "seed must fit in 64 bits")
        if self.cutoff_layer is not None:
            _require(self.cutoff_layer >= 0, "cutoff_layer must be >= 0 when given")
        if self.cache_capacity_experts is not None:
            _require(
                self.cache_capacity_experts >= 1,
                "cache_capacity_experts must be >= 1 when given",
            )


# ---------------------------------------------------------------------------
# derived quantities
# ---------------------------------------------------------------------------


def derive_expert_io_time(model: ModelSpec, hw: HardwareSpec) -> float:
    """Default per-expert CPU->GPU load time: copy time plus launch cost."""
    return model.expert_size / hw.pcie_bandwidth + hw.io_launch_overhead


def cache_capacity_slots(model: ModelSpec, hw: HardwareSpec, policy: PolicySpec) -> int:
    """Expert slots available on the device, honoring an explicit override.

    Defaults to ``floor((gpu_memory - peak_non_expert_memory) / expert_size)``,
    a single global slot pool.
    """
    if policy.cache_capacity_experts is not None:
        return policy.cache_capacity_experts
    return (hw.gpu_memory - hw.peak_non_expert_memory) // model.expert_size


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

_MODEL_KEYS = {
    "name",
    "num_layers",
    "experts_per_layer",
    "topk_activated",
    "shared_experts",
    "expert_size",
    "draft_layers",
    "draft_topk",
}
_HARDWARE_KEYS = {
    "name",
    "gpu_memory",
    "peak_non_expert_memory",
    "pcie_bandwidth",
    "io_launch_overhead_ms",
}
_TIMINGS_KEYS = {
    "t_comp_target_ms",
    "t_comp_draft_ms",
    "t_io_expert_ms",
    "t_predict_ms",
    "io_calibration_limit",
}
_POLICY_KEYS = {
    "policy",
    "prefetch_k",
    "cutoff_layer",
    "cache_capacity_experts",
    "batched_io",
    "worker_prefetch",
    "draft_length",
    "acceptance_rate",
    "fidelity",
    "seed",
}

DEFAULT_T_COMP_TARGET_MS = 3.0
DEFAULT_T_COMP_DRAFT_MS = 3.0
DEFAULT_T_PREDICT_MS = 0.1


def _section(doc: dict, name: str, allowed: set[str], required: bool = True) -> dict:
    if name not in doc:
        if required:
            raise ValidationError(f"missing config section: {name}")
        return {}
    sec = doc[name]
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ValidationError(f"section {name!r} must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ValidationError(f"section {name!r} has unknown keys: {sorted(unknown)}")
    return sec


def _get(sec: dict, section: str, key: str, default=None, required: bool = False):
    if key not in sec:
        if required:
            raise ValidationError(f"{section}.{key} is required")
        return default
    return sec[key]


def load_config(path: str | Path) -> tuple[ModelSpec, HardwareSpec, ProfiledTimings, PolicySpec]:
    """Load and validate the four-section experiment file at ``path``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"parse error in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"parse error in {path}: top level must be a mapping")
    return specs_from_dict(doc)


def specs_from_dict(doc: dict) -> tuple[ModelSpec, HardwareSpec, ProfiledTimings, PolicySpec]:
    """Build validated specs from an already-parsed mapping."""
    msec = _section(doc, "model", _MODEL_KEYS)
    hsec = _section(doc, "hardware", _HARDWARE_KEYS)
    tsec = _section(doc, "timings", _TIMINGS_KEYS, required=False)
    psec = _section(doc, "policy", _POLICY_KEYS)
    extra = set(doc) - {"model", "hardware", "timings", "policy"}
    if extra:
        raise ValidationError(f"unknown top-level sections: {sorted(extra)}")

    model = ModelSpec(
        name=str(_get(msec, "model", "name", required=True)),
        num_layers=int(_get(msec, "model", "num_layers", required=True)),
        experts_per_layer=int(_get(msec, "model", "experts_per_layer", required=True)),
        topk_activated=int(_get(msec, "model", "topk_activated", required=True)),
        shared_experts=int(_get(msec, "model", "shared_experts", 0)),
        expert_size=parse_bytes(_get(msec, "model", "expert_size", required=True), what="model.expert_size"),
        draft_layers=int(_get(msec, "model", "draft_layers", required=True)),
        draft_topk=int(_get(msec, "model", "draft_topk", 0)),
    )
    hw = HardwareSpec(
        name=str(_get(hsec, "hardware", "name", "generic")),
        gpu_memory=parse_bytes(_get(hsec, "hardware", "gpu_memory", required=True), what="hardware.gpu_memory"),
        peak_non_expert_memory=parse_bytes(
            _get(hsec, "hardware", "peak_non_expert_memory", required=True),
            what="hardware.peak_non_expert_memory",
        ),
        pcie_bandwidth=float(
            parse_bytes(_get(hsec, "hardware", "pcie_bandwidth", required=True), what="hardware.pcie_bandwidth")
        ),
        io_launch_overhead=_ms_to_seconds(
            _get(hsec, "hardware", "io_launch_overhead_ms", 0.0), what="hardware.io_launch_overhead_ms"
        ),
    )
    timings = ProfiledTimings(
        t_comp_target=_ms_to_seconds(
            _get(tsec, "timings", "t_comp_target_ms", DEFAULT_T_COMP_TARGET_MS),
            what="timings.t_comp_target_ms",
        ),
        t_comp_draft=_ms_to_seconds(
            _get(tsec, "timings", "t_comp_draft_ms", DEFAULT_T_COMP_DRAFT_MS),
            what="timings.t_comp_draft_ms",
        ),
        t_io_expert=(
            _ms_to_seconds(tsec["t_io_expert_ms"], what="timings.t_io_expert_ms")
            if "t_io_expert_ms" in tsec
            else derive_expert_io_time(model, hw)
        ),
        t_predict=_ms_to_seconds(
            _get(tsec, "timings", "t_predict_ms", DEFAULT_T_PREDICT_MS), what="timings.t_predict_ms"
        ),
        io_calibration_limit=float(_get(tsec, "timings", "io_calibration_limit", 4.0)),
    )
    validate_timings(timings, model, hw)

    raw_policy = str(_get(psec, "policy", "policy", required=True))
    try:
        policy_kind = Policy(raw_policy)
    except ValueError:
        valid = ", ".join(p.value for p in Policy)
        raise ValidationError(f"policy.policy must be one of: {valid} (got {raw_policy!r})") from None
    cutoff = _get(psec, "policy", "cutoff_layer")
    capacity = _get(psec, "policy", "cache_capacity_experts")
    policy = PolicySpec(
        policy=policy_kind,
        prefetch_k=int(_get(psec, "policy", "prefetch_k", required=True)),
        cutoff_layer=None if cutoff is None else int(cutoff),
        cache_capacity_experts=None if capacity is None else int(capacity),
        batched_io=bool(_get(psec, "policy", "batched_io", True)),
        worker_prefetch=bool(_get(psec, "policy", "worker_prefetch", True)),
        draft_length=int(_get(psec, "policy", "draft_length", required=True)),
        acceptance_rate=float(_get(psec, "policy", "acceptance_rate", required=True)),
        fidelity=float(_get(psec, "policy", "fidelity", 1.0)),
        seed=int(_get(psec, "policy", "seed", required=True)),
    )
    validate_policy_against_model(policy, model)
    return model, hw, timings, policy


def validate_timings(timings: ProfiledTimings, model: ModelSpec, hw: HardwareSpec) -> None:
    """Cross-check profiled I/O time against the bandwidth-derived bound."""
    floor = model.expert_size / hw.pcie_bandwidth
    ceiling = timings.io_calibration_limit * (floor + hw.io_launch_overhead)
    _require(
        timings.t_io_expert >= floor * (1.0 - 1e-9),
        "t_io_expert must be >= expert_size / pcie_bandwidth "
        "(launch and copy overheads only add time)",
    )
    _require(
        timings.t_io_expert <= ceiling * (1.0 + 1e-9),
        "t_io_expert exceeds io_calibration_limit * (expert_size/pcie_bandwidth"
        " + io_launch_overhead)",
    )


def validate_policy_against_model(policy: PolicySpec, model: ModelSpec) -> None:
    _require(
        policy.prefetch_k <= model.experts_per_layer,
        "prefetch_k must not exceed experts_per_layer",
    )
    if policy.cutoff_layer is not None:
        _require(
            policy.cutoff_layer < max(model.num_layers, model.draft_layers),
            "cutoff_layer must be below the model depth",
        )


def write_config(
    path: str | Path,
    model: ModelSpec,
    hw: HardwareSpec,
    timings: ProfiledTimings,
    policy: PolicySpec,
) -> None:
    """Write the four specs back to a YAML file readable by load_config."""
    doc = {
        "model": {
            "name": model.name,
            "num_layers": model.num_layers,
            "experts_per_layer": model.experts_per_layer,
            "topk_activated": model.topk_activated,
            "shared_experts": model.shared_experts,
            "expert_size": model.expert_size,
            "draft_layers": model.draft_layers,
            "draft_topk": model.draft_topk,
        },
        "hardware": {
            "name": hw.name,
            "gpu_memory": hw.gpu_memory,
            "peak_non_expert_memory": hw.peak_non_expert_memory,
            "pcie_bandwidth": int(hw.pcie_bandwidth),
            "io_launch_overhead_ms": hw.io_launch_overhead * 1000.0,
        },
        "timings": {
            "t_comp_target_ms": timings.t_comp_target * 1000.0,
            "t_comp_draft_ms": timings.t_comp_draft * 1000.0,
            "t_io_expert_ms": timings.t_io_expert * 1000.0,
            "t_predict_ms": timings.t_predict * 1000.0,
            "io_calibration_limit": timings.io_calibration_limit,
        },
        "policy": {
            "policy": policy.policy.value,
            "prefetch_k": policy.prefetch_k,
            "cutoff_layer": policy.cutoff_layer,
            "cache_capacity_experts": policy.cache_capacity_experts,
            "batched_io": policy.batched_io,
            "worker_prefetch": policy.worker_prefetch,
            "draft_length": policy.draft_length,
            "acceptance_rate": policy.acceptance_rate,
            "fidelity": policy.fidelity,
            "seed": policy.seed,
        },
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def with_policy(policy: PolicySpec, **overrides) -> PolicySpec:
    """Return a copy of ``policy`` with the given fields replaced."""
    return replace(policy, **overrides)
