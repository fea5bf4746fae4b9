"""Trace-driven simulator for speculative-decoding MoE inference with
expert offloading: activation traces, critical-expert prediction, the
cutoff-layer solver, an LRU expert cache, prefetch queue/worker
machinery, and the discrete-event decode loop that ties them together.
"""

from .cache import ExpertCache, ExpertId, InsertKind
from .config import (
    ConfigError,
    HardwareSpec,
    ModelSpec,
    Policy,
    PolicySpec,
    ProfiledTimings,
    ValidationError,
    cache_capacity_slots,
    derive_expert_io_time,
    load_config,
    write_config,
)
from .cutoff import (
    BindingConstraint,
    CutoffInput,
    CutoffResult,
    cutoff_input_from_specs,
    feasibility_report,
    solve_cutoff,
)
from .predictor import (
    CriticalExpertSet,
    HistoryCounter,
    PredictionStrategy,
    PredictorModel,
    predict_scores,
    prediction_accuracy,
    run_predictor_over_trace,
    select_critical,
)
from .prefetch import (
    IoChannel,
    PrefetchQueue,
    PrefetchTask,
    TransferKind,
    TransferRecord,
    enqueue_critical,
    on_demand_load,
    vanilla_prefetch_step,
    worker_step,
)
from .simcore import SimReport, Simulation, compare_policies, simulate, sweep
from .trace import (
    ActivationTrace,
    LayerActivation,
    TokenRecord,
    TraceError,
    activation_entropy,
    activation_rate,
    generate_synthetic_trace,
    load_trace,
    overlap_percentage,
    save_trace,
    top_k_indices,
)

__version__ = "0.1.0"
