"""Trace-driven simulation lab for per-layer expert caching in MoE inference.

Replays expert-routing traces through fixed-capacity per-layer caches under
classic replacement policies (LRU, LFU, FIFO, ARC, LeCaR), the optimal
Belady oracle, and a learned policy that scores experts by predicted
next-use distance; reports hit rates, I/O counts, estimated decode latency,
and eviction-quality diagnostics.
"""

from .dataset import DEFAULT_DISTANCE_CAP, LayerDataset, build_training_data
from .features import FeatureTracker
from .mlpolicy import MLEvictionPolicy, ml_policy_evict
from .net import (
    EvictionNet,
    AdamW,
    EmptyDatasetError,
    NonFiniteLossError,
    ShapeMismatchError,
    TrainConfig,
    TrainResult,
    load_net,
    masked_mse,
    save_net,
    train_eviction_net,
)
from .policies import (
    AccessContext,
    ARCPolicy,
    BeladyPolicy,
    CachePolicy,
    FIFOPolicy,
    LeCaRPolicy,
    LFUPolicy,
    LRUPolicy,
    NoEvictableError,
    OracleIndex,
    PolicyDecision,
    belady_next_use,
    lecar_update,
)
from .replay import ReplayStep, StepNextUse, build_oracle_index, layer_schedules
from .engine import (
    CapacityTooSmallError,
    CostModel,
    EvictionRecord,
    HardwareBudget,
    SimReport,
    SimRun,
    SimulationError,
    cache_size_calc,
    eviction_quality_duel,
    policy_factory,
    refetch_rate,
    run_simulation,
    simulate,
    step_latency_s,
    sweep,
)
from .trace import (
    AccessEvent,
    HeaderMismatchError,
    InsufficientTokensError,
    InvalidConfigError,
    Phase,
    RoutingTrace,
    SyntheticWorkloadConfig,
    TraceError,
    TraceHeader,
    TraceParseError,
    expert_popularity,
    generate_trace,
    parse_trace,
    prefill_coverage,
    read_trace,
    trace_to_text,
    write_trace,
)

__version__ = "0.1.0"
