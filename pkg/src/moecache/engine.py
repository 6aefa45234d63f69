"""Trace replay engine: hit/miss accounting, decode-latency estimation,
eviction diagnostics, sweeps, and the VRAM-budget cache-size calculator.
"""
from __future__ import annotations

import math
from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

from .mlpolicy import MLEvictionPolicy
from .net import EvictionNet
from .policies import (
    AccessContext,
    ARCPolicy,
    BeladyPolicy,
    CachePolicy,
    FIFOPolicy,
    LeCaRPolicy,
    LFUPolicy,
    LRUPolicy,
    OracleIndex,
    PolicyDecision,
)
from .replay import ReplayStep, build_oracle_index, layer_schedules
from .trace import Phase, RoutingTrace, TraceHeader


class SimulationError(Exception):
    pass


class CapacityTooSmallError(SimulationError):
    """Cache capacity below top_k: one decode event cannot fit."""


@dataclass(frozen=True)
class CostModel:
    """Per-expert costs of the overlap latency model.

    A decode (step, layer) with any miss costs the loads alone (compute is
    hidden under SSD latency); an all-hit step costs the expert computations.
    """

    t_load_s: float = 3e-3
    t_compute_s: float = 158e-6
    loads_serial: bool = True
    ml_score_cost_s: float = 0.0

    def validate(self) -> None:
        if self.t_load_s <= 0 or self.t_compute_s <= 0:
            raise SimulationError("cost durations must be positive")
        if self.ml_score_cost_s < 0:
            raise SimulationError("ml_score_cost_s must be >= 0")


def step_latency_s(misses: int, num_accesses: int, cost: CostModel) -> float:
    """Latency of one (step, layer) cell under the overlap rule."""
    if misses > 0:
        return (misses if cost.loads_serial else 1) * cost.t_load_s
    return num_accesses * cost.t_compute_s


@dataclass(frozen=True)
class HardwareBudget:
    vram_bytes: int
    nonexpert_bytes: int
    all_experts_bytes: int
    experts_per_layer: int

    def validate(self) -> None:
        if self.vram_bytes < 0 or self.nonexpert_bytes < 0:
            raise SimulationError("byte budgets must be non-negative")
        if self.all_experts_bytes <= 0:
            raise SimulationError("all_experts_bytes must be positive")
        if self.experts_per_layer < 1:
            raise SimulationError("experts_per_layer must be >= 1")


def cache_size_calc(budget: HardwareBudget) -> int:
    """Experts-per-layer cache size a VRAM budget affords.

    floor((vram - nonexpert) * experts_per_layer / all_experts_bytes),
    clamped to [0, experts_per_layer]. all_experts_bytes is the storage of
    the full expert pool (all layers), so the ratio spreads the headroom
    uniformly across layers.
    """
    budget.validate()
    headroom = budget.vram_bytes - budget.nonexpert_bytes
    size = math.floor(headroom * budget.experts_per_layer / budget.all_experts_bytes)
    return max(0, min(budget.experts_per_layer, size))


@dataclass(frozen=True)
class SimReport:
    policy: str
    capacity: int
    hits: int
    misses: int
    hit_rate: float
    io_count: int
    decode_hits: int
    decode_misses: int
    decode_hit_rate: float
    prefill_hits: int
    prefill_misses: int
    compulsory_misses: int
    hit_rate_excl_compulsory: float
    evictions: int
    refetch_within_w: float
    window: int
    est_decode_latency_s: float
    est_prefill_latency_s: float
    tokens_per_second_est: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimReport":
        return cls(**d)


@dataclass(frozen=True)
class EvictionRecord:
    layer: int
    position: int
    tick: int
    decode_index: int
    victim: int


@dataclass
class SimRun:
    report: SimReport
    evictions: list[EvictionRecord]
    decisions: Optional[dict[int, list[PolicyDecision]]] = None


PolicyFactory = Callable[[int, int, TraceHeader, Optional[OracleIndex]], CachePolicy]

_HEURISTICS: dict[str, type[CachePolicy]] = {
    "lru": LRUPolicy,
    "fifo": FIFOPolicy,
    "lfu": LFUPolicy,
    "arc": ARCPolicy,
}

POLICY_NAMES = ("lru", "lfu", "fifo", "arc", "lecar", "belady", "ml")


def policy_factory(
    spec: Union[str, dict],
    nets: Optional[Union[EvictionNet, Sequence[EvictionNet], dict[int, EvictionNet]]] = None,
) -> tuple[str, PolicyFactory]:
    """Resolve a policy spec (name or {"name": ..., params...}) to a factory.

    The ML policy needs trained nets: either one shared net, or a sequence /
    dict keyed by layer. Belady receives the oracle index built by the engine.
    """
    params = dict(spec) if isinstance(spec, dict) else {"name": spec}
    name = params.pop("name", None)
    if name not in POLICY_NAMES:
        raise SimulationError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")

    if name in _HEURISTICS:
        cls = _HEURISTICS[name]

        def make(layer, capacity, header, oracle):
            return cls(capacity, header.num_experts, **params)

    elif name == "lecar":

        def make(layer, capacity, header, oracle):
            return LeCaRPolicy(capacity, header.num_experts, **params)

    elif name == "belady":

        def make(layer, capacity, header, oracle):
            return BeladyPolicy(capacity, header.num_experts, **params)

    else:  # ml
        if nets is None:
            raise SimulationError("ml policy requires trained eviction nets")
        include_prefill = params.pop("include_prefill", True)

        def layer_net(layer: int) -> EvictionNet:
            if isinstance(nets, EvictionNet):
                return nets
            if isinstance(nets, dict):
                if layer not in nets:
                    raise SimulationError(f"no eviction net provided for layer {layer}")
                return nets[layer]
            return nets[layer]

        def make(layer, capacity, header, oracle):
            return MLEvictionPolicy(
                capacity, header.num_experts, layer_net(layer), include_prefill, **params
            )

    return name, make


def _replay_layer(
    layer: int,
    schedule: list[ReplayStep],
    policy: CachePolicy,
    oracle: OracleIndex,
    cost: CostModel,
    record_decisions: bool,
):
    hits = {Phase.PREFILL: 0, Phase.DECODE: 0}
    misses = {Phase.PREFILL: 0, Phase.DECODE: 0}
    compulsory = 0
    seen: set[int] = set()
    evictions: list[EvictionRecord] = []
    decisions: list[PolicyDecision] = []
    decode_latency = 0.0
    prefill_latency = 0.0
    is_ml = isinstance(policy, MLEvictionPolicy)

    for step in schedule:
        if step.new_sequence:
            policy.start_sequence()
        ctx0 = AccessContext(layer=layer, position=step.position0, step=step.tick, oracle=oracle)
        policy.begin_event(step.routed, step.phase, ctx0)
        decode = step.phase == Phase.DECODE
        pinned: set[int] = set()
        step_misses = 0
        pos = step.position0
        for expert in step.accesses:
            ctx = AccessContext(
                layer=layer,
                position=pos,
                step=step.tick,
                pinned=frozenset(pinned) if decode else frozenset(),
                oracle=oracle,
            )
            decision = policy.access(expert, ctx)
            if record_decisions:
                decisions.append(decision)
            if decision.was_hit:
                hits[step.phase] += 1
            else:
                misses[step.phase] += 1
                step_misses += 1
                if expert not in seen:
                    compulsory += 1
            seen.add(expert)
            if decision.evicted is not None:
                evictions.append(
                    EvictionRecord(layer, pos, step.tick, step.decode_index, decision.evicted)
                )
            if decode:
                pinned.add(expert)
            pos += 1
        latency = step_latency_s(step_misses, len(step.accesses), cost)
        if decode:
            decode_latency += latency + (cost.ml_score_cost_s if is_ml else 0.0)
        else:
            prefill_latency += latency
    return hits, misses, compulsory, evictions, decisions, decode_latency, prefill_latency


def _refetch_rate(
    evictions: list[EvictionRecord],
    schedules: list[list[ReplayStep]],
    window: int,
) -> float:
    """Fraction of evictions whose victim is re-accessed in the same layer
    within the next ``window`` decode steps; 0.0 when nothing was evicted."""
    if not evictions:
        return 0.0
    # per layer: access positions per expert, and each position's decode index
    positions: dict[int, dict[int, list[int]]] = {}
    decode_of: dict[int, list[int]] = {}
    for layer, schedule in enumerate(schedules):
        per_expert: dict[int, list[int]] = {}
        dec: list[int] = []
        for step in schedule:
            pos = step.position0
            for e in step.accesses:
                per_expert.setdefault(e, []).append(pos)
                dec.append(step.decode_index)
                pos += 1
        positions[layer] = per_expert
        decode_of[layer] = dec
    refetched = 0
    for rec in evictions:
        stored = positions[rec.layer].get(rec.victim, [])
        i = bisect_right(stored, rec.position)
        if i < len(stored):
            next_decode = decode_of[rec.layer][stored[i]]
            if next_decode - rec.decode_index <= window:
                refetched += 1
    return refetched / len(evictions)


def run_simulation(
    trace: RoutingTrace,
    policy: Union[str, dict, tuple[str, PolicyFactory]],
    capacity: int,
    cost: CostModel = CostModel(),
    window: int = 5,
    nets=None,
    record_decisions: bool = False,
) -> SimRun:
    """Replay the trace through per-layer caches and assemble a full report."""
    trace.validate()
    cost.validate()
    if capacity < trace.header.top_k:
        raise CapacityTooSmallError(
            f"capacity {capacity} < top_k {trace.header.top_k}: a decode event "
            "cannot fit in the cache"
        )
    name, factory = policy if isinstance(policy, tuple) else policy_factory(policy, nets)
    schedules = layer_schedules(trace)
    oracle = build_oracle_index(schedules)

    totals = {
        "hits": {Phase.PREFILL: 0, Phase.DECODE: 0},
        "misses": {Phase.PREFILL: 0, Phase.DECODE: 0},
    }
    compulsory = 0
    evictions: list[EvictionRecord] = []
    decisions: dict[int, list[PolicyDecision]] = {}
    decode_latency = 0.0
    prefill_latency = 0.0
    for layer, schedule in enumerate(schedules):
        inst = factory(layer, capacity, trace.header, oracle)
        h, m, comp, ev, dec, d_lat, p_lat = _replay_layer(
            layer, schedule, inst, oracle, cost, record_decisions
        )
        for phase in (Phase.PREFILL, Phase.DECODE):
            totals["hits"][phase] += h[phase]
            totals["misses"][phase] += m[phase]
        compulsory += comp
        evictions.extend(ev)
        if record_decisions:
            decisions[layer] = dec
        decode_latency += d_lat
        prefill_latency += p_lat

    hits = totals["hits"][Phase.PREFILL] + totals["hits"][Phase.DECODE]
    misses = totals["misses"][Phase.PREFILL] + totals["misses"][Phase.DECODE]
    accesses = hits + misses
    decode_hits = totals["hits"][Phase.DECODE]
    decode_misses = totals["misses"][Phase.DECODE]
    noncompulsory = accesses - compulsory
    decode_tokens = trace.num_decode_steps()

    report = SimReport(
        policy=name,
        capacity=capacity,
        hits=hits,
        misses=misses,
        hit_rate=hits / accesses if accesses else 0.0,
        io_count=misses,
        decode_hits=decode_hits,
        decode_misses=decode_misses,
        decode_hit_rate=(
            decode_hits / (decode_hits + decode_misses)
            if decode_hits + decode_misses
            else 0.0
        ),
        prefill_hits=totals["hits"][Phase.PREFILL],
        prefill_misses=totals["misses"][Phase.PREFILL],
        compulsory_misses=compulsory,
        hit_rate_excl_compulsory=hits / noncompulsory if noncompulsory else 0.0,
        evictions=len(evictions),
        refetch_within_w=_refetch_rate(evictions, schedules, window),
        window=window,
        est_decode_latency_s=decode_latency,
        est_prefill_latency_s=prefill_latency,
        tokens_per_second_est=(
            decode_tokens / decode_latency if decode_latency > 0 else 0.0
        ),
    )
    return SimRun(report, evictions, decisions if record_decisions else None)


def simulate(
    trace: RoutingTrace,
    policy: Union[str, dict],
    capacity: int,
    cost: CostModel = CostModel(),
    window: int = 5,
    nets=None,
) -> SimReport:
    return run_simulation(trace, policy, capacity, cost, window, nets).report


def refetch_rate(
    trace: RoutingTrace,
    policy: Union[str, dict],
    capacity: int,
    window: int = 5,
    nets=None,
) -> float:
    return run_simulation(trace, policy, capacity, window=window, nets=nets).report.refetch_within_w


def eviction_quality_duel(
    trace: RoutingTrace,
    policy_a: Union[str, dict],
    policy_b: Union[str, dict],
    capacity: int,
    nets=None,
) -> float:
    """Compare victims at access positions where both policies evict.

    The policy whose victim has the strictly larger oracle next-use distance
    made the better choice; ties drop out of the denominator. Returns the
    fraction of decisions policy A won, or 0.5 when no strict winner exists.
    """
    run_a = run_simulation(trace, policy_a, capacity, nets=nets)
    run_b = run_simulation(trace, policy_b, capacity, nets=nets)
    schedules = layer_schedules(trace)
    oracle = build_oracle_index(schedules)
    victims_b = {(rec.layer, rec.position): rec.victim for rec in run_b.evictions}
    a_better = 0
    b_better = 0
    for rec in run_a.evictions:
        other = victims_b.get((rec.layer, rec.position))
        if other is None:
            continue
        dist_a = oracle.next_use(rec.layer, rec.victim, rec.position)
        dist_b = oracle.next_use(rec.layer, other, rec.position)
        if dist_a > dist_b:
            a_better += 1
        elif dist_b > dist_a:
            b_better += 1
    if a_better + b_better == 0:
        return 0.5
    return a_better / (a_better + b_better)


def sweep(
    trace: RoutingTrace,
    policies: Sequence[Union[str, dict]],
    capacities: Sequence[int],
    cost: CostModel = CostModel(),
    window: int = 5,
    nets=None,
    jobs: int = 1,
) -> list[SimReport]:
    """Cross-product evaluation; rows ordered by (policy name, capacity)."""
    for c in capacities:
        if c < trace.header.top_k:
            raise CapacityTooSmallError(
                f"capacity {c} < top_k {trace.header.top_k}"
            )
    cells = [(policy, capacity) for policy in policies for capacity in capacities]

    def run_cell(cell):
        policy, capacity = cell
        return simulate(trace, policy, capacity, cost, window, nets)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_cell, cells))
    else:
        reports = [run_cell(cell) for cell in cells]
    return sorted(reports, key=lambda r: (r.policy, r.capacity))
