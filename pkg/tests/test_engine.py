import random

import numpy as np
import pytest

from moecache import (
    AccessEvent,
    CapacityTooSmallError,
    CostModel,
    EvictionNet,
    HardwareBudget,
    Phase,
    RoutingTrace,
    SimulationError,
    TraceHeader,
    cache_size_calc,
    eviction_quality_duel,
    refetch_rate,
    run_simulation,
    simulate,
    step_latency_s,
    sweep,
)
from moecache.replay import layer_schedules

from helpers import random_trace, zipf_trace

GIB = 2**30


def make_trace(events, num_layers=1, num_experts=16, top_k=2):
    header = TraceHeader("t", num_layers, num_experts, top_k)
    trace = RoutingTrace(header, tuple(events))
    trace.validate()
    return trace


class TestLatencyModel:
    def test_two_misses_cost_loads_only(self):
        assert step_latency_s(2, 8, CostModel()) == pytest.approx(6e-3)

    def test_all_hit_step_costs_compute(self):
        assert step_latency_s(0, 8, CostModel()) == pytest.approx(1.264e-3)

    def test_parallel_loads(self):
        cost = CostModel(loads_serial=False)
        assert step_latency_s(5, 8, cost) == pytest.approx(3e-3)

    def test_flipping_a_miss_never_increases_latency(self):
        cost = CostModel()
        for k in (1, 2, 4, 8, 16):
            for misses in range(1, k + 1):
                assert step_latency_s(misses - 1, k, cost) <= step_latency_s(misses, k, cost)

    def test_integration_two_miss_step(self):
        # prefill warms 6 experts; the decode step then misses exactly 2
        events = [
            AccessEvent(0, Phase.PREFILL, 0, 0, (0, 1, 2, 3, 4, 5)),
            AccessEvent(0, Phase.DECODE, 0, 0, (0, 1, 2, 3, 4, 5, 6, 7)),
        ]
        trace = make_trace(events, num_experts=16, top_k=8)
        report = simulate(trace, "lru", 10)
        assert report.decode_misses == 2
        assert report.est_decode_latency_s == pytest.approx(6e-3)
        assert report.est_prefill_latency_s == pytest.approx(6 * 3e-3)

    def test_all_hit_decode_latency(self):
        events = [
            AccessEvent(0, Phase.PREFILL, 0, 0, tuple(range(8))),
            AccessEvent(0, Phase.DECODE, 0, 0, tuple(range(8))),
        ]
        trace = make_trace(events, num_experts=16, top_k=8)
        report = simulate(trace, "lru", 10)
        assert report.decode_misses == 0
        assert report.est_decode_latency_s == pytest.approx(1.264e-3)

    def test_ml_score_cost_flag(self):
        trace = zipf_trace(0, num_experts=8, top_k=2, decode_steps=10, prefill_tokens=0)
        net = EvictionNet(8, seed=0)
        base = simulate(trace, "ml", 4, nets=net)
        costed = simulate(trace, "ml", 4, CostModel(ml_score_cost_s=1e-4), nets=net)
        assert costed.est_decode_latency_s == pytest.approx(
            base.est_decode_latency_s + 10 * 1e-4
        )

    def test_tokens_per_second(self):
        trace = zipf_trace(1, num_layers=2, num_experts=8, top_k=2, decode_steps=20)
        report = simulate(trace, "lru", 4)
        assert report.tokens_per_second_est == pytest.approx(
            20 / report.est_decode_latency_s
        )


class TestAccounting:
    def test_full_capacity_only_compulsory_misses(self):
        trace = zipf_trace(2, num_experts=12, top_k=3, decode_steps=80, prefill_tokens=4)
        report = simulate(trace, "lru", 12)
        assert report.misses == report.compulsory_misses
        assert report.hit_rate_excl_compulsory == 1.0
        assert report.evictions == 0

    def test_thrashing_disjoint_sets(self):
        # alternate between disjoint expert pairs at capacity K: zero hits
        events = [
            AccessEvent(0, Phase.DECODE, step, 0, (0, 1) if step % 2 == 0 else (2, 3))
            for step in range(40)
        ]
        trace = make_trace(events, num_experts=4, top_k=2)
        report = simulate(trace, "lru", 2)
        assert report.hits == 0
        assert report.hit_rate == 0.0

    @pytest.mark.parametrize("policy", ["lru", "lfu", "fifo", "arc", "lecar", "belady"])
    @pytest.mark.parametrize("seed", range(3))
    def test_accounting_identity(self, policy, seed):
        trace = random_trace(random.Random(seed), num_experts=10)
        capacity = max(trace.header.top_k, 3)
        report = simulate(trace, policy, capacity)
        total_accesses = sum(
            len(step.accesses) for sched in layer_schedules(trace) for step in sched
        )
        assert report.hits + report.misses == total_accesses
        assert report.io_count == report.misses
        assert report.hits == report.prefill_hits + report.decode_hits
        assert report.misses == report.prefill_misses + report.decode_misses
        if total_accesses:
            assert report.hit_rate == pytest.approx(report.hits / total_accesses)

    def test_prefill_union_counted_once(self):
        # the same expert in two prefill token events of one sequence/layer
        events = [
            AccessEvent(0, Phase.PREFILL, 0, 0, (0, 1)),
            AccessEvent(0, Phase.PREFILL, 1, 0, (1, 2)),
        ]
        trace = make_trace(events, num_experts=8)
        report = simulate(trace, "lru", 4)
        assert report.prefill_hits + report.prefill_misses == 3  # experts {0,1,2}

    def test_prefill_union_reloaded_next_sequence(self):
        events = [
            AccessEvent(0, Phase.PREFILL, 0, 0, (0, 1)),
            AccessEvent(1, Phase.PREFILL, 0, 0, (0, 1)),
        ]
        trace = make_trace(events, num_experts=8)
        report = simulate(trace, "lru", 4)
        assert report.prefill_hits == 2  # still resident from sequence 0
        assert report.prefill_misses == 2

    def test_capacity_too_small(self):
        trace = zipf_trace(0, num_experts=8, top_k=4, decode_steps=5)
        with pytest.raises(CapacityTooSmallError):
            simulate(trace, "lru", 3)

    def test_simulate_deterministic(self):
        trace = zipf_trace(5, num_layers=2, num_experts=10, top_k=3, decode_steps=40)
        assert simulate(trace, "lecar", 5) == simulate(trace, "lecar", 5)


class TestRefetch:
    def test_no_evictions_rate_zero(self):
        trace = zipf_trace(1, num_experts=8, top_k=2, decode_steps=30)
        assert refetch_rate(trace, "lru", 8) == 0.0

    def test_hand_constructed_refetch(self):
        # capacity 2, LRU with intra-event pinning. Hand-derived eviction log:
        # victim 0 at decode step 1, victims 1 and 2 at step 2, victim 0 at
        # step 3. The first three victims return within the window; the last
        # never returns -> rate 3/4.
        events = [
            AccessEvent(0, Phase.DECODE, 0, 0, (0, 1)),
            AccessEvent(0, Phase.DECODE, 1, 0, (1, 2)),
            AccessEvent(0, Phase.DECODE, 2, 0, (0, 1)),
            AccessEvent(0, Phase.DECODE, 3, 0, (1, 2)),
        ]
        trace = make_trace(events, num_experts=4, top_k=2)
        run = run_simulation(trace, "lru", 2, window=5)
        assert run.report.evictions == 4
        assert run.report.refetch_within_w == pytest.approx(0.75)

    def test_window_zero_counts_same_step_only(self):
        events = [
            AccessEvent(0, Phase.DECODE, 0, 0, (0, 1)),
            AccessEvent(0, Phase.DECODE, 1, 0, (2, 3)),
            AccessEvent(0, Phase.DECODE, 2, 0, (0, 1)),
        ]
        trace = make_trace(events, num_experts=4, top_k=2)
        assert refetch_rate(trace, "lru", 2, window=0) == 0.0
        assert refetch_rate(trace, "lru", 2, window=2) > 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_belady_refetch_not_above_lru(self, seed):
        trace = zipf_trace(seed, num_experts=12, top_k=3, decode_steps=80, prefill_tokens=4)
        for capacity in (4, 6):
            assert refetch_rate(trace, "belady", capacity, window=5) <= refetch_rate(
                trace, "lru", capacity, window=5
            )


class TestDuel:
    @pytest.mark.parametrize("policy", ["lru", "lfu", "belady"])
    def test_self_duel_is_half(self, policy):
        trace = zipf_trace(4, num_experts=10, top_k=2, decode_steps=50)
        assert eviction_quality_duel(trace, policy, policy, 4) == 0.5

    @pytest.mark.parametrize("seed", range(10))
    def test_belady_wins_at_least_half(self, seed):
        trace = zipf_trace(seed, num_experts=12, top_k=3, decode_steps=80, prefill_tokens=4)
        for opponent in ("lru", "lfu"):
            assert eviction_quality_duel(trace, "belady", opponent, 6) >= 0.5

    def test_duel_antisymmetry(self):
        trace = zipf_trace(9, num_experts=12, top_k=3, decode_steps=60)
        ab = eviction_quality_duel(trace, "lru", "lfu", 5)
        ba = eviction_quality_duel(trace, "lfu", "lru", 5)
        assert ab == pytest.approx(1.0 - ba)


class TestCacheSizeCalc:
    def test_worked_example(self):
        budget = HardwareBudget(16 * GIB, 1 * GIB, 30 * GIB, 128)
        assert cache_size_calc(budget) == 64

    def test_zero_headroom(self):
        budget = HardwareBudget(1 * GIB, 1 * GIB, 30 * GIB, 128)
        assert cache_size_calc(budget) == 0

    def test_negative_headroom_clamps_to_zero(self):
        budget = HardwareBudget(1 * GIB, 2 * GIB, 30 * GIB, 128)
        assert cache_size_calc(budget) == 0

    def test_huge_headroom_clamps_to_pool(self):
        budget = HardwareBudget(100 * GIB, 1 * GIB, 30 * GIB, 128)
        assert cache_size_calc(budget) == 128

    def test_invalid_budget(self):
        with pytest.raises(SimulationError):
            cache_size_calc(HardwareBudget(1, 0, 0, 128))


class TestSweep:
    def test_row_count_and_order(self):
        trace = zipf_trace(2, num_experts=12, top_k=2, decode_steps=40)
        rows = sweep(trace, ["lru", "belady", "lfu"], [6, 4, 8])
        assert len(rows) == 9
        assert [(r.policy, r.capacity) for r in rows] == sorted(
            (p, c) for p in ("belady", "lfu", "lru") for c in (4, 6, 8)
        )

    def test_belady_tops_every_capacity(self):
        trace = zipf_trace(6, num_experts=16, top_k=4, decode_steps=100, prefill_tokens=4)
        rows = sweep(trace, ["lru", "lfu", "fifo", "belady"], [4, 8, 12])
        for capacity in (4, 8, 12):
            group = [r for r in rows if r.capacity == capacity]
            best = max(group, key=lambda r: r.hit_rate)
            belady = next(r for r in group if r.policy == "belady")
            assert belady.hit_rate == best.hit_rate

    def test_belady_hit_rate_monotone_in_capacity(self):
        trace = zipf_trace(8, num_experts=16, top_k=4, decode_steps=100)
        rows = sweep(trace, ["belady"], [4, 6, 8, 10, 12])
        rates = [r.hit_rate for r in rows]
        assert rates == sorted(rates)

    def test_jobs_parallel_identical(self):
        trace = zipf_trace(3, num_experts=12, top_k=3, decode_steps=50)
        serial = sweep(trace, ["lru", "lfu"], [4, 6])
        parallel = sweep(trace, ["lru", "lfu"], [4, 6], jobs=4)
        assert serial == parallel

    def test_bad_capacity_rejected(self):
        trace = zipf_trace(0, num_experts=8, top_k=4, decode_steps=5)
        with pytest.raises(CapacityTooSmallError):
            sweep(trace, ["lru"], [4, 2])
