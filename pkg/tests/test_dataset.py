import numpy as np
import pytest

from moecache import (
    AccessEvent,
    Phase,
    RoutingTrace,
    TraceHeader,
    build_training_data,
)

from helpers import zipf_trace


def decode_only_trace(streams, num_experts=8, top_k=2):
    """Single-layer trace whose decode events route the given expert tuples."""
    header = TraceHeader("t", 1, num_experts, top_k)
    events = tuple(
        AccessEvent(0, Phase.DECODE, step, 0, experts)
        for step, experts in enumerate(streams)
    )
    trace = RoutingTrace(header, events)
    trace.validate()
    return trace


class TestTargets:
    def test_distance_three_steps_ahead(self):
        # expert 0 routed at steps 0 and 3: sample at step 0 -> distance 3
        trace = decode_only_trace([(0, 1), (2, 3), (4, 5), (0, 6)])
        ds = build_training_data(trace, capacity=8, distance_cap=64)[0]
        assert ds.targets[0][0] == pytest.approx(3 / 64)
        assert ds.targets[0][0] == pytest.approx(0.046875)

    def test_never_routed_again_clamps_to_one(self):
        trace = decode_only_trace([(0, 1), (2, 3)])
        ds = build_training_data(trace, capacity=8)[0]
        assert ds.targets[0][1] == 1.0  # expert 1 never reappears
        assert ds.targets[1][7] == 1.0  # expert 7 never routed at all

    def test_distance_beyond_cap_clamps(self):
        streams = [(0, 1)] + [(2, 3)] * 10 + [(1, 4)]
        trace = decode_only_trace(streams)
        ds = build_training_data(trace, capacity=8, distance_cap=4)[0]
        assert ds.targets[0][1] == 1.0  # true distance 11 > cap 4

    def test_targets_in_unit_interval(self):
        trace = zipf_trace(3, num_experts=12, top_k=3, decode_steps=50, prefill_tokens=4)
        ds = build_training_data(trace, capacity=6)[0]
        assert np.all(ds.targets >= 0.0) and np.all(ds.targets <= 1.0)
        assert np.all(ds.targets > 0.0)  # distances are >= 1 step


class TestSamples:
    @pytest.mark.parametrize("num_layers", [1, 3])
    def test_one_sample_per_decode_step(self, num_layers):
        trace = zipf_trace(
            1, num_layers=num_layers, num_experts=12, top_k=3,
            num_seqs=2, decode_steps=17, prefill_tokens=5,
        )
        data = build_training_data(trace, capacity=6)
        assert set(data) == set(range(num_layers))
        for ds in data.values():
            assert len(ds) == 2 * 17
            assert ds.features.shape == (34, 24)
            assert ds.targets.shape == (34, 12)
            assert ds.masks.shape == (34, 12)

    def test_mask_is_prior_residency_at_full_capacity(self):
        # capacity = num_experts: no evictions, so the mask at decode step s is
        # exactly the set of experts accessed before s
        trace = decode_only_trace([(0, 1), (2, 3), (0, 4), (5, 6)])
        ds = build_training_data(trace, capacity=8, include_prefill=False)[0]
        seen: set[int] = set()
        for step, experts in enumerate([(0, 1), (2, 3), (0, 4), (5, 6)]):
            expected = np.zeros(8, dtype=bool)
            expected[sorted(seen)] = True
            assert np.array_equal(ds.masks[step], expected)
            seen.update(experts)

    def test_mask_bounded_by_capacity(self):
        trace = zipf_trace(2, num_experts=16, top_k=4, decode_steps=60)
        ds = build_training_data(trace, capacity=5)[0]
        assert ds.masks.sum(axis=1).max() <= 5

    def test_features_follow_update_rules(self):
        trace = decode_only_trace([(0, 1), (2, 3)])
        ds = build_training_data(trace, capacity=8)[0]
        # step 0: experts 0,1 just routed -> recency_norm 1, freq_norm 1
        assert ds.features[0][0] == 1.0 and ds.features[0][1] == 1.0
        assert ds.features[0][8] == 1.0 and ds.features[0][9] == 1.0
        # step 1: experts 0,1 now one step stale
        assert ds.features[1][0] == 0.5 and ds.features[1][2] == 1.0

    def test_include_prefill_flag(self):
        header = TraceHeader("t", 1, 8, 2)
        events = (
            AccessEvent(0, Phase.PREFILL, 0, 0, (0, 1)),
            AccessEvent(0, Phase.DECODE, 0, 0, (2, 3)),
        )
        trace = RoutingTrace(header, events)
        with_prefill = build_training_data(trace, 8, include_prefill=True)[0]
        without = build_training_data(trace, 8, include_prefill=False)[0]
        assert with_prefill.features[0][0] == 0.5  # expert 0 routed one step ago
        assert without.features[0][0] == 0.0  # prefill routing invisible

    def test_capacity_below_top_k_rejected(self):
        trace = decode_only_trace([(0, 1)])
        with pytest.raises(ValueError):
            build_training_data(trace, capacity=1)
