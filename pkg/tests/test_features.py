import copy
import random

import numpy as np
import pytest

from moecache import FeatureTracker

INF = np.inf


class TestUpdateRules:
    def test_worked_example_step0(self):
        tracker = FeatureTracker(1, 6)
        tracker.update(0, {4})
        assert tracker.recency[0, 4] == 1
        for e in range(6):
            if e != 4:
                assert tracker.recency[0, e] == INF
        assert tracker.frequency[0, 4] == 1
        assert tracker.frequency[0].sum() == 1

    def test_worked_example_step1(self):
        tracker = FeatureTracker(1, 6)
        tracker.update(0, {4})
        tracker.update(0, {3})
        assert tracker.recency[0, 3] == 1
        assert tracker.recency[0, 4] == 2
        assert tracker.frequency[0, 3] == 1
        assert tracker.frequency[0, 4] == 1

    def test_empty_routed_set(self):
        tracker = FeatureTracker(1, 4)
        tracker.update(0, {0, 1})
        freq_before = tracker.frequency.copy()
        tracker.update(0, set())
        assert tracker.recency[0, 0] == 2
        assert tracker.recency[0, 1] == 2
        assert tracker.recency[0, 2] == INF
        assert np.array_equal(tracker.frequency, freq_before)

    def test_layers_independent(self):
        tracker = FeatureTracker(2, 4)
        tracker.update(0, {1})
        assert tracker.recency[1, 1] == INF
        assert tracker.frequency[1].sum() == 0

    def test_update_is_markovian(self):
        rng = random.Random(0)
        tracker = FeatureTracker(1, 8)
        updates = [set(rng.sample(range(8), rng.randint(0, 4))) for _ in range(50)]
        for routed in updates[:20]:
            tracker.update(0, routed)
        checkpoint = copy.deepcopy(tracker)
        for routed in updates[20:]:
            tracker.update(0, routed)
            checkpoint.update(0, routed)
        assert np.array_equal(tracker.recency, checkpoint.recency)
        assert np.array_equal(tracker.frequency, checkpoint.frequency)


class TestNormalization:
    def test_direct_application(self):
        tracker = FeatureTracker(1, 3)
        tracker.recency[0] = [1.0, 2.0, INF]
        tracker.frequency[0] = [2, 1, 0]
        fv = tracker.feature_vector(0)
        assert fv.tolist() == [1.0, 0.5, 0.0, 1.0, 0.5, 0.0]

    def test_cold_start_all_zero(self):
        tracker = FeatureTracker(1, 4)
        assert tracker.feature_vector(0).tolist() == [0.0] * 8

    def test_symmetric_experts(self):
        tracker = FeatureTracker(1, 2)
        tracker.recency[0] = [1.0, 1.0]
        tracker.frequency[0] = [3, 3]
        assert tracker.feature_vector(0).tolist() == [1.0, 1.0, 1.0, 1.0]

    @pytest.mark.parametrize("seed", range(5))
    def test_bounds_after_random_updates(self, seed):
        rng = random.Random(seed)
        tracker = FeatureTracker(1, 10)
        for _ in range(rng.randint(1, 60)):
            tracker.update(0, set(rng.sample(range(10), rng.randint(0, 5))))
            fv = tracker.feature_vector(0)
            assert fv.shape == (20,)
            assert np.all(fv >= 0.0) and np.all(fv <= 1.0)

    def test_equal_frequency_more_recent_scores_higher(self):
        tracker = FeatureTracker(1, 4)
        tracker.update(0, {0})
        tracker.update(0, {1})
        fv = tracker.feature_vector(0)
        assert tracker.frequency[0, 0] == tracker.frequency[0, 1]
        assert fv[1] > fv[0]  # expert 1 accessed more recently

    def test_reset_clears_everything(self):
        tracker = FeatureTracker(2, 4)
        tracker.update(0, {0})
        tracker.update(1, {2})
        tracker.reset()
        assert np.all(np.isinf(tracker.recency))
        assert tracker.frequency.sum() == 0
