"""Recency/frequency feature tracking for the learned eviction policy.

Per layer and expert, the tracker keeps a recency score r (steps since last
routing, 1 if routed this step, infinity if never routed) and a frequency
score f (cumulative routing count). One update is applied per (layer, time
step) with that step's routed set:

    routed:     r <- 1,      f <- f + 1
    not routed: r <- r + 1,  f unchanged   (infinity stays infinity)

Feature vectors map these onto [0, 1]: recency through the inverse 1/r
(1/inf -> 0) and frequency by dividing by the running per-layer maximum
(all zeros while max f = 0).
"""
from __future__ import annotations

from typing import Iterable

import numpy as np


class FeatureTracker:
    def __init__(self, num_layers: int, num_experts: int):
        self.num_layers = num_layers
        self.num_experts = num_experts
        self.recency = np.full((num_layers, num_experts), np.inf)
        self.frequency = np.zeros((num_layers, num_experts), dtype=np.int64)

    def reset(self) -> None:
        """Forget all state, e.g. at an independent-sequence boundary."""
        self.recency.fill(np.inf)
        self.frequency.fill(0)

    def update(self, layer: int, routed: Iterable[int]) -> None:
        routed = list(routed)
        self.recency[layer] += 1.0
        if routed:
            self.recency[layer, routed] = 1.0
            self.frequency[layer, routed] += 1

    def max_frequency(self, layer: int) -> int:
        return int(self.frequency[layer].max(initial=0))

    def feature_vector(self, layer: int) -> np.ndarray:
        """Normalized [recency || frequency] vector of length 2 * num_experts."""
        recency_norm = 1.0 / self.recency[layer]  # 1/inf == 0 exactly
        max_f = self.frequency[layer].max(initial=0)
        if max_f > 0:
            frequency_norm = self.frequency[layer] / float(max_f)
        else:
            frequency_norm = np.zeros(self.num_experts)
        return np.concatenate([recency_norm, frequency_norm])
