"""Belady-labeled training data for the eviction net.

The trace is replayed per layer under the optimal policy at the target cache
capacity. At every decode step, after the feature update, one sample is
emitted: the normalized feature vector, per-expert next-use distances capped
at distance_cap and scaled to [0, 1] (never routed again -> 1.0), and a mask
marking which experts were resident in the oracle simulation when the step's
eviction decisions would have been made. The loss is later computed over
masked positions only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureTracker
from .policies import AccessContext, BeladyPolicy
from .replay import StepNextUse, build_oracle_index, layer_schedules
from .trace import Phase, RoutingTrace

DEFAULT_DISTANCE_CAP = 64


@dataclass
class LayerDataset:
    features: np.ndarray  # (N, 2E) float64
    targets: np.ndarray  # (N, E) float64 in [0, 1]
    masks: np.ndarray  # (N, E) bool

    def __len__(self) -> int:
        return self.features.shape[0]


def build_training_data(
    trace: RoutingTrace,
    capacity: int,
    distance_cap: int = DEFAULT_DISTANCE_CAP,
    include_prefill: bool = True,
) -> dict[int, LayerDataset]:
    """One dataset per layer; sample count = the layer's decode event count."""
    if capacity < trace.header.top_k:
        raise ValueError(
            f"capacity {capacity} is below top_k {trace.header.top_k}"
        )
    if distance_cap < 1:
        raise ValueError(f"distance_cap must be >= 1, got {distance_cap}")
    num_experts = trace.header.num_experts
    schedules = layer_schedules(trace)
    oracle = build_oracle_index(schedules)

    datasets: dict[int, LayerDataset] = {}
    for layer, schedule in enumerate(schedules):
        next_use = StepNextUse(schedule)
        policy = BeladyPolicy(capacity, num_experts)
        tracker = FeatureTracker(1, num_experts)
        feats: list[np.ndarray] = []
        targets: list[np.ndarray] = []
        masks: list[np.ndarray] = []
        for step in schedule:
            if step.new_sequence:
                policy.start_sequence()
                tracker.reset()
            if step.phase == Phase.DECODE or include_prefill:
                tracker.update(0, step.routed)
            if step.phase == Phase.DECODE:
                mask = np.zeros(num_experts, dtype=bool)
                mask[sorted(policy.resident)] = True
                target = np.empty(num_experts)
                for e in range(num_experts):
                    d = next_use.distance(e, step.tick)
                    target[e] = min(d, distance_cap) / distance_cap
                feats.append(tracker.feature_vector(0))
                targets.append(target)
                masks.append(mask)
            pinned: set[int] = set()
            pos = step.position0
            for expert in step.accesses:
                ctx = AccessContext(
                    layer=layer,
                    position=pos,
                    step=step.tick,
                    pinned=frozenset(pinned) if step.phase == Phase.DECODE else frozenset(),
                    oracle=oracle,
                )
                policy.access(expert, ctx)
                if step.phase == Phase.DECODE:
                    pinned.add(expert)
                pos += 1
        n = len(feats)
        datasets[layer] = LayerDataset(
            features=np.array(feats) if n else np.zeros((0, 2 * num_experts)),
            targets=np.array(targets) if n else np.zeros((0, num_experts)),
            masks=np.array(masks) if n else np.zeros((0, num_experts), dtype=bool),
        )
    return datasets
