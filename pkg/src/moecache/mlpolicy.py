"""Learned eviction policy: score residents with the trained net, evict the
expert with the largest predicted next-use distance."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .features import FeatureTracker
from .net import EvictionNet
from .policies import AccessContext, CachePolicy, NoEvictableError
from .trace import Phase


def ml_policy_evict(resident: Iterable[int], scores: np.ndarray, pinned: frozenset[int]) -> int:
    """Argmax of scores over resident \\ pinned; ties evict the smallest id."""
    best = None
    best_score = -np.inf
    for e in sorted(resident):
        if e in pinned:
            continue
        if scores[e] > best_score:
            best, best_score = e, float(scores[e])
    if best is None:
        raise NoEvictableError("no evictable expert: resident \\ pinned is empty")
    return best


class MLEvictionPolicy(CachePolicy):
    """Runs once per (layer, step): update features, normalize, score.

    Eviction decisions within the step then pick the resident with the
    maximum predicted distance. The tracker resets at sequence boundaries;
    prefill routings update features unless include_prefill is False.
    """

    name = "ml"

    def __init__(
        self,
        capacity: int,
        num_experts: int,
        net: EvictionNet,
        include_prefill: bool = True,
    ):
        super().__init__(capacity, num_experts)
        if net.num_experts != num_experts:
            raise ValueError(
                f"net scores {net.num_experts} experts, cache has {num_experts}"
            )
        self.net = net
        self.include_prefill = include_prefill
        self.tracker = FeatureTracker(1, num_experts)
        self.scores = np.zeros(num_experts)

    def start_sequence(self) -> None:
        self.tracker.reset()

    def begin_event(self, routed: Sequence[int], phase: int, ctx: AccessContext) -> None:
        if phase == Phase.DECODE or self.include_prefill:
            self.tracker.update(0, routed)
        self.scores = self.net.forward(self.tracker.feature_vector(0))

    def _choose_victim(self, ctx: AccessContext) -> int:
        return ml_policy_evict(self.resident, self.scores, ctx.pinned)
