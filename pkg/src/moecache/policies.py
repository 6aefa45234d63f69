"""Per-layer expert cache replacement policies.

Every policy manages one layer's fixed-capacity set of resident expert ids.
An access either hits (expert resident) or misses; a miss on a full cache
evicts exactly one victim chosen by the policy. Experts named in
``ctx.pinned`` (already touched by the current multi-expert event) are never
evicted. All tie-breaks evict the smallest expert id, which keeps every
policy deterministic and testable.
"""
from __future__ import annotations

import math
import random
from bisect import bisect_right
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence


class PolicyError(Exception):
    pass


class NoEvictableError(PolicyError):
    """Every resident expert is pinned; no victim can be chosen."""


@dataclass(frozen=True)
class PolicyDecision:
    loaded: int
    was_hit: bool
    evicted: Optional[int] = None


@dataclass
class AccessContext:
    """Per-access information handed to a policy.

    position is the index of this access in the layer's flattened access
    stream; step is the index of the enclosing event in the layer's event
    stream. The oracle is only populated for Belady.
    """

    layer: int = 0
    position: int = 0
    step: int = 0
    pinned: frozenset[int] = frozenset()
    oracle: Optional["OracleIndex"] = None


class OracleIndex:
    """Future access positions per (layer, expert), for Belady lookups."""

    def __init__(self, positions: dict[tuple[int, int], list[int]]):
        self._positions = positions

    @classmethod
    def from_layer_streams(cls, streams: dict[int, Sequence[int]]) -> "OracleIndex":
        positions: dict[tuple[int, int], list[int]] = {}
        for layer, stream in streams.items():
            for pos, expert in enumerate(stream):
                positions.setdefault((layer, expert), []).append(pos)
        return cls(positions)

    def next_use(self, layer: int, expert: int, position: int) -> float:
        """Distance to the expert's next access strictly after ``position``.

        Returns math.inf when the expert is never accessed again.
        """
        stored = self._positions.get((layer, expert))
        if not stored:
            return math.inf
        i = bisect_right(stored, position)
        if i == len(stored):
            return math.inf
        return stored[i] - position


def belady_next_use(index: OracleIndex, layer: int, expert: int, position: int) -> float:
    return index.next_use(layer, expert, position)


class CachePolicy:
    """Base class: owns the resident set and the hit/miss/evict envelope."""

    name = "base"

    def __init__(self, capacity: int, num_experts: int):
        if capacity < 1:
            raise PolicyError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.num_experts = num_experts
        self.resident: set[int] = set()

    def access(self, expert: int, ctx: AccessContext) -> PolicyDecision:
        if expert in self.resident:
            self._on_hit(expert, ctx)
            return PolicyDecision(expert, True)
        self._on_miss(expert, ctx)
        evicted = None
        if len(self.resident) >= self.capacity:
            evicted = self._choose_victim(ctx)
            self.resident.discard(evicted)
            self._on_evict(evicted, ctx)
        self.resident.add(expert)
        self._on_insert(expert, ctx)
        return PolicyDecision(expert, False, evicted)

    def begin_event(self, routed: Sequence[int], phase: int, ctx: AccessContext) -> None:
        """Called once per event before its accesses are processed."""

    def start_sequence(self) -> None:
        """Called at each independent-sequence boundary."""

    def _evictable(self, ctx: AccessContext) -> list[int]:
        candidates = [e for e in self.resident if e not in ctx.pinned]
        if not candidates:
            raise NoEvictableError(
                f"all {len(self.resident)} resident experts are pinned"
            )
        return candidates

    # hooks
    def _on_hit(self, expert: int, ctx: AccessContext) -> None: ...
    def _on_miss(self, expert: int, ctx: AccessContext) -> None: ...
    def _on_insert(self, expert: int, ctx: AccessContext) -> None: ...
    def _on_evict(self, expert: int, ctx: AccessContext) -> None: ...
    def _choose_victim(self, ctx: AccessContext) -> int:
        raise NotImplementedError


class LRUPolicy(CachePolicy):
    name = "lru"

    def __init__(self, capacity: int, num_experts: int):
        super().__init__(capacity, num_experts)
        self._stamp: dict[int, int] = {}

    def _on_hit(self, expert: int, ctx: AccessContext) -> None:
        self._stamp[expert] = ctx.position

    def _on_insert(self, expert: int, ctx: AccessContext) -> None:
        self._stamp[expert] = ctx.position

    def _on_evict(self, expert: int, ctx: AccessContext) -> None:
        self._stamp.pop(expert, None)

    def _choose_victim(self, ctx: AccessContext) -> int:
        return min(self._evictable(ctx), key=lambda e: (self._stamp[e], e))


class FIFOPolicy(CachePolicy):
    name = "fifo"

    def __init__(self, capacity: int, num_experts: int):
        super().__init__(capacity, num_experts)
        self._arrival: dict[int, int] = {}
        self._clock = 0

    def _on_insert(self, expert: int, ctx: AccessContext) -> None:
        self._arrival[expert] = self._clock
        self._clock += 1

    def _on_evict(self, expert: int, ctx: AccessContext) -> None:
        self._arrival.pop(expert, None)

    def _choose_victim(self, ctx: AccessContext) -> int:
        return min(self._evictable(ctx), key=lambda e: (self._arrival[e], e))


class LFUPolicy(CachePolicy):
    """Least-frequently-used over cumulative per-expert access counts.

    Counts are kept for all experts (not just residents), never age within a
    sequence, and reset at sequence boundaries.
    """

    name = "lfu"

    def __init__(self, capacity: int, num_experts: int):
        super().__init__(capacity, num_experts)
        self._freq: dict[int, int] = {}

    def start_sequence(self) -> None:
        self._freq.clear()

    def _bump(self, expert: int) -> None:
        self._freq[expert] = self._freq.get(expert, 0) + 1

    def _on_hit(self, expert: int, ctx: AccessContext) -> None:
        self._bump(expert)

    def _on_miss(self, expert: int, ctx: AccessContext) -> None:
        self._bump(expert)

    def _choose_victim(self, ctx: AccessContext) -> int:
        return min(self._evictable(ctx), key=lambda e: (self._freq.get(e, 0), e))


class BeladyPolicy(CachePolicy):
    """Optimal offline policy: evict the resident whose next use is farthest."""

    name = "belady"

    def _choose_victim(self, ctx: AccessContext) -> int:
        if ctx.oracle is None:
            raise PolicyError("belady policy requires an oracle index")
        best_expert = None
        best_dist = -1.0
        for e in sorted(self._evictable(ctx)):
            d = ctx.oracle.next_use(ctx.layer, e, ctx.position)
            if d > best_dist:
                best_expert, best_dist = e, d
        return best_expert


class ARCPolicy(CachePolicy):
    """Standard adaptive replacement cache (T1/T2 resident, B1/B2 ghosts).

    The adaptation target p is nudged toward recency on B1 ghost hits and
    toward frequency on B2 ghost hits. The only deviation from the textbook
    algorithm is pin-awareness: REPLACE skips pinned entries from the chosen
    list's LRU end and falls back to the other list if necessary.
    """

    name = "arc"

    def __init__(self, capacity: int, num_experts: int):
        super().__init__(capacity, num_experts)
        self.t1: OrderedDict[int, None] = OrderedDict()
        self.t2: OrderedDict[int, None] = OrderedDict()
        self.b1: OrderedDict[int, None] = OrderedDict()
        self.b2: OrderedDict[int, None] = OrderedDict()
        self.p = 0.0

    def _replace(self, expert: int, ctx: AccessContext) -> Optional[int]:
        in_b2 = expert in self.b2
        use_t1 = len(self.t1) >= 1 and (
            len(self.t1) > self.p or (in_b2 and len(self.t1) == self.p)
        )
        for source, ghost in (
            (self.t1, self.b1) if use_t1 else (self.t2, self.b2),
            (self.t2, self.b2) if use_t1 else (self.t1, self.b1),
        ):
            for victim in source:  # LRU side first
                if victim not in ctx.pinned:
                    del source[victim]
                    ghost[victim] = None
                    self.resident.discard(victim)
                    return victim
        raise NoEvictableError("all resident experts are pinned")

    def access(self, expert: int, ctx: AccessContext) -> PolicyDecision:
        if expert in self.t1 or expert in self.t2:
            if expert in self.t1:
                del self.t1[expert]
            else:
                del self.t2[expert]
            self.t2[expert] = None
            return PolicyDecision(expert, True)

        c = self.capacity
        evicted = None
        if expert in self.b1:
            self.p = min(float(c), self.p + max(len(self.b2) / len(self.b1), 1.0))
            if len(self.t1) + len(self.t2) >= c:
                evicted = self._replace(expert, ctx)
            del self.b1[expert]
            self.t2[expert] = None
        elif expert in self.b2:
            self.p = max(0.0, self.p - max(len(self.b1) / len(self.b2), 1.0))
            if len(self.t1) + len(self.t2) >= c:
                evicted = self._replace(expert, ctx)
            del self.b2[expert]
            self.t2[expert] = None
        else:
            l1 = len(self.t1) + len(self.b1)
            if l1 == c:
                if len(self.t1) < c:
                    self.b1.popitem(last=False)
                    if len(self.t1) + len(self.t2) >= c:
                        evicted = self._replace(expert, ctx)
                else:
                    # B1 empty, T1 full: drop T1's LRU without a ghost entry
                    for victim in self.t1:
                        if victim not in ctx.pinned:
                            del self.t1[victim]
                            self.resident.discard(victim)
                            evicted = victim
                            break
                    else:
                        raise NoEvictableError("all resident experts are pinned")
            elif l1 < c:
                total = l1 + len(self.t2) + len(self.b2)
                if total >= c:
                    if total == 2 * c:
                        self.b2.popitem(last=False)
                    if len(self.t1) + len(self.t2) >= c:
                        evicted = self._replace(expert, ctx)
            self.t1[expert] = None
        self.resident.add(expert)
        return PolicyDecision(expert, False, evicted)


def lecar_update(
    weights: tuple[float, float],
    ghost_kind: str,
    elapsed: int,
    learning_rate: float,
    discount: float,
) -> tuple[float, float]:
    """Regret update after a ghost hit: boost the policy that would have kept
    the expert, i.e. a hit in the LRU ghost list rewards the LFU weight.

    weights is (w_lru, w_lfu); elapsed is the time since the ghost entry was
    evicted. Returns renormalized weights summing to 1.
    """
    w_lru, w_lfu = weights
    reward = discount**elapsed
    if ghost_kind == "lru":
        w_lfu *= math.exp(learning_rate * reward)
    elif ghost_kind == "lfu":
        w_lru *= math.exp(learning_rate * reward)
    else:
        raise ValueError(f"ghost_kind must be 'lru' or 'lfu', got {ghost_kind!r}")
    total = w_lru + w_lfu
    return (w_lru / total, w_lfu / total)


class LeCaRPolicy(CachePolicy):
    """Regret-minimizing blend of LRU and LFU with ghost histories.

    On each miss the evicting policy is sampled from the weight vector
    (seeded RNG, so the decision sequence is reproducible); victims land in
    that policy's ghost list, and a later miss on a ghost entry boosts the
    other policy's weight multiplicatively.
    """

    name = "lecar"

    def __init__(
        self,
        capacity: int,
        num_experts: int,
        learning_rate: float = 0.45,
        discount_base: float = 0.005,
        seed: int = 0,
    ):
        super().__init__(capacity, num_experts)
        self.learning_rate = learning_rate
        self.discount = discount_base ** (1.0 / capacity)
        self.weights = (0.5, 0.5)
        self._rng = random.Random(seed)
        self._stamp: dict[int, int] = {}
        self._freq: dict[int, int] = {}
        self._ghost_lru: OrderedDict[int, int] = OrderedDict()  # expert -> evict position
        self._ghost_lfu: OrderedDict[int, int] = OrderedDict()

    def start_sequence(self) -> None:
        self._freq.clear()

    def _on_hit(self, expert: int, ctx: AccessContext) -> None:
        self._stamp[expert] = ctx.position
        self._freq[expert] = self._freq.get(expert, 0) + 1

    def _on_miss(self, expert: int, ctx: AccessContext) -> None:
        self._freq[expert] = self._freq.get(expert, 0) + 1
        if expert in self._ghost_lru:
            elapsed = ctx.position - self._ghost_lru.pop(expert)
            self.weights = lecar_update(
                self.weights, "lru", elapsed, self.learning_rate, self.discount
            )
        elif expert in self._ghost_lfu:
            elapsed = ctx.position - self._ghost_lfu.pop(expert)
            self.weights = lecar_update(
                self.weights, "lfu", elapsed, self.learning_rate, self.discount
            )

    def _on_insert(self, expert: int, ctx: AccessContext) -> None:
        self._stamp[expert] = ctx.position

    def _choose_victim(self, ctx: AccessContext) -> int:
        candidates = self._evictable(ctx)
        use_lru = self._rng.random() < self.weights[0]
        if use_lru:
            victim = min(candidates, key=lambda e: (self._stamp[e], e))
            ghost = self._ghost_lru
        else:
            victim = min(candidates, key=lambda e: (self._freq.get(e, 0), e))
            ghost = self._ghost_lfu
        self._stamp.pop(victim, None)
        ghost[victim] = ctx.position
        while len(ghost) > self.capacity:
            ghost.popitem(last=False)
        return victim
