"""Shared test utilities: random trace construction and naive reference
implementations kept deliberately independent of the package internals."""
from __future__ import annotations

import random

from moecache import (
    AccessEvent,
    Phase,
    RoutingTrace,
    SyntheticWorkloadConfig,
    TraceHeader,
    generate_trace,
)
from moecache.replay import ReplayStep


def random_trace(
    rng: random.Random,
    num_layers: int | None = None,
    num_experts: int | None = None,
    top_k: int | None = None,
    max_seqs: int = 2,
    max_prefill: int = 3,
    max_decode: int = 6,
) -> RoutingTrace:
    """Uniformly random (non-Zipfian) valid trace, built event by event."""
    num_layers = num_layers or rng.randint(1, 3)
    num_experts = num_experts or rng.randint(2, 10)
    top_k = top_k or rng.randint(1, min(3, num_experts))
    header = TraceHeader("random", num_layers, num_experts, top_k)
    events = []
    for seq_id in range(rng.randint(1, max_seqs)):
        for step in range(rng.randint(0, max_prefill)):
            for layer in range(num_layers):
                size = rng.randint(1, num_experts)
                experts = tuple(rng.sample(range(num_experts), size))
                events.append(AccessEvent(seq_id, Phase.PREFILL, step, layer, experts))
        for step in range(rng.randint(0, max_decode)):
            for layer in range(num_layers):
                experts = tuple(rng.sample(range(num_experts), top_k))
                events.append(AccessEvent(seq_id, Phase.DECODE, step, layer, experts))
    trace = RoutingTrace(header, tuple(events))
    trace.validate()
    return trace


def zipf_trace(
    seed: int,
    num_layers: int = 1,
    num_experts: int = 16,
    top_k: int = 4,
    num_seqs: int = 1,
    decode_steps: int = 120,
    prefill_tokens: int = 8,
    zipf_s: float = 1.0,
    recency_boost: float = 0.3,
    w_hot: int = 4,
    popularity_seed: int | None = None,
) -> RoutingTrace:
    header = TraceHeader("synthetic", num_layers, num_experts, top_k)
    cfg = SyntheticWorkloadConfig(
        num_seqs=num_seqs,
        decode_steps=decode_steps,
        prefill_tokens=prefill_tokens,
        zipf_s=zipf_s,
        recency_boost=recency_boost,
        w_hot=w_hot,
        rng_seed=seed,
        popularity_seed=popularity_seed,
    )
    return generate_trace(header, cfg)


def naive_policy_decisions(schedule: list[ReplayStep], capacity: int, kind: str):
    """Reference LRU/LFU replay over one layer's schedule.

    Plain dict/set bookkeeping, no shared code with the policy classes:
    recency stamps update on every access, frequency counts every access and
    resets at sequence boundaries, victims minimize (key, expert id) over
    non-pinned residents, and pinning applies within decode events only.
    """
    assert kind in ("lru", "lfu")
    resident: set[int] = set()
    stamp: dict[int, int] = {}
    freq: dict[int, int] = {}
    out = []
    for step in schedule:
        if step.new_sequence and kind == "lfu":
            freq.clear()
        decode = step.phase == Phase.DECODE
        pinned: set[int] = set()
        pos = step.position0
        for expert in step.accesses:
            freq[expert] = freq.get(expert, 0) + 1
            hit = expert in resident
            evicted = None
            if not hit:
                if len(resident) >= capacity:
                    candidates = [e for e in resident if e not in pinned]
                    if kind == "lru":
                        evicted = min(candidates, key=lambda e: (stamp[e], e))
                    else:
                        evicted = min(candidates, key=lambda e: (freq.get(e, 0), e))
                    resident.remove(evicted)
                resident.add(expert)
            stamp[expert] = pos
            out.append((expert, hit, evicted))
            if decode:
                pinned.add(expert)
            pos += 1
    return out
