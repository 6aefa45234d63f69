#!/usr/bin/env python3
"""Why LRU-style eviction hurts expert caches: two quality diagnostics.

1. Refetch rate: how often an evicted expert is routed again within the next
   few steps. High values mean the policy throws away experts that are still
   hot. 2. Eviction duels: at every access where two policies both evict,
   whose victim stays unused longer (per the offline oracle)?
   Also emits a per-expert timeline suitable for heatmap rendering.
"""
import tempfile
from pathlib import Path

from moecache import (
    SyntheticWorkloadConfig,
    TraceHeader,
    eviction_quality_duel,
    generate_trace,
    run_simulation,
)
from moecache.replay import layer_schedules
from moecache.reports import load_timeline, write_timeline

header = TraceHeader("demo-moe", num_layers=1, num_experts=64, top_k=8)
cfg = SyntheticWorkloadConfig(
    num_seqs=1, decode_steps=500, prefill_tokens=16,
    zipf_s=1.0, recency_boost=0.3, w_hot=4, rng_seed=3,
)
trace = generate_trace(header, cfg)
capacity = 24
policies = ["lru", "lfu", "arc", "lecar", "belady"]

print(f"capacity {capacity} of {header.num_experts} experts, window w=5\n")
print("refetch-within-5 (fraction of evictions re-routed almost immediately):")
runs = {}
for policy in policies:
    runs[policy] = run_simulation(trace, policy, capacity, window=5)
    report = runs[policy].report
    print(f"  {policy:7s} {report.refetch_within_w:6.1%}   "
          f"({report.evictions} evictions, hit rate {report.hit_rate:.3f})")

print("\neviction duels (fraction of shared eviction points the row policy")
print("picked the longer-idle victim; ties excluded; 0.5 = even):")
print(f"{'':8s}" + "".join(f"{p:>8s}" for p in policies))
for a in policies:
    cells = []
    for b in policies:
        frac = eviction_quality_duel(trace, a, b, capacity)
        cells.append(f"{frac:8.3f}")
    print(f"{a:8s}" + "".join(cells))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "timeline_lru.jsonl"
    write_timeline(layer_schedules(trace), runs["lru"].evictions, "lru", path)
    _, rows = load_timeline(path)
    accesses = sum(1 for r in rows if r["kind"] == "access")
    evictions = sum(1 for r in rows if r["kind"] == "eviction")
    print(f"\ntimeline file: {accesses} access rows + {evictions} eviction marks")
    print("first rows:")
    for row in rows[:3]:
        print(f"  {row}")
