#!/usr/bin/env python3
"""Replay one trace through every replacement policy at several cache sizes.

The optimal offline policy (Belady) bounds what any online policy can do;
the gap below it is what smarter eviction can still win. I/O count equals
misses, and the latency estimate follows the compute/load overlap rule, so
hit rate differences translate directly into decode throughput.
"""
from moecache import SyntheticWorkloadConfig, TraceHeader, generate_trace, sweep
from moecache.reports import format_report_table

header = TraceHeader("demo-moe", num_layers=2, num_experts=64, top_k=8)
cfg = SyntheticWorkloadConfig(
    num_seqs=2,
    decode_steps=600,
    prefill_tokens=32,
    zipf_s=1.0,
    recency_boost=0.3,
    w_hot=4,
    rng_seed=11,
)
trace = generate_trace(header, cfg)
print(f"trace: {trace.num_decode_steps()} decode steps, "
      f"{header.num_layers} layers, {header.num_experts} experts, top-{header.top_k}\n")

rows = sweep(
    trace,
    policies=["lru", "lfu", "fifo", "arc", "lecar", "belady"],
    capacities=[16, 32, 48],
)
print(format_report_table(rows))

print("\nper capacity, the hit-rate gap each policy leaves to the oracle:")
for capacity in (16, 32, 48):
    group = {r.policy: r for r in rows if r.capacity == capacity}
    oracle = group["belady"].hit_rate
    gaps = {name: oracle - r.hit_rate for name, r in group.items() if name != "belady"}
    ranked = sorted(gaps.items(), key=lambda kv: kv[1])
    summary = ", ".join(f"{name} -{gap*100:.1f}pp" for name, gap in ranked)
    print(f"  C={capacity:2d}: {summary}")
