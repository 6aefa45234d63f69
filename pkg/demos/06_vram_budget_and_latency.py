#!/usr/bin/env python3
"""Size the per-layer expert cache from a VRAM budget, then see what the
resulting hit rate means for decode latency under the overlap cost model.

An SSD expert load (~3 ms) dwarfs an expert FFN computation (~158 us), so a
decode step with any miss costs its loads alone, while an all-hit step costs
only compute. Token throughput is therefore almost entirely a hit-rate story.
"""
from moecache import (
    CostModel,
    HardwareBudget,
    SyntheticWorkloadConfig,
    TraceHeader,
    cache_size_calc,
    generate_trace,
    simulate,
    step_latency_s,
)

GIB = 2**30

print("cache-size calculator: floor(headroom * experts_per_layer / expert_pool_bytes)")
for vram_gb in (8, 12, 16, 24, 40):
    budget = HardwareBudget(
        vram_bytes=vram_gb * GIB,
        nonexpert_bytes=1 * GIB,
        all_experts_bytes=30 * GIB,
        experts_per_layer=128,
    )
    size = cache_size_calc(budget)
    print(f"  {vram_gb:3d} GiB VRAM, 1 GiB non-expert, 30 GiB expert pool "
          f"-> {size:3d} experts/layer resident")

cost = CostModel()  # 3 ms load, 158 us compute, serialized loads
print("\nper-(step, layer) latency under the overlap rule (top_k = 8):")
for misses in (0, 1, 2, 4, 8):
    ms = step_latency_s(misses, 8, cost) * 1e3
    print(f"  {misses} misses -> {ms:6.3f} ms")

header = TraceHeader("demo-moe", num_layers=4, num_experts=64, top_k=8)
cfg = SyntheticWorkloadConfig(
    num_seqs=1, decode_steps=300, prefill_tokens=32,
    zipf_s=1.0, recency_boost=0.3, w_hot=4, rng_seed=5,
)
trace = generate_trace(header, cfg)

print("\nend-to-end estimate on a 4-layer trace, LRU vs the oracle:")
for capacity in (16, 32, 48):
    for policy in ("lru", "belady"):
        r = simulate(trace, policy, capacity, cost)
        print(f"  C={capacity:2d} {policy:7s} hit {r.hit_rate:6.1%}  "
              f"decode {r.est_decode_latency_s*1e3:8.1f} ms  "
              f"{r.tokens_per_second_est:6.1f} tok/s  "
              f"(prefill {r.est_prefill_latency_s*1e3:7.1f} ms)")
