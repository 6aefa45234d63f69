#!/usr/bin/env python3
"""Held-out comparison: learned eviction vs LRU/LFU/ARC/LeCaR vs the oracle.

Trains on traces from one workload family (fixed expert-popularity profile,
like a fixed model) and evaluates on routing draws the net never saw. The
learned scorer combines recency and frequency, so it should sit above both
single-signal heuristics and recover part of the oracle's headroom.
"""
import numpy as np

from moecache import (
    EvictionNet,
    SyntheticWorkloadConfig,
    TraceHeader,
    TrainConfig,
    build_training_data,
    generate_trace,
    simulate,
    train_eviction_net,
)

header = TraceHeader("demo-moe", num_layers=1, num_experts=64, top_k=8)
capacity = 32


def family(rng_seed, num_seqs, decode_steps):
    return SyntheticWorkloadConfig(
        num_seqs=num_seqs, decode_steps=decode_steps, prefill_tokens=32,
        zipf_s=1.0, recency_boost=0.3, w_hot=4,
        rng_seed=rng_seed, popularity_seed=7,
    )


print("training on seeds 101-102 ...")
parts = [
    build_training_data(generate_trace(header, family(seed, 8, 2000)), capacity=64)[0]
    for seed in (101, 102)
]
net = EvictionNet(header.num_experts, seed=0)
result = train_eviction_net(
    net,
    np.concatenate([p.features for p in parts]),
    np.concatenate([p.targets for p in parts]),
    np.concatenate([p.masks for p in parts]),
    TrainConfig(seed=0),
)
print(f"trained: best epoch {result.best_epoch}, "
      f"val mse {result.val_mse[result.best_epoch - 1]:.5f}\n")

policies = ["lru", "lfu", "arc", "lecar", "ml", "belady"]
rates = {p: [] for p in policies}
for eval_seed in range(201, 206):
    trace = generate_trace(header, family(eval_seed, 1, 800))
    for policy in policies:
        report = simulate(
            trace, policy, capacity, nets=net if policy == "ml" else None
        )
        rates[policy].append(report.hit_rate)

print(f"hit rate at capacity {capacity}/{header.num_experts}, "
      "mean over 5 held-out traces:")
oracle = np.mean(rates["belady"])
for policy in sorted(policies, key=lambda p: -np.mean(rates[p])):
    mean = np.mean(rates[policy])
    bar = "#" * int(60 * (mean - 0.7) / 0.3) if mean > 0.7 else ""
    note = "" if policy == "belady" else f"  (oracle gap {100*(oracle-mean):4.1f}pp)"
    print(f"  {policy:7s} {mean:7.2%}{note}  {bar}")
