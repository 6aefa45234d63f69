#!/usr/bin/env python3
"""Generate synthetic expert-routing traces and look at their structure.

Walks through the workload generator: Zipf-skewed expert popularity with a
per-layer rank shuffle, a temporal-locality boost toward recently routed
experts, per-token prefill events, and the line-delimited trace file format.
"""
import tempfile
from pathlib import Path

import numpy as np

from moecache import (
    SyntheticWorkloadConfig,
    TraceHeader,
    expert_popularity,
    generate_trace,
    prefill_coverage,
    read_trace,
    write_trace,
)

header = TraceHeader(model_name="demo-moe", num_layers=2, num_experts=64, top_k=8)
cfg = SyntheticWorkloadConfig(
    num_seqs=2,
    decode_steps=400,
    prefill_tokens=64,
    zipf_s=1.0,
    recency_boost=0.3,
    w_hot=4,
    rng_seed=7,
)

print(f"model: {header.num_layers} layers x {header.num_experts} experts, "
      f"top-{header.top_k} routing")
trace = generate_trace(header, cfg)
print(f"generated {len(trace.events)} events "
      f"({trace.num_decode_steps()} decode token steps across {cfg.num_seqs} sequences)\n")

# expert popularity is Zipf over ranks, shuffled per layer
for layer in (0, 1):
    probs = expert_popularity(header, cfg, layer)
    top = np.argsort(probs)[::-1][:5]
    print(f"layer {layer} hottest experts: {top.tolist()} "
          f"(p = {[round(float(probs[e]), 3) for e in top]})")

# empirical routing counts track the configured popularity
counts = np.zeros(header.num_experts)
for ev in trace.events:
    if ev.layer == 0:
        for e in ev.experts:
            counts[e] += 1
probs = expert_popularity(header, cfg, 0)
order = np.argsort(probs)
print(f"\nlayer 0: least popular decile routed {counts[order[:6]].sum():.0f} times, "
      f"most popular decile {counts[order[-6:]].sum():.0f} times")

# prefill touches the expert pool sublinearly in token count
print("\nprefill coverage (fraction of experts touched by the first n tokens):")
for n, fraction in prefill_coverage(trace, [8, 16, 32, 64]):
    bar = "#" * int(40 * fraction)
    print(f"  n={n:3d}  {fraction:5.1%}  {bar}")

# the trace file format round-trips exactly
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "trace.jsonl"
    write_trace(trace, path)
    again = read_trace(path)
    lines = path.read_text().splitlines()
    print(f"\nwrote {path.name}: {len(lines)} lines, round-trip equal: {again == trace}")
    print("header line:", lines[0])
    print("event line: ", lines[1])
