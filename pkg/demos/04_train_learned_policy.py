#!/usr/bin/env python3
"""Train the learned eviction scorer end to end on one synthetic trace.

Pipeline: replay the trace under the offline-optimal policy to label every
decode step with per-expert next-use distances (capped and normalized),
track recency/frequency features, then fit the per-layer feed-forward
scorer with masked MSE, AdamW, and early stopping.
"""
import tempfile
from pathlib import Path

import numpy as np

from moecache import (
    EvictionNet,
    SyntheticWorkloadConfig,
    TraceHeader,
    TrainConfig,
    build_training_data,
    generate_trace,
    load_net,
    save_net,
    train_eviction_net,
)

header = TraceHeader("demo-moe", num_layers=1, num_experts=64, top_k=8)
cfg = SyntheticWorkloadConfig(
    num_seqs=4, decode_steps=1500, prefill_tokens=32,
    zipf_s=1.0, recency_boost=0.3, w_hot=4, rng_seed=101, popularity_seed=7,
)
trace = generate_trace(header, cfg)
print(f"trace: {trace.num_decode_steps()} decode steps")

ds = build_training_data(trace, capacity=64, distance_cap=64)[0]
print(f"dataset: {len(ds)} samples, feature dim {ds.features.shape[1]}, "
      f"mask density {ds.masks.mean():.2f}")
print(f"targets: mean {ds.targets[ds.masks].mean():.3f}, "
      f"{(ds.targets[ds.masks] == 1.0).mean():.1%} at the never-again cap\n")

net = EvictionNet(header.num_experts, seed=0)
result = train_eviction_net(net, ds.features, ds.targets, ds.masks, TrainConfig(seed=0))
print(f"stopped at epoch {result.stopped_epoch}, best epoch {result.best_epoch}")
print("validation masked-MSE by epoch:")
for epoch in range(0, result.stopped_epoch, max(1, result.stopped_epoch // 8)):
    bar = "#" * int(400 * result.val_mse[epoch])
    print(f"  {epoch + 1:3d}  {result.val_mse[epoch]:.5f}  {bar}")

# ranking quality: over warmed-up steps, how well do predicted distances
# order the residents compared to the true next-use distances?
def rank_corr(a, b):
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra**2).sum() * (rb**2).sum()))

corrs = []
for sample in range(200, len(ds), 97):
    resident = np.where(ds.masks[sample])[0]
    if len(resident) < 8:
        continue
    pred = net.forward(ds.features[sample])
    corrs.append(rank_corr(pred[resident], ds.targets[sample][resident]))
print(f"\nmean rank correlation of predicted vs true distances over residents: "
      f"{np.mean(corrs):.2f} (n={len(corrs)} steps)")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "layer_000.evnet"
    size = save_net(net, path)
    reloaded = load_net(path, num_experts=header.num_experts)
    identical = all(
        net.params[k].tobytes() == reloaded.params[k].tobytes() for k in net.params
    )
    print(f"\ncheckpoint: {net.parameter_count()} parameters, {size/1024:.0f} KiB "
          f"on disk, reload bitwise-identical: {identical}")
