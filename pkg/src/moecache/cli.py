"""Command-line entry point.

Subcommands: gen-trace, train, eval, diagnose, cache-size, validate-trace.
All experiment inputs live in a single JSON config document; flags override
individual config fields (flag wins). Every run is deterministic given the
config and seed, and every machine-readable output round-trips through
moecache.reports. The default output directory comes from --out-dir, else
the MOECACHE_OUT_DIR environment variable, else the working directory.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reports
from .dataset import build_training_data
from .engine import (
    CapacityTooSmallError,
    CostModel,
    HardwareBudget,
    SimulationError,
    cache_size_calc,
    eviction_quality_duel,
    run_simulation,
    sweep,
)
from .net import (
    EvictionNet,
    ShapeMismatchError,
    TrainConfig,
    load_net,
    save_net,
    train_eviction_net,
)
from .replay import layer_schedules
from .trace import (
    InvalidConfigError,
    SyntheticWorkloadConfig,
    TraceError,
    TraceHeader,
    generate_trace,
    read_trace,
    write_trace,
)

OUT_DIR_ENV = "MOECACHE_OUT_DIR"

DEFAULT_CONFIG = {
    "trace": None,
    "model_name": "synthetic",
    "num_layers": 1,
    "num_experts": 64,
    "top_k": 8,
    "workload": {
        "num_seqs": 1,
        "decode_steps": 256,
        "prefill_tokens": 32,
        "zipf_s": 1.0,
        "recency_boost": 0.0,
        "w_hot": 4,
        "rng_seed": 0,
        "popularity_seed": None,
    },
    "policies": ["lru", "lfu", "belady"],
    "capacities": [16, 32, 48],
    "cost": {
        "t_load_ms": 3.0,
        "t_compute_us": 158.0,
        "loads_serial": True,
        "ml_score_cost_us": 0.0,
    },
    "window": 5,
    "training": {
        "label_capacity": None,
        "distance_cap": 64,
        "include_prefill": True,
        "shared_net": False,
        "learning_rate": 1e-3,
        "weight_decay": 1e-2,
        "epochs": 200,
        "patience": 10,
        "batch_size": 256,
        "val_fraction": 0.1,
        "seed": 0,
    },
    "checkpoints": None,
    "out_dir": None,
}


class CliError(Exception):
    """Configuration or usage error; exits with status 2."""


class MissingCheckpointError(CliError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key not in base:
            raise CliError(f"unknown config field '{path}{key}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict:
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}")
    return _merge(DEFAULT_CONFIG, user)


def _apply_flags(config: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "seed", None) is not None:
        config["workload"]["rng_seed"] = args.seed
        config["training"]["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        config["out_dir"] = args.out_dir
    if getattr(args, "trace", None) is not None:
        config["trace"] = args.trace
    if getattr(args, "checkpoints", None) is not None:
        config["checkpoints"] = args.checkpoints
    if getattr(args, "policies", None):
        config["policies"] = args.policies
    if getattr(args, "capacities", None):
        config["capacities"] = args.capacities
    return config


def _out_dir(config: dict) -> Path:
    out = config.get("out_dir") or os.environ.get(OUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header(config: dict) -> TraceHeader:
    header = TraceHeader(
        config["model_name"],
        config["num_layers"],
        config["num_experts"],
        config["top_k"],
    )
    header.validate()
    return header


def _workload(config: dict) -> SyntheticWorkloadConfig:
    cfg = SyntheticWorkloadConfig(**config["workload"])
    cfg.validate()
    return cfg


def _cost(config: dict) -> CostModel:
    c = config["cost"]
    cost = CostModel(
        t_load_s=c["t_load_ms"] * 1e-3,
        t_compute_s=c["t_compute_us"] * 1e-6,
        loads_serial=c["loads_serial"],
        ml_score_cost_s=c["ml_score_cost_us"] * 1e-6,
    )
    cost.validate()
    return cost


def _load_trace(config: dict):
    path = config.get("trace")
    if not path:
        raise CliError("config field 'trace' is required (path to a trace file)")
    if not Path(path).exists():
        raise CliError(f"trace file does not exist: {path}")
    return read_trace(path)


def _checkpoint_paths(directory: Path, num_layers: int, shared: bool) -> list[Path]:
    if shared:
        return [directory / "shared.evnet"]
    return [directory / f"layer_{layer:03d}.evnet" for layer in range(num_layers)]


def _load_nets(config: dict, num_layers: int, num_experts: int):
    directory = config.get("checkpoints")
    if not directory:
        raise MissingCheckpointError(
            "ml policy requested but config field 'checkpoints' is not set"
        )
    directory = Path(directory)
    shared = directory / "shared.evnet"
    if shared.exists():
        return load_net(shared, num_experts)
    nets = {}
    for layer in range(num_layers):
        path = directory / f"layer_{layer:03d}.evnet"
        if not path.exists():
            raise MissingCheckpointError(
                f"missing checkpoint for layer {layer}: {path} "
                "(run the train command first)"
            )
        nets[layer] = load_net(path, num_experts)
    return nets


def _needs_ml(policies) -> bool:
    return any((p if isinstance(p, str) else p.get("name")) == "ml" for p in policies)


# --- subcommands -------------------------------------------------------------


def cmd_gen_trace(config: dict, args: argparse.Namespace) -> int:
    header = _header(config)
    workload = _workload(config)
    out = Path(args.out) if args.out else _out_dir(config) / "trace.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    trace = generate_trace(header, workload)
    write_trace(trace, out)
    read_trace(out)  # outputs must validate before a zero exit
    print(
        f"wrote {out}: model={header.model_name} layers={header.num_layers} "
        f"experts={header.num_experts} top_k={header.top_k} "
        f"events={len(trace.events)} decode_steps={trace.num_decode_steps()}"
    )
    return 0


def cmd_validate_trace(config: dict, args: argparse.Namespace) -> int:
    trace = read_trace(args.trace_file)
    header = trace.header
    print(
        f"{args.trace_file}: OK (model={header.model_name} layers={header.num_layers} "
        f"experts={header.num_experts} top_k={header.top_k} events={len(trace.events)})"
    )
    return 0


def cmd_train(config: dict, args: argparse.Namespace) -> int:
    trace = _load_trace(config)
    tc = config["training"]
    label_capacity = tc["label_capacity"] or trace.header.num_experts
    datasets = build_training_data(
        trace,
        label_capacity,
        distance_cap=tc["distance_cap"],
        include_prefill=tc["include_prefill"],
    )
    train_cfg = TrainConfig(
        learning_rate=tc["learning_rate"],
        weight_decay=tc["weight_decay"],
        epochs=tc["epochs"],
        patience=tc["patience"],
        batch_size=tc["batch_size"],
        val_fraction=tc["val_fraction"],
        seed=tc["seed"],
    )
    out = _out_dir(config)
    ckpt_dir = Path(config["checkpoints"]) if config["checkpoints"] else out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    num_experts = trace.header.num_experts

    def train_one(layer_and_data):
        layer, (features, targets, masks) = layer_and_data
        net = EvictionNet(num_experts, seed=train_cfg.seed)
        result = train_eviction_net(net, features, targets, masks, train_cfg)
        return layer, result

    if tc["shared_net"]:
        features = np.concatenate([d.features for d in datasets.values()])
        targets = np.concatenate([d.targets for d in datasets.values()])
        masks = np.concatenate([d.masks for d in datasets.values()])
        jobs_data = [(-1, (features, targets, masks))]
    else:
        jobs_data = [
            (layer, (d.features, d.targets, d.masks)) for layer, d in datasets.items()
        ]

    jobs = max(1, getattr(args, "jobs", 1) or 1)
    if jobs > 1 and len(jobs_data) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(train_one, jobs_data))
    else:
        results = [train_one(item) for item in jobs_data]
    results.sort(key=lambda item: item[0])

    log: dict[int, dict] = {}
    for layer, result in results:
        name = "shared.evnet" if layer < 0 else f"layer_{layer:03d}.evnet"
        size = save_net(result.net, ckpt_dir / name)
        log[layer] = {
            "checkpoint": name,
            "parameters": result.net.parameter_count(),
            "serialized_bytes": size,
            "train_mse": result.train_mse,
            "val_mse": result.val_mse,
            "best_epoch": result.best_epoch,
            "stopped_epoch": result.stopped_epoch,
        }
        label = "shared" if layer < 0 else f"layer {layer}"
        print(
            f"{label}: best epoch {result.best_epoch}/{result.stopped_epoch}, "
            f"val mse {result.val_mse[result.best_epoch - 1]:.6f}, "
            f"{size} bytes -> {ckpt_dir / name}"
        )
    log_path = out / "training_log.json"
    reports.write_training_log(log, log_path)
    reports.load_training_log(log_path)
    for layer, entry in log.items():
        load_net(ckpt_dir / entry["checkpoint"], num_experts)
    print(f"wrote {log_path}")
    return 0


def cmd_eval(config: dict, args: argparse.Namespace) -> int:
    trace = _load_trace(config)
    cost = _cost(config)
    policies = config["policies"]
    capacities = config["capacities"]
    if not capacities:
        raise CliError("config field 'capacities' must be a non-empty list")
    nets = None
    if _needs_ml(policies):
        nets = _load_nets(config, trace.header.num_layers, trace.header.num_experts)
    rows = sweep(
        trace,
        policies,
        capacities,
        cost,
        window=config["window"],
        nets=nets,
        jobs=max(1, getattr(args, "jobs", 1) or 1),
    )
    out = _out_dir(config)
    report_path = out / "report.json"
    reports.write_report(rows, report_path)
    reports.write_hit_rate_series(rows, out / "series_hit_rate.json")
    reports.write_throughput_series(rows, out / "series_tokens_per_second.json")
    reports.load_report(report_path)
    reports.load_series(out / "series_hit_rate.json")
    reports.load_series(out / "series_tokens_per_second.json")
    table = reports.format_report_table(rows)
    print(table)
    print(f"wrote {report_path}")
    return 0


def cmd_diagnose(config: dict, args: argparse.Namespace) -> int:
    trace = _load_trace(config)
    policies = config["policies"]
    capacity = args.capacity or config["capacities"][0]
    window = config["window"]
    nets = None
    if _needs_ml(policies):
        nets = _load_nets(config, trace.header.num_layers, trace.header.num_experts)
    out = _out_dir(config)
    schedules = layer_schedules(trace)

    names = [p if isinstance(p, str) else p["name"] for p in policies]
    refetch: dict[str, float] = {}
    for policy in policies:
        name = policy if isinstance(policy, str) else policy["name"]
        run = run_simulation(trace, policy, capacity, window=window, nets=nets)
        refetch[name] = run.report.refetch_within_w
        timeline_path = out / f"timeline_{name}.jsonl"
        reports.write_timeline(schedules, run.evictions, name, timeline_path)
        reports.load_timeline(timeline_path)

    duel: dict[str, float] = {}
    for a in policies:
        for b in policies:
            name_a = a if isinstance(a, str) else a["name"]
            name_b = b if isinstance(b, str) else b["name"]
            duel[f"{name_a}|{name_b}"] = eviction_quality_duel(
                trace, a, b, capacity, nets=nets
            )

    diag_path = out / "diagnostics.json"
    reports.write_diagnostics(refetch, duel, window, diag_path)
    reports.load_diagnostics(diag_path)

    print(f"capacity {capacity}, window {window}")
    for name in names:
        print(f"refetch_within_{window}[{name}] = {refetch[name]:.4f}")
    print("duel matrix (fraction row-policy better):")
    header = " ".join(f"{n:>8}" for n in names)
    print(f"{'':>8} {header}")
    for a in names:
        cells = " ".join(f"{duel[f'{a}|{b}']:8.4f}" for b in names)
        print(f"{a:>8} {cells}")
    print(f"wrote {diag_path}")
    return 0


def cmd_cache_size(config: dict, args: argparse.Namespace) -> int:
    def bytes_of(gb_value, bytes_value, name):
        if bytes_value is not None:
            return int(bytes_value)
        if gb_value is not None:
            return int(gb_value * 2**30)
        raise CliError(f"either --{name}-gb or --{name}-bytes is required")

    budget = HardwareBudget(
        vram_bytes=bytes_of(args.vram_gb, args.vram_bytes, "vram"),
        nonexpert_bytes=bytes_of(args.nonexpert_gb, args.nonexpert_bytes, "nonexpert"),
        all_experts_bytes=bytes_of(args.experts_gb, args.experts_bytes, "experts"),
        experts_per_layer=args.experts_per_layer,
    )
    size = cache_size_calc(budget)
    print(f"cache size: {size} experts per layer")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its fields")
    common.add_argument("--seed", type=int, help="override workload and training seeds")
    common.add_argument(
        "--out-dir", help=f"output directory (default: ${OUT_DIR_ENV} or '.')"
    )
    common.add_argument("--jobs", type=int, default=1, help="parallel sweep/training jobs")

    parser = argparse.ArgumentParser(
        prog="moecache",
        description="Trace-driven simulation lab for per-layer expert caching "
        "in MoE inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", parents=[common], help="generate a synthetic trace")
    p.add_argument("--out", help="trace output path (default: OUT_DIR/trace.jsonl)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("validate-trace", parents=[common], help="validate a trace file")
    p.add_argument("trace_file")
    p.set_defaults(func=cmd_validate_trace)

    p = sub.add_parser(
        "train", parents=[common], help="train per-layer eviction nets on a trace"
    )
    p.add_argument("--trace", help="trace file (overrides config)")
    p.add_argument("--checkpoints", help="checkpoint directory (default: OUT_DIR/checkpoints)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="sweep policies x capacities")
    p.add_argument("--trace", help="trace file (overrides config)")
    p.add_argument("--checkpoints", help="checkpoint directory for the ml policy")
    p.add_argument("--policies", nargs="+", help="policy names (overrides config)")
    p.add_argument("--capacities", nargs="+", type=int, help="capacities (overrides config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "diagnose", parents=[common], help="refetch rates, duel matrix, eviction timelines"
    )
    p.add_argument("--trace", help="trace file (overrides config)")
    p.add_argument("--checkpoints", help="checkpoint directory for the ml policy")
    p.add_argument("--policies", nargs="+", help="policy names (overrides config)")
    p.add_argument("--capacity", type=int, help="cache capacity (default: first configured)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser(
        "cache-size",
        parents=[common],
        help="experts-per-layer cache size a VRAM budget affords",
        description=(
            "Computes floor((vram - nonexpert) * experts_per_layer / all_experts), "
            "clamped to [0, experts_per_layer]. 'experts' is the total storage of "
            "the full expert pool across all layers; the headroom is assumed to be "
            "spread uniformly over layers, so the result is the per-layer resident "
            "expert count the budget affords."
        ),
    )
    p.add_argument("--vram-gb", type=float)
    p.add_argument("--vram-bytes", type=int)
    p.add_argument("--nonexpert-gb", type=float)
    p.add_argument("--nonexpert-bytes", type=int)
    p.add_argument("--experts-gb", type=float, help="total bytes of all expert weights")
    p.add_argument("--experts-bytes", type=int)
    p.add_argument("--experts-per-layer", type=int, required=True)
    p.set_defaults(func=cmd_cache_size)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(getattr(args, "config", None))
        config = _apply_flags(config, args)
        return args.func(config, args)
    except (CliError, InvalidConfigError, SimulationError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
