"""Machine-readable output files and their parsers.

Every artifact the CLI emits is versioned JSON (or JSONL for timelines) and
round-trips through the loaders here. No timestamps or environment data are
ever written: identical inputs must produce byte-identical files.
"""
from __future__ import annotations

import json
from typing import Sequence

from .engine import SimReport

SCHEMA_VERSION = 1


class ReportFormatError(Exception):
    pass


def _check_version(doc: dict, kind: str) -> None:
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise ReportFormatError(
            f"{kind}: expected schema_version {SCHEMA_VERSION}, "
            f"got {doc.get('schema_version') if isinstance(doc, dict) else type(doc)}"
        )


def _write_json(doc: dict, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


def _read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# --- sweep report ------------------------------------------------------------


def write_report(reports: Sequence[SimReport], path) -> None:
    _write_json(
        {"schema_version": SCHEMA_VERSION, "rows": [r.to_dict() for r in reports]},
        path,
    )


def load_report(path) -> list[SimReport]:
    doc = _read_json(path)
    _check_version(doc, "report")
    return [SimReport.from_dict(row) for row in doc["rows"]]


def format_report_table(reports: Sequence[SimReport]) -> str:
    """Human-readable table, grouped by capacity, best hit rate first."""
    cols = [
        ("policy", "{}"),
        ("C", "{}"),
        ("hit_rate", "{:.4f}"),
        ("decode_hr", "{:.4f}"),
        ("warm_hr", "{:.4f}"),
        ("io", "{}"),
        ("refetch_w", "{:.4f}"),
        ("decode_ms", "{:.2f}"),
        ("tok/s", "{:.1f}"),
    ]
    lines = [" ".join(f"{name:>10}" for name, _ in cols)]
    for capacity in sorted({r.capacity for r in reports}):
        group = sorted(
            (r for r in reports if r.capacity == capacity),
            key=lambda r: (-r.hit_rate, r.policy),
        )
        for r in group:
            values = (
                r.policy,
                r.capacity,
                r.hit_rate,
                r.decode_hit_rate,
                r.hit_rate_excl_compulsory,
                r.io_count,
                r.refetch_within_w,
                r.est_decode_latency_s * 1e3,
                r.tokens_per_second_est,
            )
            lines.append(
                " ".join(f"{fmt.format(v):>10}" for (_, fmt), v in zip(cols, values))
            )
    return "\n".join(lines)


# --- plot-ready series --------------------------------------------------------


def write_hit_rate_series(reports: Sequence[SimReport], path, decode_only: bool = True) -> None:
    """Hit rate vs capacity, one series per policy."""
    series: dict[str, dict[str, list]] = {}
    for r in sorted(reports, key=lambda r: (r.policy, r.capacity)):
        entry = series.setdefault(r.policy, {"capacity": [], "hit_rate": []})
        entry["capacity"].append(r.capacity)
        entry["hit_rate"].append(r.decode_hit_rate if decode_only else r.hit_rate)
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "metric": "decode_hit_rate" if decode_only else "hit_rate",
            "series": series,
        },
        path,
    )


def write_throughput_series(reports: Sequence[SimReport], path) -> None:
    """Estimated tokens/s vs capacity, one series per policy."""
    series: dict[str, dict[str, list]] = {}
    for r in sorted(reports, key=lambda r: (r.policy, r.capacity)):
        entry = series.setdefault(r.policy, {"capacity": [], "tokens_per_second": []})
        entry["capacity"].append(r.capacity)
        entry["tokens_per_second"].append(r.tokens_per_second_est)
    _write_json(
        {"schema_version": SCHEMA_VERSION, "metric": "tokens_per_second_est", "series": series},
        path,
    )


def load_series(path) -> dict:
    doc = _read_json(path)
    _check_version(doc, "series")
    return doc


# --- diagnostics --------------------------------------------------------------


def write_diagnostics(refetch: dict[str, float], duel: dict[str, float], window: int, path) -> None:
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "window": window,
            "refetch_within_w": refetch,
            "duel_fraction_a_better": duel,
        },
        path,
    )


def load_diagnostics(path) -> dict:
    doc = _read_json(path)
    _check_version(doc, "diagnostics")
    return doc


# --- eviction timeline ----------------------------------------------------------
#
# JSONL for heatmap rendering: header line, then one row per replayed access
# and one per eviction, in layer/stream order.

_TIMELINE_KINDS = ("access", "eviction")


def write_timeline(schedules, evictions, policy: str, path) -> None:
    ev_by_layer: dict[int, list] = {}
    for rec in evictions:
        ev_by_layer.setdefault(rec.layer, []).append(rec)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(
            json.dumps(
                {"schema_version": SCHEMA_VERSION, "kind": "timeline", "policy": policy},
                separators=(",", ":"),
            )
            + "\n"
        )
        for layer, schedule in enumerate(schedules):
            pending = sorted(ev_by_layer.get(layer, []), key=lambda r: r.position)
            i = 0
            for step in schedule:
                pos = step.position0
                for expert in step.accesses:
                    fh.write(
                        json.dumps(
                            {
                                "kind": "access",
                                "layer": layer,
                                "step": step.tick,
                                "decode_index": step.decode_index,
                                "expert": expert,
                                "position": pos,
                            },
                            separators=(",", ":"),
                        )
                        + "\n"
                    )
                    while i < len(pending) and pending[i].position == pos:
                        rec = pending[i]
                        fh.write(
                            json.dumps(
                                {
                                    "kind": "eviction",
                                    "layer": layer,
                                    "step": rec.tick,
                                    "decode_index": rec.decode_index,
                                    "expert": rec.victim,
                                    "position": rec.position,
                                },
                                separators=(",", ":"),
                            )
                            + "\n"
                        )
                        i += 1
                    pos += 1


def load_timeline(path) -> tuple[dict, list[dict]]:
    """Parse and schema-validate a timeline file; returns (header, rows)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ReportFormatError("timeline: empty file")
    header = json.loads(lines[0])
    _check_version(header, "timeline")
    if header.get("kind") != "timeline":
        raise ReportFormatError("timeline: bad header kind")
    rows = []
    required = {"kind", "layer", "step", "decode_index", "expert", "position"}
    for i, line in enumerate(lines[1:], start=2):
        row = json.loads(line)
        if set(row) != required:
            raise ReportFormatError(f"timeline line {i}: fields {sorted(row)} != {sorted(required)}")
        if row["kind"] not in _TIMELINE_KINDS:
            raise ReportFormatError(f"timeline line {i}: unknown kind {row['kind']!r}")
        rows.append(row)
    return header, rows


# --- training log ---------------------------------------------------------------


def write_training_log(per_layer: dict[int, dict], path) -> None:
    _write_json(
        {
            "schema_version": SCHEMA_VERSION,
            "layers": {str(layer): log for layer, log in sorted(per_layer.items())},
        },
        path,
    )


def load_training_log(path) -> dict:
    doc = _read_json(path)
    _check_version(doc, "training log")
    return doc
