"""Expert-routing trace data model, file format, and synthetic workload generator.

A trace records which experts a gating network selected, per token and per
layer, over a set of independent inference sequences. Traces are the single
input every simulation consumes; they come either from the synthetic
generator here or from an external extractor that emits the same file format.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np


class TraceError(Exception):
    """Base class for trace-related failures."""


class InvalidConfigError(TraceError, ValueError):
    """A header or workload config field is out of its legal range."""


class TraceParseError(TraceError):
    """A trace file is malformed; carries the offending 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class HeaderMismatchError(TraceParseError):
    """An event references a layer or expert outside the header's bounds."""


class InsufficientTokensError(TraceError, ValueError):
    """A sequence has fewer prefill tokens than a coverage query requires."""


class Phase(IntEnum):
    """Inference phase. Integer values define the serialization and sort order."""

    PREFILL = 0
    DECODE = 1


@dataclass(frozen=True)
class TraceHeader:
    model_name: str
    num_layers: int
    num_experts: int
    top_k: int

    def validate(self) -> None:
        if self.num_layers < 1:
            raise InvalidConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 1:
            raise InvalidConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise InvalidConfigError(
                f"top_k must satisfy 1 <= top_k <= num_experts, got top_k={self.top_k} "
                f"with num_experts={self.num_experts}"
            )


@dataclass(frozen=True)
class AccessEvent:
    seq_id: int
    phase: Phase
    step: int
    layer: int
    experts: tuple[int, ...]

    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.seq_id, int(self.phase), self.step, self.layer)

    def validate(self, header: TraceHeader) -> None:
        if self.seq_id < 0:
            raise InvalidConfigError(f"seq_id must be >= 0, got {self.seq_id}")
        if self.step < 0:
            raise InvalidConfigError(f"step must be >= 0, got {self.step}")
        if not 0 <= self.layer < header.num_layers:
            raise InvalidConfigError(
                f"layer {self.layer} out of range [0, {header.num_layers})"
            )
        if len(set(self.experts)) != len(self.experts):
            raise InvalidConfigError(f"experts contain duplicates: {list(self.experts)}")
        for e in self.experts:
            if not 0 <= e < header.num_experts:
                raise InvalidConfigError(
                    f"expert {e} out of range [0, {header.num_experts})"
                )
        if self.phase == Phase.DECODE:
            if len(self.experts) != header.top_k:
                raise InvalidConfigError(
                    f"decode event must route exactly top_k={header.top_k} experts, "
                    f"got {len(self.experts)}"
                )
        else:
            if not 1 <= len(self.experts) <= header.num_experts:
                raise InvalidConfigError(
                    f"prefill event must route between 1 and {header.num_experts} "
                    f"experts, got {len(self.experts)}"
                )


@dataclass(frozen=True)
class RoutingTrace:
    header: TraceHeader
    events: tuple[AccessEvent, ...]

    def validate(self) -> None:
        self.header.validate()
        prev_key = None
        decode_layers: dict[tuple[int, int], set[int]] = {}
        for ev in self.events:
            ev.validate(self.header)
            key = ev.sort_key()
            if prev_key is not None and key <= prev_key:
                raise InvalidConfigError(
                    f"events out of order at {key}; must be strictly increasing "
                    "by (seq_id, phase, step, layer)"
                )
            prev_key = key
            if ev.phase == Phase.DECODE:
                decode_layers.setdefault((ev.seq_id, ev.step), set()).add(ev.layer)
        full = set(range(self.header.num_layers))
        for (seq_id, step), layers in decode_layers.items():
            if layers != full:
                missing = sorted(full - layers)
                raise InvalidConfigError(
                    f"decode step (seq {seq_id}, step {step}) missing events for "
                    f"layers {missing}"
                )

    def num_decode_steps(self) -> int:
        """Total decode token steps across all sequences."""
        return len({(ev.seq_id, ev.step) for ev in self.events if ev.phase == Phase.DECODE})

    def seq_ids(self) -> list[int]:
        return sorted({ev.seq_id for ev in self.events})


@dataclass(frozen=True)
class SyntheticWorkloadConfig:
    """Workload knobs for the synthetic generator.

    popularity_seed pins the per-layer assignment of Zipf ranks to expert
    ids independently of rng_seed, the way a fixed model keeps the same hot
    experts across prompts: traces sharing a popularity_seed form one
    workload family, while rng_seed varies the routing draws. When None, the
    assignment derives from rng_seed itself.
    """

    num_seqs: int = 1
    decode_steps: int = 256
    prefill_tokens: int = 32
    zipf_s: float = 1.0
    recency_boost: float = 0.0
    w_hot: int = 4
    rng_seed: int = 0
    popularity_seed: int | None = None

    def validate(self) -> None:
        if self.num_seqs < 1:
            raise InvalidConfigError(f"num_seqs must be >= 1, got {self.num_seqs}")
        if self.decode_steps < 0:
            raise InvalidConfigError(f"decode_steps must be >= 0, got {self.decode_steps}")
        if self.prefill_tokens < 0:
            raise InvalidConfigError(
                f"prefill_tokens must be >= 0, got {self.prefill_tokens}"
            )
        if self.zipf_s < 0:
            raise InvalidConfigError(f"zipf_s must be >= 0, got {self.zipf_s}")
        if not 0.0 <= self.recency_boost <= 1.0:
            raise InvalidConfigError(
                f"recency_boost must lie in [0, 1], got {self.recency_boost}"
            )
        if self.w_hot < 1:
            raise InvalidConfigError(f"w_hot must be >= 1, got {self.w_hot}")


def _layer_popularity(header: TraceHeader, cfg: SyntheticWorkloadConfig) -> np.ndarray:
    """Per-layer expert sampling probabilities, shape (L, E).

    Rank r gets Zipf mass (r+1)^-s; ranks are assigned to expert ids through a
    seeded permutation drawn independently per layer, so the popular experts
    differ across layers.
    """
    seed = cfg.rng_seed if cfg.popularity_seed is None else cfg.popularity_seed
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0])
    ranks = np.arange(1, header.num_experts + 1, dtype=np.float64)
    mass = ranks ** (-cfg.zipf_s)
    mass /= mass.sum()
    probs = np.empty((header.num_layers, header.num_experts))
    for layer in range(header.num_layers):
        perm = rng.permutation(header.num_experts)
        probs[layer, perm] = mass
    return probs


def expert_popularity(header: TraceHeader, cfg: SyntheticWorkloadConfig, layer: int) -> np.ndarray:
    """The stationary per-expert routing probabilities the generator samples from."""
    header.validate()
    cfg.validate()
    return _layer_popularity(header, cfg)[layer]


def _draw_routed(
    rng: np.random.Generator,
    popularity: np.ndarray,
    hot: set[int],
    k: int,
    boost: float,
) -> tuple[int, ...]:
    """Draw k distinct experts from the popularity/hot-set mixture.

    Each slot samples from (1-boost)*popularity + boost*uniform(hot), with
    already-chosen experts zeroed out and the mass renormalized. An empty hot
    set degenerates to the pure popularity distribution.
    """
    num_experts = popularity.shape[0]
    chosen: list[int] = []
    for _ in range(k):
        p = popularity.copy()
        if hot and boost > 0.0:
            hot_mask = np.zeros(num_experts)
            hot_mask[sorted(hot)] = 1.0 / len(hot)
            p = (1.0 - boost) * p + boost * hot_mask
        if chosen:
            p[chosen] = 0.0
        total = p.sum()
        if total <= 0.0:
            # popularity mass exhausted (k == num_experts tail); fall back to uniform
            p = np.ones(num_experts)
            p[chosen] = 0.0
            total = p.sum()
        p /= total
        chosen.append(int(rng.choice(num_experts, p=p)))
    return tuple(chosen)


def generate_trace(header: TraceHeader, cfg: SyntheticWorkloadConfig) -> RoutingTrace:
    """Generate a synthetic routing trace.

    Decode events draw top_k experts per (step, layer) without replacement
    from a mixture of a per-layer Zipf popularity distribution and, with
    probability ``recency_boost``, the experts routed in that layer within the
    last ``w_hot`` steps of the same sequence. Prefill tokens are stored
    token-by-token (phase=prefill, step=token index) and drawn from the same
    mixture; the simulator applies load-once union semantics at replay time.

    Deterministic: identical (header, cfg) always produce the identical trace.
    """
    header.validate()
    cfg.validate()
    popularity = _layer_popularity(header, cfg)
    # separate stream from the permutation draws in _layer_popularity
    rng = np.random.default_rng([cfg.rng_seed & 0xFFFFFFFFFFFFFFFF, 1])

    events: list[AccessEvent] = []
    for seq_id in range(cfg.num_seqs):
        recent: list[list[set[int]]] = [[] for _ in range(header.num_layers)]

        def step_layer(phase: Phase, step: int, layer: int) -> None:
            hot: set[int] = set()
            for routed in recent[layer][-cfg.w_hot:]:
                hot |= routed
            experts = _draw_routed(
                rng, popularity[layer], hot, header.top_k, cfg.recency_boost
            )
            events.append(AccessEvent(seq_id, phase, step, layer, experts))
            recent[layer].append(set(experts))

        for t in range(cfg.prefill_tokens):
            for layer in range(header.num_layers):
                step_layer(Phase.PREFILL, t, layer)
        for t in range(cfg.decode_steps):
            for layer in range(header.num_layers):
                step_layer(Phase.DECODE, t, layer)

    trace = RoutingTrace(header, tuple(events))
    trace.validate()
    return trace


# --- file format -----------------------------------------------------------
#
# Line-delimited UTF-8 JSON. Line 1 is the header record; every further line
# is one event record. Field names are normative; unknown fields are rejected.

_HEADER_FIELDS = ("model_name", "num_layers", "num_experts", "top_k")
_EVENT_FIELDS = ("seq_id", "phase", "step", "layer", "experts")


def _dump_header(header: TraceHeader) -> str:
    return json.dumps(
        {
            "model_name": header.model_name,
            "num_layers": header.num_layers,
            "num_experts": header.num_experts,
            "top_k": header.top_k,
        },
        separators=(",", ":"),
    )


def _dump_event(ev: AccessEvent) -> str:
    return json.dumps(
        {
            "seq_id": ev.seq_id,
            "phase": int(ev.phase),
            "step": ev.step,
            "layer": ev.layer,
            "experts": list(ev.experts),
        },
        separators=(",", ":"),
    )


def trace_to_text(trace: RoutingTrace) -> str:
    lines = [_dump_header(trace.header)]
    lines.extend(_dump_event(ev) for ev in trace.events)
    return "\n".join(lines) + "\n"


def write_trace(trace: RoutingTrace, path) -> None:
    trace.validate()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(trace_to_text(trace))


def _parse_record(line_no: int, line: str, fields: tuple[str, ...], kind: str) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceParseError(line_no, f"invalid JSON in {kind} record: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise TraceParseError(line_no, f"{kind} record must be a JSON object")
    unknown = set(record) - set(fields)
    if unknown:
        raise TraceParseError(line_no, f"unknown fields {sorted(unknown)} in {kind} record")
    missing = set(fields) - set(record)
    if missing:
        raise TraceParseError(line_no, f"missing fields {sorted(missing)} in {kind} record")
    return record


def _require_int(line_no: int, record: dict, field: str) -> int:
    value = record[field]
    if not isinstance(value, int) or isinstance(value, bool):
        raise TraceParseError(line_no, f"field '{field}' must be an integer, got {value!r}")
    return value


def parse_trace(text: str) -> RoutingTrace:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise TraceParseError(1, "missing header record")

    record = _parse_record(1, lines[0], _HEADER_FIELDS, "header")
    if not isinstance(record["model_name"], str):
        raise TraceParseError(1, "field 'model_name' must be a string")
    header = TraceHeader(
        record["model_name"],
        _require_int(1, record, "num_layers"),
        _require_int(1, record, "num_experts"),
        _require_int(1, record, "top_k"),
    )
    try:
        header.validate()
    except InvalidConfigError as exc:
        raise TraceParseError(1, str(exc)) from exc

    events: list[AccessEvent] = []
    prev_key = None
    decode_layers: dict[tuple[int, int], set[int]] = {}
    first_line: dict[tuple[int, int], int] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise TraceParseError(line_no, "blank line inside trace")
        record = _parse_record(line_no, line, _EVENT_FIELDS, "event")
        phase_value = _require_int(line_no, record, "phase")
        if phase_value not in (0, 1):
            raise TraceParseError(line_no, f"phase must be 0 (prefill) or 1 (decode), got {phase_value}")
        experts = record["experts"]
        if not isinstance(experts, list) or any(
            not isinstance(e, int) or isinstance(e, bool) for e in experts
        ):
            raise TraceParseError(line_no, "field 'experts' must be a list of integers")
        ev = AccessEvent(
            _require_int(line_no, record, "seq_id"),
            Phase(phase_value),
            _require_int(line_no, record, "step"),
            _require_int(line_no, record, "layer"),
            tuple(experts),
        )
        try:
            ev.validate(header)
        except InvalidConfigError as exc:
            if ev.layer >= header.num_layers or any(
                e >= header.num_experts or e < 0 for e in ev.experts
            ):
                raise HeaderMismatchError(line_no, str(exc)) from exc
            raise TraceParseError(line_no, str(exc)) from exc
        key = ev.sort_key()
        if prev_key is not None and key <= prev_key:
            raise TraceParseError(
                line_no,
                "events out of order; must be strictly increasing by "
                "(seq_id, phase, step, layer)",
            )
        prev_key = key
        if ev.phase == Phase.DECODE:
            token = (ev.seq_id, ev.step)
            decode_layers.setdefault(token, set()).add(ev.layer)
            first_line.setdefault(token, line_no)
        events.append(ev)

    full = set(range(header.num_layers))
    for token, layers in decode_layers.items():
        if layers != full:
            missing = sorted(full - layers)
            raise TraceParseError(
                first_line[token],
                f"decode step (seq {token[0]}, step {token[1]}) missing events "
                f"for layers {missing}",
            )
    return RoutingTrace(header, tuple(events))


def read_trace(path) -> RoutingTrace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh.read())


# --- prefill coverage ------------------------------------------------------


def prefill_coverage(
    trace: RoutingTrace, token_counts: Sequence[int]
) -> list[tuple[int, float]]:
    """Fraction of the expert pool touched by the first n prefill tokens.

    For each n in ``token_counts`` (ascending), returns the mean over
    (sequence, layer) of |distinct experts routed in the first n prefill
    tokens| / num_experts. Requires per-token prefill events.
    """
    if list(token_counts) != sorted(token_counts) or any(n < 1 for n in token_counts):
        raise InvalidConfigError("token_counts must be ascending positive integers")
    groups: dict[tuple[int, int], list[AccessEvent]] = {}
    for ev in trace.events:
        if ev.phase == Phase.PREFILL:
            groups.setdefault((ev.seq_id, ev.layer), []).append(ev)
    if not groups:
        raise InsufficientTokensError("trace contains no prefill events")
    needed = max(token_counts)
    for (seq_id, layer), evs in groups.items():
        if len(evs) < needed:
            raise InsufficientTokensError(
                f"sequence {seq_id} layer {layer} has only {len(evs)} prefill "
                f"tokens, need {needed}"
            )
    results: list[tuple[int, float]] = []
    for n in token_counts:
        fractions = []
        for evs in groups.values():
            union: set[int] = set()
            for ev in evs[:n]:
                union.update(ev.experts)
            fractions.append(len(union) / trace.header.num_experts)
        results.append((n, float(np.mean(fractions))))
    return results
