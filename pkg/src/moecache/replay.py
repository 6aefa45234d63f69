"""Canonical replay interpretation of a routing trace.

Per-layer caches are independent, so a trace unrolls into one event stream
per layer. Decode events access every routed expert in stored order. Prefill
events follow load-once semantics: within one (sequence, layer) prefill an
expert is accessed only at its first occurrence across the stored per-token
events, and later occurrences are skipped outright (the batched computation
already happened; nothing is re-loaded). Both the simulator and the Belady
oracle must see exactly the same access positions, so the derivation lives
here and nowhere else.
"""
from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

from .policies import OracleIndex
from .trace import Phase, RoutingTrace


@dataclass(frozen=True)
class ReplayStep:
    """One event of a layer's stream, with replay bookkeeping attached.

    routed: experts stored in the event (feature updates see all of them).
    accesses: experts actually accessed (prefill drops repeats).
    position0: stream position of the first access in this event.
    tick: index of this event within the layer's event stream.
    decode_index: number of decode events completed in this layer before it.
    """

    seq_id: int
    phase: Phase
    step: int
    layer: int
    routed: tuple[int, ...]
    accesses: tuple[int, ...]
    new_sequence: bool
    position0: int
    tick: int
    decode_index: int


def layer_schedules(trace: RoutingTrace) -> list[list[ReplayStep]]:
    """Split a trace into per-layer replay schedules (index = layer)."""
    num_layers = trace.header.num_layers
    schedules: list[list[ReplayStep]] = [[] for _ in range(num_layers)]
    position = [0] * num_layers
    decode_count = [0] * num_layers
    last_seq: list[int | None] = [None] * num_layers
    prefill_seen: list[set[int]] = [set() for _ in range(num_layers)]

    for ev in trace.events:
        layer = ev.layer
        new_seq = last_seq[layer] != ev.seq_id
        if new_seq:
            last_seq[layer] = ev.seq_id
            prefill_seen[layer] = set()
        if ev.phase == Phase.PREFILL:
            seen = prefill_seen[layer]
            accesses = tuple(e for e in ev.experts if e not in seen)
            seen.update(ev.experts)
        else:
            accesses = ev.experts
        step = ReplayStep(
            seq_id=ev.seq_id,
            phase=ev.phase,
            step=ev.step,
            layer=layer,
            routed=ev.experts,
            accesses=accesses,
            new_sequence=new_seq,
            position0=position[layer],
            tick=len(schedules[layer]),
            decode_index=decode_count[layer],
        )
        schedules[layer].append(step)
        position[layer] += len(accesses)
        if ev.phase == Phase.DECODE:
            decode_count[layer] += 1
    return schedules


def build_oracle_index(schedules: list[list[ReplayStep]]) -> OracleIndex:
    streams = {
        layer: [e for step in schedule for e in step.accesses]
        for layer, schedule in enumerate(schedules)
    }
    return OracleIndex.from_layer_streams(streams)


class StepNextUse:
    """Next-routing distances in event-stream steps, for training targets."""

    def __init__(self, schedule: list[ReplayStep]):
        self._ticks: dict[int, list[int]] = {}
        for step in schedule:
            for e in step.routed:
                self._ticks.setdefault(e, []).append(step.tick)

    def distance(self, expert: int, tick: int) -> float:
        """Steps until the expert is next routed strictly after ``tick``."""
        ticks = self._ticks.get(expert)
        if not ticks:
            return float("inf")
        i = bisect_right(ticks, tick)
        if i == len(ticks):
            return float("inf")
        return float(ticks[i] - tick)
