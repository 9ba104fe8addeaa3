"""Trace records and the summary metrics folded from them.

A trace is one record per line::

    <time_ms> <kind> <vehicle_id> key=value key=value ...

Values never contain spaces. The summary is computed from records alone, so
re-reading a trace file reproduces the summary printed by the run.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

KINDS = ("bsm_tx", "rx", "drop", "state_transition", "advisory", "crossing", "tick")
CONFLICT_GAP_S = 1.0


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class TraceRecord:
    time_ms: int
    kind: str
    vehicle_id: int
    detail: Tuple[Tuple[str, str], ...] = ()

    def get(self, key: str, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default

    def to_line(self) -> str:
        parts = [str(self.time_ms), self.kind, str(self.vehicle_id)]
        parts.extend(f"{k}={v}" for k, v in self.detail)
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str, lineno: int = 0) -> "TraceRecord":
        parts = line.split()
        if len(parts) < 3:
            raise TraceFormatError(lineno, f"expected 'time kind vehicle ...', got {line!r}")
        try:
            t = int(parts[0])
            vid = int(parts[2])
        except ValueError:
            raise TraceFormatError(lineno, f"bad time or vehicle id in {line!r}") from None
        if parts[1] not in KINDS:
            raise TraceFormatError(lineno, f"unknown record kind {parts[1]!r}")
        detail = []
        for p in parts[3:]:
            k, sep, v = p.partition("=")
            if not sep or not k:
                raise TraceFormatError(lineno, f"malformed field {p!r}")
            detail.append((k, v))
        return cls(t, parts[1], vid, tuple(detail))


def record(time_ms: int, kind: str, vehicle_id: int, **detail) -> TraceRecord:
    return TraceRecord(int(time_ms), kind, int(vehicle_id),
                       tuple((k, str(v)) for k, v in detail.items()))


class Trace:
    """Append-only record list that keeps time order.

    Records that describe a moment later than the current processing time
    (merge crossings interpolated inside a tick) are deferred and released
    once the trace reaches their timestamp.
    """

    def __init__(self):
        self.records: List[TraceRecord] = []
        self._deferred = []
        self._n = 0

    def add(self, rec: TraceRecord):
        self._release(rec.time_ms)
        self.records.append(rec)

    def defer(self, rec: TraceRecord):
        heapq.heappush(self._deferred, (rec.time_ms, self._n, rec))
        self._n += 1

    def _release(self, until_ms: int):
        while self._deferred and self._deferred[0][0] <= until_ms:
            self.records.append(heapq.heappop(self._deferred)[-1])

    def flush(self):
        self._release(float("inf"))

    def text(self) -> str:
        return "".join(r.to_line() + "\n" for r in self.records)

    def write(self, path):
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.text())


def parse_trace(text: str) -> List[TraceRecord]:
    return [TraceRecord.from_line(line, n)
            for n, line in enumerate(text.splitlines(), start=1) if line.strip()]


def read_trace(path) -> List[TraceRecord]:
    with open(path, encoding="ascii") as fh:
        return parse_trace(fh.read())


@dataclass
class SummaryReport:
    protocol_completed: bool = False
    completion_latency_ms: Optional[int] = None
    messages_by_type: Dict[str, int] = field(default_factory=dict)
    received_by_type: Dict[str, int] = field(default_factory=dict)
    dropped: int = 0
    crossings: int = 0
    min_merge_gap_s: Optional[float] = None
    conflict: bool = False
    committed_vehicles: Tuple[int, ...] = ()
    advisories: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        def fmt_counts(d):
            return ",".join(f"{k}={d[k]}" for k in sorted(d)) or "-"

        lat = "-" if self.completion_latency_ms is None else str(self.completion_latency_ms)
        gap = "-" if self.min_merge_gap_s is None else f"{self.min_merge_gap_s:.6f}"
        lines = [
            f"protocol_completed: {str(self.protocol_completed).lower()}",
            f"completion_latency_ms: {lat}",
            f"messages_by_type: {fmt_counts(self.messages_by_type)}",
            f"received_by_type: {fmt_counts(self.received_by_type)}",
            f"dropped: {self.dropped}",
            f"crossings: {self.crossings}",
            f"min_merge_gap_s: {gap}",
            f"conflict: {str(self.conflict).lower()}",
            f"committed_vehicles: {','.join(map(str, self.committed_vehicles)) or '-'}",
            f"advisories: {';'.join(self.advisories) or '-'}",
        ]
        return "\n".join(lines) + "\n"


def metrics(records: Iterable[TraceRecord]) -> SummaryReport:
    """Fold trace records into a :class:`SummaryReport`."""
    rep = SummaryReport()
    notify_at: Dict[int, int] = {}
    crossing_times = []
    last_phase: Dict[Tuple[int, str], str] = {}
    for r in records:
        if r.kind == "bsm_tx":
            tag = r.get("tag")
            rep.messages_by_type[tag] = rep.messages_by_type.get(tag, 0) + 1
            if tag == "RAMP_ENTRY_NOTIFY":
                notify_at.setdefault(r.vehicle_id, r.time_ms)
            elif tag == "MERGE_CONFIRM" and not rep.protocol_completed:
                rep.protocol_completed = True
                if r.vehicle_id in notify_at:
                    rep.completion_latency_ms = r.time_ms - notify_at[r.vehicle_id]
        elif r.kind == "rx":
            tag = r.get("tag")
            rep.received_by_type[tag] = rep.received_by_type.get(tag, 0) + 1
        elif r.kind == "drop":
            rep.dropped += 1
        elif r.kind == "crossing":
            crossing_times.append(float(r.get("t_s")))
        elif r.kind == "state_transition":
            last_phase[(r.vehicle_id, r.get("machine"))] = r.get("to")
        elif r.kind == "advisory":
            rep.advisories.append(
                f"{r.vehicle_id}:{r.get('advice')}:{r.get('ref', '-')}:{r.get('slot_s')}")
    rep.crossings = len(crossing_times)
    crossing_times.sort()
    if len(crossing_times) >= 2:
        rep.min_merge_gap_s = min(b - a for a, b in zip(crossing_times, crossing_times[1:]))
        rep.conflict = rep.min_merge_gap_s < CONFLICT_GAP_S
    rep.committed_vehicles = tuple(sorted({vid for (vid, _), ph in last_phase.items()
                                           if ph == "Committed"}))
    return rep


def committed_plan_bytes(records: Iterable[TraceRecord]) -> Dict[int, bytes]:
    """Encoded plan per vehicle whose last commit is still in force."""
    plans: Dict[Tuple[int, str], Optional[bytes]] = {}
    for r in records:
        if r.kind == "state_transition":
            key = (r.vehicle_id, r.get("machine"))
            plans[key] = bytes.fromhex(r.get("plan")) if r.get("to") == "Committed" else None
    return {vid: p for (vid, _), p in sorted(plans.items()) if p is not None}
