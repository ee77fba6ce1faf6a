"""Structured event log: one JSON object per line, ISO-8601 timestamps.

Every module gets the same sink and calls ``emit(source, kind, ...)``.  Lines
are written in emission order; timestamps are forced monotone per source so
clock steps never reorder a module's history.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

SEVERITIES = ("debug", "info", "warning", "error", "alarm")


@dataclass(frozen=True)
class EventRecord:
    timestamp: float
    source: str
    severity: str
    kind: str
    attrs: dict = field(default_factory=dict)
    seq: int = 0
    sim_time: float | None = None

    def to_json(self) -> str:
        doc = {
            "ts": datetime.fromtimestamp(self.timestamp, tz=timezone.utc).isoformat(timespec="microseconds"),
            "seq": self.seq,
            "source": self.source,
            "severity": self.severity,
            "kind": self.kind,
            "attrs": self.attrs,
        }
        if self.sim_time is not None:
            doc["sim_time"] = round(self.sim_time, 6)
        return json.dumps(doc, default=_jsonable, sort_keys=False)


def _jsonable(value):
    if isinstance(value, (bytes, bytearray)):
        return value.hex()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    return str(value)


def parse_line(line: str) -> dict:
    return json.loads(line)


def read_events(path) -> list[dict]:
    """Load an event log; unparseable lines are skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                logger.warning("skipping corrupt event line in %s", path)
    return out


class EventLog:
    """Append-only event sink.

    If the file cannot be written, lines are held in a bounded buffer and
    retried on the next emit; overflow increments ``dropped``.
    """

    def __init__(self, path=None, clock=time.time, sim_clock=None, max_buffer: int = 10000,
                 keep: bool = True):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self.sim_clock = sim_clock
        self.max_buffer = max_buffer
        self.keep = keep
        self.records: list[EventRecord] = []
        self.kind_counts: Counter = Counter()
        self.dropped = 0
        self._pending: deque[str] = deque()
        self._last_ts: dict[str, float] = {}
        self._seq = 0
        self._lock = threading.Lock()
        self._fh = None
        self._subscribers = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def subscribe(self, callback) -> None:
        self._subscribers.append(callback)

    def emit(self, source: str, kind: str, /, severity: str = "info", **attrs) -> EventRecord:
        if severity not in SEVERITIES:
            severity = "info"
        with self._lock:
            now = self.clock()
            ts = max(now, self._last_ts.get(source, now))
            self._last_ts[source] = ts
            self._seq += 1
            sim_time = self.sim_clock() if self.sim_clock is not None else None
            record = EventRecord(ts, source, severity, kind, attrs, self._seq, sim_time)
            if self.keep:
                self.records.append(record)
            self.kind_counts[kind] += 1
            if self._fh is not None:
                self._pending.append(record.to_json())
                while len(self._pending) > self.max_buffer:
                    self._pending.popleft()
                    self.dropped += 1
                self._drain()
        for callback in self._subscribers:
            callback(record)
        return record

    def _drain(self) -> None:
        try:
            while self._pending:
                self._fh.write(self._pending[0] + "\n")
                self._pending.popleft()
            # flushed per line: the one-second latency bound holds trivially
            self._fh.flush()
        except (OSError, ValueError) as exc:
            logger.error("event sink write failed: %s", exc)

    def of_kind(self, kind: str) -> list[EventRecord]:
        return [r for r in self.records if r.kind == kind]

    def flush(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._drain()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._drain()
                self._fh.close()
                self._fh = None
