"""Offline summary of a run directory (events.log, capture*.pcap, trace.csv)."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from ..controller import FsmState
from ..plant import FaultFlags
from ..proxycap.pcap import read_pcap

logger = logging.getLogger(__name__)


@dataclass
class Report:
    run_dir: str
    seed: int | None = None
    kinds: Counter = field(default_factory=Counter)
    connections: Counter = field(default_factory=Counter)
    modbus_ops: Counter = field(default_factory=Counter)  # fc -> count (accepted reads + writes)
    modbus_writes: Counter = field(default_factory=Counter)
    modbus_exceptions: Counter = field(default_factory=Counter)
    s7_probes: Counter = field(default_factory=Counter)
    web_actions: Counter = field(default_factory=Counter)
    web_rejected: int = 0
    faults: list = field(default_factory=list)
    dwell: dict = field(default_factory=dict)  # state label -> simulated seconds
    state_sequence: list = field(default_factory=list)
    packets: int = 0
    payload_bytes: int = 0
    warnings: list = field(default_factory=list)

    @property
    def total_events(self) -> int:
        return sum(self.kinds.values())

    def render(self) -> str:
        lines = [f"run directory: {self.run_dir}", f"seed: {self.seed if self.seed is not None else 'unknown'}", ""]

        def block(title, counter, key_fmt=str):
            lines.append(title)
            if not counter:
                lines.append("  (none)")
            for key in sorted(counter, key=lambda k: (str(type(k)), k)):
                lines.append(f"  {key_fmt(key):<28} {counter[key]}")
            lines.append("")

        block("connections by service:", self.connections)
        block("modbus operations by function code:", self.modbus_ops, lambda fc: f"FC{fc}")
        block("modbus writes by function code:", self.modbus_writes, lambda fc: f"FC{fc}")
        block("modbus exceptions by function code:", self.modbus_exceptions, lambda fc: f"FC{fc}")
        block("s7 probes:", self.s7_probes)
        block("web actions:", self.web_actions)
        lines.append(f"web actions rejected: {self.web_rejected}")
        lines.append("")
        lines.append("faults triggered: " + (", ".join(self.faults) if self.faults else "none"))
        lines.append("")
        lines.append("state dwell times (simulated s):")
        for label in (s.label for s in FsmState):
            lines.append(f"  {label:<28} {self.dwell.get(label, 0.0):.2f}")
        lines.append("state sequence: " + (" -> ".join(self.state_sequence) or "(no trace)"))
        lines.append("")
        lines.append(f"captured packets: {self.packets} ({self.payload_bytes} payload bytes)")
        lines.append("")
        block("events by kind:", self.kinds)
        lines.append(f"total events: {self.total_events}")
        if self.warnings:
            lines.append("")
            lines.append("warnings:")
            lines.extend(f"  {w}" for w in self.warnings)
        return "\n".join(lines) + "\n"


def _tally_events(rep: Report, path: Path) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                ev = json.loads(line)
                kind, attrs = ev["kind"], ev.get("attrs", {})
            except (json.JSONDecodeError, KeyError, TypeError):
                rep.warnings.append(f"events.log:{lineno}: unreadable record")
                continue
            rep.kinds[kind] += 1
            if kind == "run_start":
                rep.seed = attrs.get("seed")
            elif kind == "conn_open":
                rep.connections[attrs.get("service", "?")] += 1
            elif kind in ("modbus_read", "modbus_write"):
                rep.modbus_ops[attrs.get("fc")] += 1
                if kind == "modbus_write":
                    rep.modbus_writes[attrs.get("fc")] += 1
            elif kind == "modbus_exception":
                rep.modbus_exceptions[attrs.get("fc")] += 1
            elif kind == "s7_connect":
                rep.s7_probes["connect"] += 1
            elif kind == "s7_request":
                rep.s7_probes[attrs.get("request", "?")] += 1
            elif kind == "web_action":
                rep.web_actions[attrs.get("action", "?")] += 1
                if not attrs.get("accepted", False):
                    rep.web_rejected += 1
            elif kind == "plant_fault":
                rep.faults.extend(attrs.get("faults", []))


def _tally_trace(rep: Report, path: Path) -> None:
    dwell = defaultdict(float)
    prev_t = 0.0
    last_state = None
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                t = float(row["sim_time"])
                label = FsmState(int(row["fsm_state"])).label
            except (KeyError, ValueError, TypeError):
                rep.warnings.append("trace.csv: unreadable row")
                continue
            dwell[label] += t - prev_t
            prev_t = t
            if label != last_state:
                rep.state_sequence.append(label)
                last_state = label
            faults = int(row.get("faults") or 0)
            for name in FaultFlags.from_bitfield(faults).names():
                if name not in rep.faults:
                    rep.faults.append(name)
    rep.dwell = {k: round(v, 6) for k, v in dwell.items()}


def build_report(run_dir) -> Report:
    run_dir = Path(run_dir)
    rep = Report(str(run_dir))
    events = run_dir / "events.log"
    if events.is_file():
        try:
            _tally_events(rep, events)
        except OSError as exc:
            rep.warnings.append(f"events.log unreadable: {exc}")
    else:
        rep.warnings.append("events.log missing")
    trace = run_dir / "trace.csv"
    if trace.is_file():
        try:
            _tally_trace(rep, trace)
        except OSError as exc:
            rep.warnings.append(f"trace.csv unreadable: {exc}")
    else:
        rep.warnings.append("trace.csv missing")
    captures = sorted(run_dir.glob("capture*.pcap"))
    if not captures:
        rep.warnings.append("no capture file")
    for cap in captures:
        try:
            for _ts, frame in read_pcap(cap):
                rep.packets += 1
                rep.payload_bytes += len(frame) - 54
        except (OSError, ValueError) as exc:
            rep.warnings.append(f"{cap.name}: {exc}")
    return rep
