"""Classic libpcap writer for relayed TCP chunks.

Each relayed chunk becomes one frame: Ethernet II (14) + IPv4 (20, no
options) + TCP (20, no options) + payload, so captured length is always
payload + 54.  Header synthesis:

    Ethernet  client side 02:00:00:00:00:01, service side 02:00:00:00:00:02, type 0x0800
    IPv4      version 4, IHL 5, TOS 0, id = per-direction packet counter,
              DF set, TTL 64, protocol 6, real peer addresses, valid checksum
    TCP       real ports, flags PSH|ACK, window 65535, valid checksum;
              seq starts at a per-direction ISN derived from the connection
              id and advances by payload length; ack = the other direction's
              next expected sequence number

Segment boundaries follow relay chunk boundaries, not original wire
segmentation.  Chunks too large for one IPv4 datagram are split.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

PCAP_MAGIC = 0xA1B2C3D4
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535
HEADER_BYTES = 14 + 20 + 20
MAX_SEGMENT = 65535 - 40

CLIENT_MAC = bytes.fromhex("020000000001")
SERVICE_MAC = bytes.fromhex("020000000002")


class Direction(enum.Enum):
    TO_SERVICE = "to_service"
    TO_CLIENT = "to_client"


@dataclass(frozen=True)
class CaptureRecord:
    timestamp: float
    connection_id: int
    direction: Direction
    payload: bytes
    client_addr: tuple[str, int]
    service_addr: tuple[str, int]

    @property
    def service_port(self) -> int:
        return self.service_addr[1]


def checksum(data: bytes) -> int:
    """RFC 1071 ones-complement sum."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _ipv4(host: str) -> bytes:
    try:
        addr = ipaddress.ip_address(host)
    except ValueError:
        return bytes(4)
    if addr.version == 6:
        mapped = addr.ipv4_mapped
        if mapped is None:
            return bytes([127, 0, 0, 1]) if addr.is_loopback else bytes(4)
        addr = mapped
    return addr.packed


def isn_for(connection_id: int, direction: Direction) -> int:
    return zlib.crc32(f"{connection_id}:{direction.value}".encode()) & 0xFFFFFFFF


def build_frame(src: tuple[str, int], dst: tuple[str, int], src_mac: bytes, dst_mac: bytes,
                seq: int, ack: int, ip_id: int, payload: bytes, flags: int = 0x18) -> bytes:
    src_ip, dst_ip = _ipv4(src[0]), _ipv4(dst[0])
    total_len = 40 + len(payload)
    ip_hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total_len, ip_id & 0xFFFF, 0x4000, 64, 6, 0, src_ip, dst_ip)
    ip_hdr = ip_hdr[:10] + struct.pack("!H", checksum(ip_hdr)) + ip_hdr[12:]
    tcp_hdr = struct.pack("!HHIIBBHHH", src[1], dst[1], seq & 0xFFFFFFFF, ack & 0xFFFFFFFF, 5 << 4, flags, 65535, 0, 0)
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, 6, 20 + len(payload))
    tcp_sum = checksum(pseudo + tcp_hdr + payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack("!H", tcp_sum) + tcp_hdr[18:]
    return dst_mac + src_mac + b"\x08\x00" + ip_hdr + tcp_hdr + payload


@dataclass
class _Flow:
    next_seq: dict = field(default_factory=dict)
    packets: dict = field(default_factory=dict)


class PcapWriter:
    """Single-writer capture file.  Each packet goes out in one ``write``.

    On a write error the current file is abandoned and capture continues in
    ``<stem>.<n><suffix>``; an alarm event records the rotation.
    """

    def __init__(self, path, events=None, opener=open, max_bytes: int | None = None):
        self.base_path = Path(path)
        self.events = events
        self.opener = opener
        self.max_bytes = max_bytes
        self.paths: list[Path] = []
        self.packets_written = 0
        self.payload_bytes = {Direction.TO_SERVICE: 0, Direction.TO_CLIENT: 0}
        self._flows: dict[int, _Flow] = {}
        self._lock = threading.Lock()
        self._fh = None
        self._size = 0
        self._open(self.base_path)

    @property
    def path(self) -> Path:
        return self.paths[-1]

    def _open(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.opener(path, "wb")
        header = struct.pack("<IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)
        self._fh.write(header)
        self._fh.flush()
        self._size = len(header)
        self.paths.append(path)

    def _rotate(self, reason: str) -> None:
        old = self.paths[-1]
        try:
            self._fh.close()
        except OSError:
            pass
        n = len(self.paths)
        nxt = self.base_path.with_name(f"{self.base_path.stem}.{n}{self.base_path.suffix}")
        logger.error("capture rotated from %s to %s: %s", old, nxt, reason)
        if self.events is not None:
            self.events.emit("proxycap", "capture_rotated", severity="alarm",
                             previous=str(old), path=str(nxt), reason=reason)
        self._open(nxt)

    def _segments(self, record: CaptureRecord):
        flow = self._flows.setdefault(record.connection_id, _Flow())
        cid = record.connection_id
        for d in Direction:
            flow.next_seq.setdefault(d, isn_for(cid, d))
            flow.packets.setdefault(d, 0)
        if record.direction is Direction.TO_SERVICE:
            src, dst, smac, dmac = record.client_addr, record.service_addr, CLIENT_MAC, SERVICE_MAC
            other = Direction.TO_CLIENT
        else:
            src, dst, smac, dmac = record.service_addr, record.client_addr, SERVICE_MAC, CLIENT_MAC
            other = Direction.TO_SERVICE
        payload = record.payload
        for off in range(0, max(len(payload), 1), MAX_SEGMENT):
            chunk = payload[off:off + MAX_SEGMENT]
            seq = flow.next_seq[record.direction]
            frame = build_frame(src, dst, smac, dmac, seq, flow.next_seq[other],
                                flow.packets[record.direction], chunk)
            flow.next_seq[record.direction] = (seq + len(chunk)) & 0xFFFFFFFF
            flow.packets[record.direction] += 1
            yield frame

    def write(self, record: CaptureRecord) -> int:
        """Append ``record``; returns the number of packets written."""
        with self._lock:
            count = 0
            usec_total = int(round(record.timestamp * 1_000_000))
            sec, usec = divmod(usec_total, 1_000_000)
            for frame in self._segments(record):
                blob = struct.pack("<IIII", sec, usec, len(frame), len(frame)) + frame
                if self.max_bytes is not None and self._size + len(blob) > self.max_bytes:
                    self._rotate("size limit")
                try:
                    self._fh.write(blob)
                    self._fh.flush()
                except OSError as exc:
                    self._rotate(str(exc))
                    self._fh.write(blob)
                    self._fh.flush()
                self._size += len(blob)
                self.packets_written += 1
                count += 1
            self.payload_bytes[record.direction] += len(record.payload)
            return count

    def capture(self, connection_id, direction, payload, client_addr, service_addr, timestamp=None) -> CaptureRecord:
        record = CaptureRecord(time.time() if timestamp is None else timestamp, connection_id,
                               direction, bytes(payload), tuple(client_addr[:2]), tuple(service_addr[:2]))
        self.write(record)
        return record

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                try:
                    self._fh.flush()
                    self._fh.close()
                finally:
                    self._fh = None


def read_pcap(path) -> list[tuple[float, bytes]]:
    """Minimal reader for files produced here (used by the report)."""
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise ValueError("truncated pcap global header")
    magic = struct.unpack("<I", data[:4])[0]
    if magic != PCAP_MAGIC:
        raise ValueError(f"unexpected pcap magic 0x{magic:08X}")
    out = []
    off = 24
    while off + 16 <= len(data):
        sec, usec, incl, _orig = struct.unpack("<IIII", data[off:off + 16])
        off += 16
        if off + incl > len(data):
            raise ValueError("truncated pcap record")
        out.append((sec + usec / 1e6, data[off:off + incl]))
        off += incl
    if off != len(data):
        raise ValueError("trailing bytes after last pcap record")
    return out


def tcp_payload(frame: bytes) -> tuple[int, int, bytes]:
    """(src port, dst port, payload) of a frame built by `build_frame`."""
    ihl = (frame[14] & 0x0F) * 4
    tcp = frame[14 + ihl:]
    sport, dport = struct.unpack("!HH", tcp[:4])
    doff = (tcp[12] >> 4) * 4
    total = struct.unpack("!H", frame[16:18])[0]
    return sport, dport, tcp[doff:total - ihl]
