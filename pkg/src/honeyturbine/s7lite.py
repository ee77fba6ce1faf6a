"""Read-only S7 service over ISO-on-TCP (TPKT + COTP class 0).

Supported S7 traffic:

* Setup communication (job 0xF0): PDU length fixed at 240, AmQ counts
  echoed but capped at 3.
* SZL reads (userdata, CPU functions group): 0x0011 module identification
  and 0x001C component identification, either one record or all records.
* Read Var (job 0x04) on DB1, which mirrors the 16 holding registers as 32
  big-endian bytes.

Everything else is answered with an S7 error (class 0x81, code 0x04,
"function not available") and logged.  Nothing here writes controller
memory.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import re
import struct
from dataclasses import dataclass

from .controller import ProcessImage

logger = logging.getLogger(__name__)

TPKT_VERSION = 3
TPKT_HEADER = 4

COTP_CR = 0xE0
COTP_CC = 0xD0
COTP_DT = 0xF0
COTP_DR = 0x80
COTP_PARAM_TPDU_SIZE = 0xC0
COTP_PARAM_SRC_TSAP = 0xC1
COTP_PARAM_DST_TSAP = 0xC2
MAX_TPDU_CODE = 0x0A  # 1024 bytes

S7_PROTOCOL_ID = 0x32
ROSCTR_JOB = 0x01
ROSCTR_ACK = 0x02
ROSCTR_ACK_DATA = 0x03
ROSCTR_USERDATA = 0x07

FN_SETUP_COMM = 0xF0
FN_READ_VAR = 0x04

PDU_LENGTH = 240
MAX_AMQ = 3
DB_HOLDING = 1
AREA_DB = 0x84

ERR_CLASS_APPLICATION = 0x81
ERR_FUNCTION_NOT_AVAILABLE = 0x04
ERR_CLASS_PDU = 0x84

RET_SUCCESS = 0xFF
RET_ADDRESS_OUT_OF_RANGE = 0x05
RET_DATA_TYPE_NOT_SUPPORTED = 0x06
RET_OBJECT_DOES_NOT_EXIST = 0x0A

SZL_MODULE_ID = 0x0011
SZL_COMPONENT_ID = 0x001C

# request transport size -> bytes per element
TRANSPORT_SIZES = {0x01: 1, 0x02: 1, 0x03: 1, 0x04: 2, 0x05: 2, 0x06: 4, 0x07: 4, 0x08: 4}


class TpktError(ValueError):
    pass


class CotpError(ValueError):
    pass


class S7Error(ValueError):
    pass


@dataclass(frozen=True)
class DeviceIdentity:
    module_type: str = "CPU 1211C DC/DC/DC"
    serial: str = "S C-J4UR91352019"
    firmware_version: str = "V4.2.3"
    plant_id: str = "WTG-07"
    order_number: str = "6ES7 211-1AE40-0XB0"
    system_name: str = "S71200/ET200M station_1"
    module_name: str = "PLC_1"
    copyright: str = "Original Siemens Equipment"

    def __post_init__(self):
        for name in ("module_type", "serial", "firmware_version", "plant_id"):
            if not getattr(self, name):
                raise ValueError(f"identity field {name} must be non-empty")
        if not re.fullmatch(r"V\d{1,3}\.\d{1,3}\.\d{1,3}", self.firmware_version):
            raise ValueError(f"firmware version must look like V4.2.3, got {self.firmware_version!r}")

    @property
    def firmware_tuple(self) -> tuple[int, int, int]:
        a, b, c = self.firmware_version[1:].split(".")
        return int(a), int(b), int(c)


# --- TPKT ---------------------------------------------------------------


def encode_tpkt(payload: bytes) -> bytes:
    return struct.pack(">BBH", TPKT_VERSION, 0, len(payload) + TPKT_HEADER) + payload


class TpktStream:
    def __init__(self):
        self._buf = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[bytes]:
        self._buf += data
        out = []
        while len(self._buf) >= TPKT_HEADER:
            version, _reserved, length = struct.unpack(">BBH", self._buf[:TPKT_HEADER])
            if version != TPKT_VERSION:
                raise TpktError(f"TPKT version {version} not supported")
            if length < TPKT_HEADER + 3:
                raise TpktError(f"TPKT length {length} too short")
            if len(self._buf) < length:
                break
            out.append(bytes(self._buf[TPKT_HEADER:length]))
            del self._buf[:length]
        return out


def parse_tpkt(data: bytes) -> tuple[list[bytes], bytes]:
    stream = TpktStream()
    payloads = stream.feed(data)
    return payloads, bytes(stream._buf)


# --- COTP ---------------------------------------------------------------


@dataclass(frozen=True)
class CotpTpdu:
    pdu_type: int
    dst_ref: int = 0
    src_ref: int = 0
    class_option: int = 0
    params: tuple = ()
    eot: bool = True
    data: bytes = b""


def _parse_params(raw: bytes) -> tuple:
    params = []
    i = 0
    while i < len(raw):
        if i + 2 > len(raw):
            raise CotpError("truncated COTP parameter")
        code, plen = raw[i], raw[i + 1]
        if i + 2 + plen > len(raw):
            raise CotpError("COTP parameter overruns header")
        params.append((code, bytes(raw[i + 2:i + 2 + plen])))
        i += 2 + plen
    return tuple(params)


def parse_cotp(payload: bytes) -> CotpTpdu:
    if len(payload) < 2:
        raise CotpError("COTP header too short")
    li = payload[0]
    if li + 1 > len(payload) or li < 1:
        raise CotpError(f"COTP length indicator {li} exceeds payload")
    kind = payload[1] & 0xF0
    header = payload[1:li + 1]
    if kind in (COTP_CR, COTP_CC, COTP_DR):
        if li < 6:
            raise CotpError("COTP connection header too short")
        dst, src = struct.unpack(">HH", header[1:5])
        return CotpTpdu(kind, dst, src, header[5], _parse_params(header[6:]), True, bytes(payload[li + 1:]))
    if kind == COTP_DT:
        if li != 2:
            raise CotpError("COTP data header must be 2 bytes")
        return CotpTpdu(kind, eot=bool(header[1] & 0x80), data=bytes(payload[li + 1:]))
    raise CotpError(f"unsupported COTP TPDU type 0x{payload[1]:02X}")


def _encode_conn(kind: int, dst: int, src: int, class_option: int, params) -> bytes:
    body = bytes([kind]) + struct.pack(">HHB", dst, src, class_option)
    for code, value in params:
        body += bytes([code, len(value)]) + value
    return bytes([len(body)]) + body


def encode_cotp_dt(data: bytes) -> bytes:
    return b"\x02\xf0\x80" + data


def tpdu_size_code(params) -> int | None:
    for code, value in params:
        if code == COTP_PARAM_TPDU_SIZE and len(value) == 1:
            return value[0]
    return None


class CotpState(enum.Enum):
    AWAIT_CR = "await_cr"
    CONNECTED = "connected"
    CLOSED = "closed"


@dataclass
class CotpConnection:
    local_ref: int = 0x0001
    state: CotpState = CotpState.AWAIT_CR
    negotiated_tpdu_size: int = 0
    src_ref: int = 0
    dst_ref: int = 0

    def handle_connect(self, cr: CotpTpdu) -> bytes:
        if self.state is not CotpState.AWAIT_CR:
            raise CotpError("connection request in wrong state")
        if cr.pdu_type != COTP_CR:
            raise CotpError("expected COTP connection request")
        requested = tpdu_size_code(cr.params)
        code = MAX_TPDU_CODE if requested is None else min(requested, MAX_TPDU_CODE)
        code = max(code, 0x07)
        params = [(COTP_PARAM_TPDU_SIZE, bytes([code]))]
        params += [(c, v) for c, v in cr.params if c in (COTP_PARAM_SRC_TSAP, COTP_PARAM_DST_TSAP)]
        self.dst_ref, self.src_ref = cr.src_ref, self.local_ref
        self.negotiated_tpdu_size = 1 << code
        self.state = CotpState.CONNECTED
        return _encode_conn(COTP_CC, cr.src_ref, self.local_ref, cr.class_option & 0xF0, params)


def handle_cotp_connect(cr_payload: bytes, conn: CotpConnection | None = None) -> bytes:
    conn = conn or CotpConnection()
    return conn.handle_connect(parse_cotp(cr_payload))


# --- S7 -----------------------------------------------------------------


@dataclass(frozen=True)
class S7Header:
    rosctr: int
    pdu_ref: int
    param_len: int
    data_len: int
    error_class: int = 0
    error_code: int = 0

    @property
    def size(self) -> int:
        return 12 if self.rosctr in (ROSCTR_ACK, ROSCTR_ACK_DATA) else 10


def parse_s7(pdu: bytes) -> tuple[S7Header, bytes, bytes]:
    if len(pdu) < 10 or pdu[0] != S7_PROTOCOL_ID:
        raise S7Error("not an S7 PDU")
    rosctr = pdu[1]
    ref, plen, dlen = struct.unpack(">HHH", pdu[4:10])
    err_class = err_code = 0
    size = 10
    if rosctr in (ROSCTR_ACK, ROSCTR_ACK_DATA):
        if len(pdu) < 12:
            raise S7Error("truncated S7 ack header")
        err_class, err_code = pdu[10], pdu[11]
        size = 12
    if size + plen + dlen != len(pdu):
        raise S7Error(f"S7 lengths ({plen}+{dlen}) disagree with PDU size {len(pdu)}")
    header = S7Header(rosctr, ref, plen, dlen, err_class, err_code)
    return header, bytes(pdu[size:size + plen]), bytes(pdu[size + plen:])


def encode_s7(rosctr: int, pdu_ref: int, params: bytes = b"", data: bytes = b"",
              error_class: int = 0, error_code: int = 0) -> bytes:
    head = struct.pack(">BBHHHH", S7_PROTOCOL_ID, rosctr, 0, pdu_ref, len(params), len(data))
    if rosctr in (ROSCTR_ACK, ROSCTR_ACK_DATA):
        head += bytes([error_class, error_code])
    return head + params + data


def _text(value: str, width: int) -> bytes:
    return value.encode("ascii", "replace")[:width].ljust(width, b" " if width == 20 else b"\x00")


def szl_records(szl_id: int, identity: DeviceIdentity) -> dict[int, bytes] | None:
    if szl_id == SZL_MODULE_ID:
        major, minor, patch = identity.firmware_tuple
        return {
            0x0001: struct.pack(">H", 1) + _text(identity.order_number, 20) + b"\x00\xc0\x00\x03\x00\x01",
            0x0006: struct.pack(">H", 6) + _text(identity.order_number, 20) + b"\x00\xc0\x00\x03\x00\x01",
            0x0007: struct.pack(">H", 7) + b" " * 20 + b"\x00\xc0" + bytes([0x56, major, minor, patch]),
        }
    if szl_id == SZL_COMPONENT_ID:
        fields = {
            0x0001: identity.system_name,
            0x0002: identity.module_name,
            0x0003: identity.plant_id,
            0x0004: identity.copyright,
            0x0005: identity.serial,
            0x0007: identity.module_type,
        }
        return {k: struct.pack(">H", k) + _text(v, 32) for k, v in fields.items()}
    return None


def _userdata_response(seq: int, subfunction: int, data: bytes, error: int = 0) -> bytes:
    # param head: 00 01 12, length 8, method 0x12 response, type 8 group 4 (CPU functions)
    return struct.pack(">BBBBBBBBBBH", 0x00, 0x01, 0x12, 0x08, 0x12, 0x84, subfunction, seq, 0x00, 0x00, error)


def _handle_userdata(header: S7Header, params: bytes, data: bytes, identity: DeviceIdentity) -> bytes:
    if len(params) < 8 or params[:3] != b"\x00\x01\x12":
        raise S7Error("malformed userdata parameters")
    method, type_group, subfunction, seq = params[4], params[5], params[6], params[7]
    if method != 0x11 or type_group & 0x0F != 0x04 or subfunction != 0x01:
        return encode_s7(ROSCTR_USERDATA, header.pdu_ref,
                         _userdata_response(seq, subfunction, b"", 0xD001 if method == 0x11 else 0xD004),
                         b"\x0a\x00\x00\x00")
    # scanners send either FF 09 or 0A 00 as the request data header
    if len(data) < 8 or data[0] not in (RET_SUCCESS, 0x0A):
        raise S7Error("malformed SZL request data")
    szl_id, index = struct.unpack(">HH", data[4:8])
    records = szl_records(szl_id, identity)
    if records is None or (index and index not in records):
        return encode_s7(ROSCTR_USERDATA, header.pdu_ref, _userdata_response(seq, subfunction, b"", 0xD401),
                         b"\x0a\x00\x00\x00")
    chosen = list(records.values()) if index == 0 else [records[index]]
    rec_len = len(chosen[0])
    body = struct.pack(">HHHH", szl_id, index, rec_len, len(chosen)) + b"".join(chosen)
    payload = struct.pack(">BBH", RET_SUCCESS, 0x09, len(body)) + body
    return encode_s7(ROSCTR_USERDATA, header.pdu_ref, _userdata_response(seq, subfunction, b""), payload)


def _db_bytes(image: ProcessImage) -> bytes:
    return struct.pack(f">{len(image.holding_registers)}H", *image.holding_registers)


def _read_item(item: bytes, image: ProcessImage) -> bytes:
    """One Read Var item (12 A 10 form) -> its response data item."""
    if len(item) != 12 or item[0] != 0x12 or item[1] != 0x0A or item[2] != 0x10:
        return bytes([RET_DATA_TYPE_NOT_SUPPORTED, 0x00, 0x00, 0x00])
    tsize, count, db, area = struct.unpack(">BHHB", item[3:9])
    bit_addr = int.from_bytes(item[9:12], "big")
    if tsize not in TRANSPORT_SIZES:
        return bytes([RET_DATA_TYPE_NOT_SUPPORTED, 0x00, 0x00, 0x00])
    if area != AREA_DB or db != DB_HOLDING:
        return bytes([RET_OBJECT_DOES_NOT_EXIST, 0x00, 0x00, 0x00])
    memory = _db_bytes(image)
    byte_off, bit = divmod(bit_addr, 8)
    if tsize == 0x01:
        if count != 1 or byte_off >= len(memory):
            return bytes([RET_ADDRESS_OUT_OF_RANGE, 0x00, 0x00, 0x00])
        value = memory[byte_off] >> bit & 1
        return struct.pack(">BBH", RET_SUCCESS, 0x03, 1) + bytes([value])
    nbytes = count * TRANSPORT_SIZES[tsize]
    if bit or count == 0 or byte_off + nbytes > len(memory):
        return bytes([RET_ADDRESS_OUT_OF_RANGE, 0x00, 0x00, 0x00])
    return struct.pack(">BBH", RET_SUCCESS, 0x04, nbytes * 8) + memory[byte_off:byte_off + nbytes]


def _handle_read_var(header: S7Header, params: bytes, image: ProcessImage) -> bytes:
    if len(params) < 2:
        raise S7Error("read var without item count")
    count = params[1]
    if count == 0 or len(params) != 2 + 12 * count:
        raise S7Error("read var item list malformed")
    items = [_read_item(params[2 + 12 * i:14 + 12 * i], image) for i in range(count)]
    data = b""
    for i, item in enumerate(items):
        data += item
        if i < count - 1 and len(item) % 2:
            data += b"\x00"
    return encode_s7(ROSCTR_ACK_DATA, header.pdu_ref, bytes([FN_READ_VAR, count]), data)


def handle_s7_request(pdu: bytes, identity: DeviceIdentity, image: ProcessImage) -> tuple[bytes, str]:
    """Evaluate one S7 PDU.  Returns (response PDU, request label)."""
    try:
        header, params, data = parse_s7(pdu)
    except S7Error:
        return encode_s7(ROSCTR_ACK, 0, error_class=ERR_CLASS_PDU, error_code=0x04), "malformed"
    try:
        if header.rosctr == ROSCTR_JOB and params[:1] == bytes([FN_SETUP_COMM]):
            if len(params) != 8:
                raise S7Error("setup communication parameters must be 8 bytes")
            calling, called, pdu_len = struct.unpack(">HHH", params[2:8])
            calling, called = min(max(calling, 1), MAX_AMQ), min(max(called, 1), MAX_AMQ)
            reply = struct.pack(">BBHHH", FN_SETUP_COMM, 0, calling, called, PDU_LENGTH)
            return encode_s7(ROSCTR_ACK_DATA, header.pdu_ref, reply), "setup_communication"
        if header.rosctr == ROSCTR_JOB and params[:1] == bytes([FN_READ_VAR]):
            return _handle_read_var(header, params, image), "read_var"
        if header.rosctr == ROSCTR_USERDATA:
            label = "szl_read"
            return _handle_userdata(header, params, data, identity), label
    except S7Error:
        return encode_s7(ROSCTR_ACK, header.pdu_ref, error_class=ERR_CLASS_PDU, error_code=0x04), "malformed"
    fn = params[0] if params else 0
    reply = bytes([fn, 0x00]) if params else b""
    return (encode_s7(ROSCTR_ACK_DATA, header.pdu_ref, reply, error_class=ERR_CLASS_APPLICATION,
                      error_code=ERR_FUNCTION_NOT_AVAILABLE),
            f"unsupported_0x{fn:02x}")


class _NullEvents:
    def emit(self, *args, **kwargs):
        return None


class S7Session:
    """Sans-IO per-connection handler: bytes in, (bytes out, keep open)."""

    def __init__(self, identity: DeviceIdentity, snapshot, events=None, peer: str = "unknown"):
        self.identity = identity
        self.snapshot = snapshot  # callable returning the current ProcessImage
        self.events = events or _NullEvents()
        self.peer = peer
        self.tpkt = TpktStream()
        self.cotp = CotpConnection()
        self._fragments = bytearray()
        self.closed = False

    def _close(self, kind: str, error: str) -> None:
        self.closed = True
        self.cotp.state = CotpState.CLOSED
        self.events.emit("s7lite", kind, severity="warning", peer=self.peer, error=error)

    def feed(self, data: bytes) -> bytes:
        if self.closed:
            return b""
        out = bytearray()
        try:
            payloads = self.tpkt.feed(data)
        except TpktError as exc:
            self._close("tpkt_error", str(exc))
            return b""
        for payload in payloads:
            try:
                tpdu = parse_cotp(payload)
            except CotpError as exc:
                self._close("cotp_error", str(exc))
                break
            if self.cotp.state is CotpState.AWAIT_CR:
                if tpdu.pdu_type != COTP_CR:
                    self._close("cotp_error", "data before connection request")
                    break
                out += encode_tpkt(self.cotp.handle_connect(tpdu))
                self.events.emit("s7lite", "s7_connect", peer=self.peer,
                                 tpdu_size=self.cotp.negotiated_tpdu_size)
                continue
            if tpdu.pdu_type == COTP_DR:
                self.closed = True
                self.events.emit("s7lite", "s7_disconnect", peer=self.peer)
                break
            if tpdu.pdu_type != COTP_DT:
                self._close("cotp_error", f"unexpected TPDU 0x{tpdu.pdu_type:02X} while connected")
                break
            self._fragments += tpdu.data
            if len(self._fragments) > 65535:
                self._close("cotp_error", "fragmented PDU too large")
                break
            if not tpdu.eot:
                continue
            pdu, self._fragments = bytes(self._fragments), bytearray()
            response, label = handle_s7_request(pdu, self.identity, self.snapshot())
            severity = "info" if label in ("setup_communication", "szl_read", "read_var") else "warning"
            self.events.emit("s7lite", "s7_request", severity=severity, peer=self.peer,
                             request=label, pdu=pdu[:64].hex())
            out += encode_tpkt(encode_cotp_dt(response))
        return bytes(out)


class S7Server:
    def __init__(self, controller, identity: DeviceIdentity | None = None, events=None, registry=None,
                 host: str = "127.0.0.1", port: int = 102):
        self.controller = controller
        self.identity = identity or DeviceIdentity()
        self.events = events or _NullEvents()
        self.registry = registry
        self.host = host
        self.port = port
        self._server = None

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._client, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _client(self, reader, writer) -> None:
        raw_peer = writer.get_extra_info("peername")
        session = S7Session(self.identity, lambda: self.controller.snapshot, self.events)
        try:
            while not session.closed:
                data = await reader.read(4096)
                if not data:
                    break
                if self.registry is not None:
                    peer = self.registry.resolve(raw_peer)
                    session.peer = f"{peer[0]}:{peer[1]}"
                out = session.feed(data)
                if out:
                    writer.write(out)
                    await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


# --- client-side probe builders (red team and tests) --------------------


def build_cotp_cr(tpdu_code: int = MAX_TPDU_CODE, src_ref: int = 0x0005,
                  src_tsap: bytes = b"\x01\x00", dst_tsap: bytes = b"\x01\x02") -> bytes:
    params = [(COTP_PARAM_TPDU_SIZE, bytes([tpdu_code])), (COTP_PARAM_SRC_TSAP, src_tsap),
              (COTP_PARAM_DST_TSAP, dst_tsap)]
    return encode_tpkt(_encode_conn(COTP_CR, 0, src_ref, 0x00, params))


def build_setup_comm(pdu_ref: int = 1, pdu_length: int = 480, amq: int = 1) -> bytes:
    params = struct.pack(">BBHHH", FN_SETUP_COMM, 0, amq, amq, pdu_length)
    return encode_tpkt(encode_cotp_dt(encode_s7(ROSCTR_JOB, pdu_ref, params)))


def build_szl_read(szl_id: int, index: int = 0, pdu_ref: int = 2, seq: int = 0) -> bytes:
    params = bytes([0x00, 0x01, 0x12, 0x04, 0x11, 0x44, 0x01, seq])
    data = struct.pack(">BBHHH", RET_SUCCESS, 0x09, 4, szl_id, index)
    return encode_tpkt(encode_cotp_dt(encode_s7(ROSCTR_USERDATA, pdu_ref, params, data)))


def build_read_db(db: int, byte_offset: int, count: int, transport_size: int = 0x02, pdu_ref: int = 3) -> bytes:
    item = struct.pack(">BBBBHHB", 0x12, 0x0A, 0x10, transport_size, count, db, AREA_DB)
    item += (byte_offset * 8).to_bytes(3, "big")
    params = bytes([FN_READ_VAR, 1]) + item
    return encode_tpkt(encode_cotp_dt(encode_s7(ROSCTR_JOB, pdu_ref, params)))


def unwrap_response(tpkt_payload: bytes) -> tuple[S7Header, bytes, bytes]:
    tpdu = parse_cotp(tpkt_payload)
    if tpdu.pdu_type != COTP_DT:
        raise S7Error("expected a data TPDU")
    return parse_s7(tpdu.data)


def parse_szl_records(data: bytes) -> tuple[int, list[bytes]]:
    """SZL response data -> (szl id, raw records)."""
    if len(data) < 12 or data[0] != RET_SUCCESS:
        raise S7Error("SZL read failed")
    length = struct.unpack(">H", data[2:4])[0]
    body = data[4:4 + length]
    szl_id, _index, rec_len, count = struct.unpack(">HHHH", body[:8])
    recs = [body[8 + i * rec_len:8 + (i + 1) * rec_len] for i in range(count)]
    return szl_id, recs


def identity_from_records(module_recs, component_recs) -> DeviceIdentity:
    order, firmware = "", None
    for rec in module_recs:
        idx = struct.unpack(">H", rec[:2])[0]
        if idx == 0x0001:
            order = rec[2:22].decode("ascii", "replace").strip()
        elif idx == 0x0007 and rec[24] == 0x56:
            firmware = f"V{rec[25]}.{rec[26]}.{rec[27]}"
    comp = {}
    for rec in component_recs:
        idx = struct.unpack(">H", rec[:2])[0]
        comp[idx] = rec[2:].rstrip(b"\x00").decode("ascii", "replace")
    return DeviceIdentity(
        module_type=comp.get(0x0007, ""),
        serial=comp.get(0x0005, ""),
        firmware_version=firmware or "",
        plant_id=comp.get(0x0003, ""),
        order_number=order,
        system_name=comp.get(0x0001, ""),
        module_name=comp.get(0x0002, ""),
        copyright=comp.get(0x0004, ""),
    )
