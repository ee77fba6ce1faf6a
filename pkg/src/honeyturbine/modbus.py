"""Modbus TCP server over the controller's coils and holding registers.

Function codes 1, 3, 5, 6, 15 and 16 are served; anything else answers
IllegalFunction.  Validation order follows the protocol specification:
quantity/byte-count problems (03) are reported before address problems (02).
Unit id is accepted as-is and echoed.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import struct
from dataclasses import dataclass

from .controller import N_COILS, N_REGISTERS, ProcessImage, WriteCoils, WriteRegisters

logger = logging.getLogger(__name__)

MBAP_HEADER = 7
MAX_LENGTH_FIELD = 254  # unit id + 253 byte PDU

FC_READ_COILS = 0x01
FC_READ_HOLDING = 0x03
FC_WRITE_SINGLE_COIL = 0x05
FC_WRITE_SINGLE_REGISTER = 0x06
FC_WRITE_MULTIPLE_COILS = 0x0F
FC_WRITE_MULTIPLE_REGISTERS = 0x10
SUPPORTED = frozenset({1, 3, 5, 6, 15, 16})


class ExceptionCode(enum.IntEnum):
    ILLEGAL_FUNCTION = 1
    ILLEGAL_DATA_ADDRESS = 2
    ILLEGAL_DATA_VALUE = 3


class MbapError(ValueError):
    pass


@dataclass(frozen=True)
class MbapFrame:
    transaction_id: int
    protocol_id: int
    length: int
    unit_id: int
    pdu: bytes

    @classmethod
    def build(cls, transaction_id: int, unit_id: int, pdu: bytes) -> "MbapFrame":
        return cls(transaction_id & 0xFFFF, 0, len(pdu) + 1, unit_id & 0xFF, bytes(pdu))

    def encode(self) -> bytes:
        return struct.pack(">HHHB", self.transaction_id, self.protocol_id, self.length, self.unit_id) + self.pdu


class MbapStream:
    """Reassembles MBAP frames from arbitrary TCP chunking."""

    def __init__(self):
        self._buf = bytearray()

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[MbapFrame]:
        self._buf += data
        frames = []
        while len(self._buf) >= MBAP_HEADER:
            tid, pid, length, uid = struct.unpack(">HHHB", self._buf[:MBAP_HEADER])
            if pid != 0:
                raise MbapError(f"protocol id {pid:#06x} is not Modbus")
            if not 2 <= length <= MAX_LENGTH_FIELD:
                raise MbapError(f"inconsistent length field {length}")
            end = 6 + length
            if len(self._buf) < end:
                break
            pdu = bytes(self._buf[MBAP_HEADER:end])
            del self._buf[:end]
            frames.append(MbapFrame(tid, pid, length, uid, pdu))
        return frames


def parse_mbap(data: bytes) -> tuple[list[MbapFrame], bytes]:
    """Split ``data`` into complete frames plus the unconsumed tail."""
    stream = MbapStream()
    frames = stream.feed(data)
    return frames, bytes(stream._buf)


def build_exception(fc: int, code: int) -> bytes:
    code = ExceptionCode(code)
    return bytes([(fc | 0x80) & 0xFF, int(code)])


def _pack_bits(bits) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def _unpack_bits(data: bytes, count: int) -> tuple[bool, ...]:
    return tuple(bool(data[i // 8] >> (i % 8) & 1) for i in range(count))


@dataclass(frozen=True)
class PduResult:
    response: bytes
    command: object = None  # WriteCoils / WriteRegisters to enqueue
    fc: int = 0
    start: int | None = None
    quantity: int | None = None
    values: tuple = ()

    @property
    def is_exception(self) -> bool:
        return bool(self.response[0] & 0x80)


def _exc(fc, code, **kw) -> PduResult:
    return PduResult(build_exception(fc, code), fc=fc, **kw)


def exec_read_holding(start: int, quantity: int, image: ProcessImage) -> bytes:
    if not 1 <= quantity <= 125:
        return build_exception(FC_READ_HOLDING, ExceptionCode.ILLEGAL_DATA_VALUE)
    if start + quantity > N_REGISTERS:
        return build_exception(FC_READ_HOLDING, ExceptionCode.ILLEGAL_DATA_ADDRESS)
    regs = image.holding_registers[start:start + quantity]
    return struct.pack(f">BB{quantity}H", FC_READ_HOLDING, 2 * quantity, *regs)


def exec_read_coils(start: int, quantity: int, image: ProcessImage) -> bytes:
    if not 1 <= quantity <= 2000:
        return build_exception(FC_READ_COILS, ExceptionCode.ILLEGAL_DATA_VALUE)
    if start + quantity > N_COILS:
        return build_exception(FC_READ_COILS, ExceptionCode.ILLEGAL_DATA_ADDRESS)
    packed = _pack_bits(image.coils[start:start + quantity])
    return bytes([FC_READ_COILS, len(packed)]) + packed


def exec_write_coils(start: int, quantity: int, packed: bytes, byte_count: int | None = None) -> PduResult:
    fc = FC_WRITE_MULTIPLE_COILS
    if byte_count is None:
        byte_count = len(packed)
    if not 1 <= quantity <= 0x7B0 or byte_count != (quantity + 7) // 8 or len(packed) != byte_count:
        return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE, start=start, quantity=quantity)
    if start + quantity > N_COILS:
        return _exc(fc, ExceptionCode.ILLEGAL_DATA_ADDRESS, start=start, quantity=quantity)
    values = _unpack_bits(packed, quantity)
    return PduResult(struct.pack(">BHH", fc, start, quantity), WriteCoils(start, values), fc, start, quantity, values)


def exec_write_registers(start: int, quantity: int, payload: bytes, byte_count: int) -> PduResult:
    fc = FC_WRITE_MULTIPLE_REGISTERS
    if not 1 <= quantity <= 123 or byte_count != 2 * quantity or len(payload) != byte_count:
        return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE, start=start, quantity=quantity)
    if start + quantity > N_REGISTERS:
        return _exc(fc, ExceptionCode.ILLEGAL_DATA_ADDRESS, start=start, quantity=quantity)
    values = struct.unpack(f">{quantity}H", payload)
    return PduResult(struct.pack(">BHH", fc, start, quantity), WriteRegisters(start, values), fc, start, quantity, values)


def handle_pdu(pdu: bytes, image: ProcessImage) -> PduResult:
    """Pure request evaluation: no I/O, no controller mutation."""
    if not pdu:
        return _exc(0, ExceptionCode.ILLEGAL_FUNCTION)
    fc = pdu[0]
    if fc not in SUPPORTED:
        return _exc(fc, ExceptionCode.ILLEGAL_FUNCTION)
    body = pdu[1:]

    if fc in (FC_READ_COILS, FC_READ_HOLDING):
        if len(body) != 4:
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE)
        start, qty = struct.unpack(">HH", body)
        fn = exec_read_holding if fc == FC_READ_HOLDING else exec_read_coils
        return PduResult(fn(start, qty, image), fc=fc, start=start, quantity=qty)

    if fc == FC_WRITE_SINGLE_COIL:
        if len(body) != 4:
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE)
        addr, value = struct.unpack(">HH", body)
        if value not in (0x0000, 0xFF00):
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE, start=addr, quantity=1)
        if addr >= N_COILS:
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_ADDRESS, start=addr, quantity=1)
        values = (value == 0xFF00,)
        return PduResult(bytes(pdu), WriteCoils(addr, values), fc, addr, 1, values)

    if fc == FC_WRITE_SINGLE_REGISTER:
        if len(body) != 4:
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE)
        addr, value = struct.unpack(">HH", body)
        if addr >= N_REGISTERS:
            return _exc(fc, ExceptionCode.ILLEGAL_DATA_ADDRESS, start=addr, quantity=1)
        return PduResult(bytes(pdu), WriteRegisters(addr, (value,)), fc, addr, 1, (value,))

    # FC15 / FC16 share the start, quantity, byte count layout
    if len(body) < 5:
        return _exc(fc, ExceptionCode.ILLEGAL_DATA_VALUE)
    start, qty, byte_count = struct.unpack(">HHB", body[:5])
    payload = body[5:]
    if fc == FC_WRITE_MULTIPLE_COILS:
        return exec_write_coils(start, qty, payload, byte_count)
    return exec_write_registers(start, qty, payload, byte_count)


class _NullEvents:
    def emit(self, *args, **kwargs):
        return None


class ModbusService:
    """Binds `handle_pdu` to a controller and the event log."""

    def __init__(self, controller, events=None, registry=None):
        self.controller = controller
        self.events = events or _NullEvents()
        self.registry = registry
        self.requests = 0

    def _peer(self, peer) -> str:
        if self.registry is not None:
            peer = self.registry.resolve(peer)
        return f"{peer[0]}:{peer[1]}" if peer else "unknown"

    def handle_frame(self, frame: MbapFrame, peer=None) -> bytes:
        self.requests += 1
        image = self.controller.snapshot
        result = handle_pdu(frame.pdu, image)
        who = self._peer(peer)
        if result.is_exception:
            self.events.emit("modbus", "modbus_exception", severity="warning", peer=who, fc=result.fc,
                             code=result.response[1], start=result.start, quantity=result.quantity,
                             unit=frame.unit_id, request=frame.pdu.hex())
        elif result.command is not None:
            self.controller.submit(result.command)
            self.events.emit("modbus", "modbus_write", severity="warning", peer=who, fc=result.fc,
                             start=result.start, quantity=result.quantity,
                             values=[int(v) for v in result.values], unit=frame.unit_id)
        else:
            self.events.emit("modbus", "modbus_read", peer=who, fc=result.fc, start=result.start,
                             quantity=result.quantity, unit=frame.unit_id)
        return MbapFrame.build(frame.transaction_id, frame.unit_id, result.response).encode()


class ModbusServer:
    def __init__(self, controller, events=None, registry=None, host: str = "127.0.0.1", port: int = 502):
        self.service = ModbusService(controller, events, registry)
        self.events = self.service.events
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
        peer = writer.get_extra_info("peername")
        stream = MbapStream()
        try:
            while True:
                data = await reader.read(4096)
                if not data:
                    break
                try:
                    frames = stream.feed(data)
                except MbapError as exc:
                    self.events.emit("modbus", "modbus_drop", severity="warning",
                                     peer=self.service._peer(peer), error=str(exc))
                    break
                for frame in frames:
                    writer.write(self.service.handle_frame(frame, peer))
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


def request(tid: int, unit: int, pdu: bytes) -> bytes:
    """Encode a client request ADU."""
    return MbapFrame.build(tid, unit, pdu).encode()


def read_holding_request(tid: int, start: int, quantity: int, unit: int = 1) -> bytes:
    return request(tid, unit, struct.pack(">BHH", FC_READ_HOLDING, start, quantity))


def write_coils_request(tid: int, start: int, values, unit: int = 1) -> bytes:
    packed = _pack_bits(list(values))
    return request(tid, unit, struct.pack(">BHHB", FC_WRITE_MULTIPLE_COILS, start, len(values), len(packed)) + packed)
