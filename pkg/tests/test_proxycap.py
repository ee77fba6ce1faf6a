import asyncio
import io
import json
import random
import socket
import struct

import dpkt
import pytest
from hypothesis import given, settings, strategies as st

from conftest import run
from honeyturbine.proxycap import (
    Direction, EventLog, PcapWriter, PeerRegistry, Route, TransparentProxy, read_events, read_pcap,
)
from honeyturbine.proxycap.pcap import CLIENT_MAC, HEADER_BYTES, MAX_SEGMENT, build_frame, checksum, isn_for, tcp_payload

CLIENT = ("203.0.113.9", 40001)
SERVICE = ("192.0.2.10", 502)


@pytest.fixture
def pcap_path(tmp_path):
    return tmp_path / "cap" / "traffic.pcap"


def dpkt_packets(path):
    with open(path, "rb") as fh:
        reader = dpkt.pcap.Reader(fh)
        assert reader.datalink() == dpkt.pcap.DLT_EN10MB
        return [(ts, dpkt.ethernet.Ethernet(buf)) for ts, buf in reader]


def assert_checksums_valid(eth):
    ip = eth.data
    raw_ip = bytes(ip)[:20]
    assert checksum(raw_ip) == 0
    pseudo = ip.src + ip.dst + struct.pack("!BBH", 0, 6, len(ip.data))
    assert checksum(pseudo + bytes(ip.data)) == 0


class TestChecksum:
    def test_rfc1071_example(self):
        # worked example from the RFC: sum 0xddf2, complement 0x220d
        assert checksum(bytes.fromhex("0001f203f4f5f6f7")) == 0x220D

    def test_odd_length(self):
        assert checksum(b"\x01") == ~0x0100 & 0xFFFF


class TestPcapWriter:
    def test_global_header(self, pcap_path):
        PcapWriter(pcap_path).close()
        head = pcap_path.read_bytes()
        assert struct.unpack("<I", head[:4])[0] == 0xA1B2C3D4
        assert struct.unpack("<I", head[20:24])[0] == 1
        assert len(head) == 24

    def test_one_chunk_one_packet(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_SERVICE, bytes(100), CLIENT, SERVICE, 1000.25)
        w.close()
        ((ts, frame),) = read_pcap(pcap_path)
        assert len(frame) == 100 + HEADER_BYTES == 154
        assert ts == pytest.approx(1000.25)

    def test_dpkt_reads_addresses_and_checksums(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_SERVICE, b"hello", CLIENT, SERVICE, 1.0)
        w.capture(1, Direction.TO_CLIENT, b"world!", CLIENT, SERVICE, 2.0)
        w.close()
        pkts = dpkt_packets(pcap_path)
        assert len(pkts) == 2
        (_, a), (_, b) = pkts
        assert socket.inet_ntoa(a.data.src) == CLIENT[0] and a.data.data.dport == SERVICE[1]
        assert socket.inet_ntoa(b.data.src) == SERVICE[0] and b.data.data.sport == SERVICE[1]
        for _, eth in pkts:
            assert_checksums_valid(eth)
        assert a.data.data.data == b"hello" and b.data.data.data == b"world!"

    def test_sequence_progression(self, pcap_path):
        w = PcapWriter(pcap_path)
        for chunk in (b"aaa", b"bbbbb"):
            w.capture(7, Direction.TO_SERVICE, chunk, CLIENT, SERVICE, 1.0)
        w.capture(7, Direction.TO_CLIENT, b"zz", CLIENT, SERVICE, 1.0)
        w.capture(7, Direction.TO_SERVICE, b"c", CLIENT, SERVICE, 1.0)
        w.close()
        tcps = [eth.data.data for _, eth in dpkt_packets(pcap_path)]
        isn_s, isn_c = isn_for(7, Direction.TO_SERVICE), isn_for(7, Direction.TO_CLIENT)
        assert [t.seq for t in tcps] == [isn_s, isn_s + 3, isn_c, isn_s + 8]
        assert tcps[2].ack == isn_s + 8
        assert tcps[3].ack == isn_c + 2

    def test_scapy_decodes_modbus(self, pcap_path):
        scapy_all = pytest.importorskip("scapy.all")
        modbus = pytest.importorskip("scapy.contrib.modbus")
        w = PcapWriter(pcap_path)
        w.capture(3, Direction.TO_SERVICE, bytes.fromhex("000100000006010300000002"), CLIENT, SERVICE, 5.0)
        w.capture(3, Direction.TO_CLIENT, bytes.fromhex("00010000000701030400020078"), CLIENT, SERVICE, 5.1)
        w.close()
        pkts = scapy_all.rdpcap(str(pcap_path))
        req, resp = pkts[0], pkts[1]
        assert req.haslayer(modbus.ModbusPDU03ReadHoldingRegistersRequest)
        assert req[modbus.ModbusPDU03ReadHoldingRegistersRequest].quantity == 2
        assert resp.haslayer(modbus.ModbusPDU03ReadHoldingRegistersResponse)
        assert resp[modbus.ModbusPDU03ReadHoldingRegistersResponse].registerVal == [2, 120]
        for p in pkts:
            ip, tcp = p[scapy_all.IP], p[scapy_all.TCP]
            rebuilt = scapy_all.Ether(bytes(p))
            del rebuilt[scapy_all.IP].chksum
            del rebuilt[scapy_all.TCP].chksum
            rebuilt = scapy_all.Ether(bytes(rebuilt))
            assert rebuilt[scapy_all.IP].chksum == ip.chksum
            assert rebuilt[scapy_all.TCP].chksum == tcp.chksum

    def test_large_chunk_split(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_CLIENT, bytes(MAX_SEGMENT + 10), CLIENT, SERVICE, 1.0)
        w.close()
        frames = read_pcap(pcap_path)
        assert [len(f) - HEADER_BYTES for _, f in frames] == [MAX_SEGMENT, 10]
        assert w.payload_bytes[Direction.TO_CLIENT] == MAX_SEGMENT + 10

    def test_empty_chunk_still_recorded(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_SERVICE, b"", CLIENT, SERVICE, 1.0)
        w.close()
        assert len(read_pcap(pcap_path)) == 1

    def test_ipv6_mapped_peer(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_SERVICE, b"x", ("::ffff:10.1.2.3", 5), SERVICE, 1.0)
        w.close()
        (_, eth), = dpkt_packets(pcap_path)
        assert socket.inet_ntoa(eth.data.src) == "10.1.2.3"

    def test_disk_failure_rotates_with_alarm(self, pcap_path):
        events = EventLog()
        opened = []

        class Flaky(io.BytesIO):
            fail = True

            def write(self, b):
                if len(opened) == 1 and len(b) > 24 and Flaky.fail:
                    Flaky.fail = False
                    raise OSError(28, "No space left on device")
                return super().write(b)

        def opener(path, mode):
            real = open(path, mode)
            opened.append(path)
            if len(opened) == 1:
                f = Flaky()
                f.close = real.close
                return f
            return real

        w = PcapWriter(pcap_path, events=events, opener=opener)
        w.capture(1, Direction.TO_SERVICE, b"abc", CLIENT, SERVICE, 1.0)
        w.close()
        assert len(w.paths) == 2 and w.paths[1].name == "traffic.1.pcap"
        (alarm,) = events.of_kind("capture_rotated")
        assert alarm.severity == "alarm"
        assert [f[-3:] for _, f in read_pcap(w.paths[1])] == [b"abc"]

    def test_size_rotation(self, pcap_path):
        w = PcapWriter(pcap_path, max_bytes=24 + 2 * (16 + HEADER_BYTES + 10))
        for _ in range(5):
            w.capture(1, Direction.TO_SERVICE, bytes(10), CLIENT, SERVICE, 1.0)
        w.close()
        assert sum(len(read_pcap(p)) for p in w.paths) == 5
        assert len(w.paths) == 3

    def test_read_pcap_rejects_truncation(self, pcap_path):
        w = PcapWriter(pcap_path)
        w.capture(1, Direction.TO_SERVICE, bytes(10), CLIENT, SERVICE, 1.0)
        w.close()
        pcap_path.write_bytes(pcap_path.read_bytes()[:-3])
        with pytest.raises(ValueError):
            read_pcap(pcap_path)

    @settings(max_examples=50, deadline=None)
    @given(payload=st.binary(max_size=300), sport=st.integers(1, 65535), seq=st.integers(0, 2 ** 32 - 1))
    def test_frame_checksums_property(self, payload, sport, seq):
        frame = build_frame(("10.9.8.7", sport), ("10.0.0.1", 80), b"\x02" * 6, b"\x04" * 6, seq, 0, 1, payload)
        eth = dpkt.ethernet.Ethernet(frame)
        assert_checksums_valid(eth)
        assert tcp_payload(frame) == (sport, 80, payload)


class TestEventLog:
    def test_bulk_lines_and_order(self, tmp_path):
        path = tmp_path / "events.jsonl"
        log = EventLog(path)
        for i in range(10_000):
            log.emit(f"src{i % 3}", "bulk", n=i)
        log.close()
        lines = path.read_text().splitlines()
        assert len(lines) == 10_000
        docs = [json.loads(line) for line in lines]
        for s in ("src0", "src1", "src2"):
            ns = [d["attrs"]["n"] for d in docs if d["source"] == s]
            assert ns == sorted(ns)
        assert [d["seq"] for d in docs] == list(range(1, 10_001))

    def test_monotone_timestamps_per_source(self):
        ticks = iter([10.0, 9.0, 11.0, 8.0])
        log = EventLog(clock=lambda: next(ticks))
        a = log.emit("a", "x")
        b = log.emit("a", "x")
        c = log.emit("b", "x")
        d = log.emit("a", "x")
        assert a.timestamp <= b.timestamp <= d.timestamp
        assert c.timestamp == 11.0

    def test_iso_timestamp_and_sim_time(self, tmp_path):
        path = tmp_path / "e.jsonl"
        log = EventLog(path, clock=lambda: 0.0, sim_clock=lambda: 12.3456789)
        log.emit("m", "k", severity="warning", fc=15)
        log.close()
        (doc,) = read_events(path)
        assert doc["ts"] == "1970-01-01T00:00:00.000000+00:00"
        assert doc["sim_time"] == 12.345679
        assert doc["attrs"]["fc"] == 15 and doc["severity"] == "warning"

    def test_unknown_severity_downgraded(self):
        assert EventLog().emit("m", "k", severity="bogus").severity == "info"

    def test_sink_failure_buffers_then_drops(self, tmp_path):
        log = EventLog(tmp_path / "e.jsonl", max_buffer=3)

        class Broken:
            def write(self, _):
                raise OSError("disk gone")

            def flush(self):
                pass

            def close(self):
                pass

        real = log._fh
        log._fh = Broken()
        for i in range(5):
            log.emit("m", "k", n=i)
        assert log.dropped == 2
        log._fh = real
        log.emit("m", "k", n=5)
        log.close()
        # the bound also covers the line that triggers the retry
        assert log.dropped == 3
        assert [d["attrs"]["n"] for d in read_events(tmp_path / "e.jsonl")] == [3, 4, 5]

    def test_corrupt_line_skipped(self, tmp_path):
        path = tmp_path / "e.jsonl"
        path.write_text('{"kind": "a"}\nnot json\n\n{"kind": "b"}\n')
        assert [d["kind"] for d in read_events(path)] == ["a", "b"]

    def test_bytes_serialized_as_hex(self, tmp_path):
        path = tmp_path / "e.jsonl"
        log = EventLog(path)
        log.emit("m", "k", data=b"\x01\xff", pair=(1, 2))
        log.close()
        assert read_events(path)[0]["attrs"] == {"data": "01ff", "pair": [1, 2]}

    def test_subscribers(self):
        seen = []
        log = EventLog()
        log.subscribe(seen.append)
        log.emit("m", "k")
        assert [r.kind for r in seen] == ["k"]


class Recorder:
    """Upstream that logs everything it receives and answers each chunk reversed."""

    def __init__(self):
        self.received = {}
        self.sent = {}
        self.peers = []
        self.server = None
        self.port = None

    async def start(self):
        self.server = await asyncio.start_server(self._client, "127.0.0.1", 0)
        self.port = self.server.sockets[0].getsockname()[1]

    async def _client(self, reader, writer):
        key = writer.get_extra_info("peername")
        self.peers.append(key)
        got = self.received.setdefault(key, bytearray())
        sent = self.sent.setdefault(key, bytearray())
        while True:
            data = await reader.read(4096)
            if not data:
                break
            got += data
            reply = data[::-1] + b"!"
            sent += reply
            writer.write(reply)
            await writer.drain()
        writer.close()

    async def stop(self):
        self.server.close()
        await self.server.wait_closed()


async def drive(port, chunks, pause=0.0):
    reader, writer = await asyncio.open_connection("127.0.0.1", port)
    back = bytearray()

    async def collect():
        while True:
            data = await reader.read(65536)
            if not data:
                return
            back.extend(data)

    task = asyncio.ensure_future(collect())
    for c in chunks:
        writer.write(c)
        await writer.drain()
        if pause:
            await asyncio.sleep(pause)
    writer.write_eof()
    await asyncio.wait_for(task, 5)
    writer.close()
    return bytes(back)


class TestProxy:
    def test_transparency_and_completeness(self, pcap_path):
        rng = random.Random(11)
        streams = [[rng.randbytes(rng.randint(1, 3000)) for _ in range(rng.randint(1, 5))] for _ in range(30)]

        async def scenario():
            events = EventLog()
            up = Recorder()
            await up.start()
            cap = PcapWriter(pcap_path, events)
            proxy = TransparentProxy([Route("modbus", 0, "127.0.0.1", up.port)], cap, events)
            ports = await proxy.start()
            direct = [await drive(up.port, s) for s in streams[:5]]
            via = [await drive(ports["modbus"], s) for s in streams]
            await proxy.stop()
            await up.stop()
            cap.close()
            return up, proxy, cap, events, direct, via

        up, proxy, cap, events, direct, via = run(scenario())
        # service sees the same bytes whether or not the proxy is in the path
        observed = [bytes(up.received[p]) for p in up.peers]
        expected = [b"".join(s) for s in streams]
        assert observed[:5] == expected[:5] and observed[5:] == expected
        assert via[:5] == direct
        total_in = sum(map(len, expected))
        total_out = sum(len(up.sent[p]) for p in up.peers[5:])
        assert proxy.relayed[Direction.TO_SERVICE] == cap.payload_bytes[Direction.TO_SERVICE] == total_in
        assert proxy.relayed[Direction.TO_CLIENT] == cap.payload_bytes[Direction.TO_CLIENT] == total_out
        # the capture alone reproduces each client stream
        per_conn = {}
        for _, eth in dpkt_packets(pcap_path):
            assert_checksums_valid(eth)
            if eth.src == CLIENT_MAC:
                tcp = eth.data.data
                per_conn.setdefault(tcp.sport, bytearray()).extend(tcp.data)
        assert sorted(map(bytes, per_conn.values())) == sorted(expected)
        assert len(events.of_kind("conn_open")) == len(events.of_kind("conn_close")) == 30

    def test_registry_maps_upstream_to_client(self):
        async def scenario():
            up = Recorder()
            await up.start()
            reg = PeerRegistry()
            proxy = TransparentProxy([Route("web", 0, "127.0.0.1", up.port)], registry=reg)
            ports = await proxy.start()
            reader, writer = await asyncio.open_connection("127.0.0.1", ports["web"])
            writer.write(b"ping")
            await reader.read(10)
            client = writer.get_extra_info("sockname")[:2]
            resolved = reg.resolve(up.peers[0])
            writer.close()
            await proxy.stop()
            await up.stop()
            return client, resolved

        client, resolved = run(scenario())
        assert resolved == client

    def test_upstream_unreachable(self):
        dead = socket.socket()
        dead.bind(("127.0.0.1", 0))
        dead_port = dead.getsockname()[1]
        dead.close()

        async def scenario():
            events = EventLog()
            proxy = TransparentProxy([Route("s7", 0, "127.0.0.1", dead_port)], events=events)
            ports = await proxy.start()
            reader, writer = await asyncio.open_connection("127.0.0.1", ports["s7"])
            data = await asyncio.wait_for(reader.read(10), 5)
            writer.close()
            await proxy.stop()
            return data, events

        data, events = run(scenario())
        assert data == b""
        (ev,) = events.of_kind("upstream_unreachable")
        assert ev.attrs["service"] == "s7" and ev.severity == "error"

    def test_only_routes_listen(self):
        async def scenario():
            up = Recorder()
            await up.start()
            proxy = TransparentProxy([Route(n, 0, "127.0.0.1", up.port) for n in ("web", "s7", "modbus")])
            ports = await proxy.start()
            await proxy.stop()
            await up.stop()
            return proxy, ports

        proxy, ports = run(scenario())
        assert set(ports) == {"web", "s7", "modbus"}
        assert len(set(ports.values())) == 3

    def test_pcap_clean_after_stop_mid_connection(self, pcap_path):
        async def scenario():
            up = Recorder()
            await up.start()
            cap = PcapWriter(pcap_path)
            proxy = TransparentProxy([Route("modbus", 0, "127.0.0.1", up.port)], cap)
            ports = await proxy.start()
            reader, writer = await asyncio.open_connection("127.0.0.1", ports["modbus"])
            writer.write(b"abc")
            await reader.read(10)
            await proxy.stop()
            cap.close()
            writer.close()
            await up.stop()

        run(scenario())
        assert len(read_pcap(pcap_path)) == 2
