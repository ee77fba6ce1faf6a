"""Traffic capture: transparent relay, PCAP synthesis and the event log."""

from .events import EventLog, EventRecord, read_events
from .pcap import CaptureRecord, Direction, PcapWriter, read_pcap
from .proxy import PeerRegistry, Route, TransparentProxy

__all__ = [
    "CaptureRecord",
    "Direction",
    "EventLog",
    "EventRecord",
    "PcapWriter",
    "PeerRegistry",
    "Route",
    "TransparentProxy",
    "read_events",
    "read_pcap",
]
