"""Scenario lifecycle: wire plant, field bus, controller, services and proxy.

The kernel runs in lockstep.  Every plant step (``plant_dt``) samples the
wind and integrates the plant; every ``steps_per_scan`` steps it first
publishes telemetry, waits until the bridge has consumed it, runs one
controller scan, and waits until any control datagrams reached the plant
side.  With UDP on loopback this makes the trace a pure function of
(config, seed, profile) even though real sockets are in the path.

Time scaling: at ``time_scale`` k the kernel sleeps so that simulated time
advances k times faster than wall time; k = 0 runs as fast as possible.
"""

from __future__ import annotations

import asyncio
import logging
import signal
import time
from pathlib import Path

from ..controller import Controller
from ..decoyweb import DecoyWebServer
from ..fieldbus import FieldBridge, SimEndpoint
from ..modbus import ModbusServer
from ..plant import FaultFlags, TurbineState, step as plant_step
from ..proxycap import EventLog, PcapWriter, PeerRegistry, Route, TransparentProxy
from ..s7lite import S7Server
from ..windsource import GeoPoint, LiveWindSource, PerturbedWind, ReplayWindSource, WindProfile
from .config import ScenarioConfig

logger = logging.getLogger(__name__)

TRACE_HEADER = ("step,sim_time,v_wind,w_rotor,pitch,power_kw,generator_connected,faults,"
                "fsm_state,cpu_mode,park_brake,pitch_brake,generator_trip,scan")
LOCKSTEP_TIMEOUT = 1.0  # wall seconds to wait for a datagram before giving up on it
MIN_WATCHDOG_PERIOD = 0.05  # wall seconds; below this scheduler jitter fakes staleness
DRAIN_TIMEOUT = 2.0


def build_wind(cfg: ScenarioConfig, events=None):
    path = cfg.profile_path()
    profile = WindProfile.load(path) if path is not None else WindProfile.constant(cfg.wind.constant)
    if cfg.wind.mode == "live":
        source = LiveWindSource(
            GeoPoint(cfg.wind.latitude, cfg.wind.longitude), cfg.wind.endpoint, cfg.wind.field_path,
            profile, events=events, fetch_period=cfg.wind.fetch_period, altitude=cfg.wind.altitude,
            extra_params=cfg.wind.params,
        )
    else:
        source = ReplayWindSource(profile)
    return PerturbedWind(source, cfg.seed, cfg.wind.sigma)


class Honeynet:
    def __init__(self, cfg: ScenarioConfig, run_dir, clock=time.monotonic):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.step_index = 0
        self.events = EventLog(self.run_dir / "events.log", sim_clock=lambda: self.sim_time)
        self.controller = Controller(cfg.controller, self.events)
        ctl = cfg.controller
        self.sim = SimEndpoint(ctl.full_scale_wind, ctl.full_scale_rotor, self.events)
        scan_s = ctl.scan_period / 1000.0
        period = max(scan_s / cfg.time_scale, MIN_WATCHDOG_PERIOD) if cfg.time_scale > 0 else scan_s
        self.bridge = FieldBridge(self.controller, self.events, period=period, clock=clock,
                                  noise_sigma=cfg.adc_noise, seed=cfg.seed + 1)
        self.wind = build_wind(cfg, self.events)
        self.state = TurbineState()
        self.v_wind = 0.0
        self.registry = PeerRegistry()
        self.capture: PcapWriter | None = None
        self.proxy: TransparentProxy | None = None
        self.servers = {}
        self.ports: dict[str, int] = {}
        self.stop_event = asyncio.Event()
        self._trace = None
        self._t0 = None
        self._sim_t0 = 0.0
        self.started = False

    @property
    def sim_time(self) -> float:
        return self.step_index * self.cfg.plant_dt

    @property
    def snapshot(self):
        return self.controller.snapshot

    # --- lifecycle --------------------------------------------------------

    async def start(self) -> dict[str, int]:
        cfg, net = self.cfg, self.cfg.network
        try:
            self.capture = PcapWriter(self.run_dir / "capture.pcap", self.events)
            self._trace = open(self.run_dir / "trace.csv", "w", encoding="utf-8", newline="\n")
            self._trace.write(TRACE_HEADER + "\n")
            if net.fieldbus == "loopback":
                self.sim.send = self.bridge.handle_network_data
                self.bridge.send = self.sim.datagram_received
            else:
                tel = await self.bridge.serve(net.services_host, net.telemetry_port, watchdog=cfg.time_scale > 0)
                ctl_addr = await self.sim.serve(net.services_host, net.control_port, tel)
                self.bridge.peer_addr = ctl_addr
                self.ports["telemetry"], self.ports["control"] = tel[1], ctl_addr[1]
            host = net.services_host
            self.servers["modbus"] = ModbusServer(self.controller, self.events, self.registry,
                                                  host, net.services["modbus"])
            self.servers["s7"] = S7Server(self.controller, cfg.identity, self.events, self.registry,
                                          host, net.services["s7"])
            self.servers["web"] = DecoyWebServer(self.controller, cfg.identity, self.events, self.registry,
                                                 host, net.services["web"], cfg.writable_registers)
            internal = {}
            for name, server in self.servers.items():
                internal[name] = await server.start()
            routes = [Route(name, net.expose[name], host, internal[name]) for name in net.expose]
            routes += [Route(name, spec["listen"], spec["upstream_host"], spec["upstream_port"])
                       for name, spec in net.extra.items()]
            self.proxy = TransparentProxy(routes, self.capture, self.events, net.bind, self.registry)
            self.ports.update(await self.proxy.start())
        except Exception as exc:
            self.events.emit("orchestrator", "startup_failed", severity="error", error=str(exc))
            await self.stop(write_report=False)
            raise
        self.started = True
        self.events.emit("orchestrator", "run_start", seed=cfg.seed, time_scale=cfg.time_scale,
                         duration=cfg.duration, ports=dict(self.ports))
        return dict(self.ports)

    async def stop(self, write_report: bool = True) -> None:
        self.stop_event.set()
        if self.proxy is not None:
            try:
                await asyncio.wait_for(self.proxy.stop(), DRAIN_TIMEOUT)
            except asyncio.TimeoutError:
                logger.warning("proxy drain timed out")
            self.proxy = None
        for server in self.servers.values():
            try:
                await asyncio.wait_for(server.stop(), DRAIN_TIMEOUT)
            except asyncio.TimeoutError:
                logger.warning("service drain timed out")
        self.servers = {}
        self.bridge.close()
        self.sim.close()
        if self.started:
            self.events.emit("orchestrator", "run_stop", steps=self.step_index, sim_time=round(self.sim_time, 6))
            self.started = False
        if self.capture is not None:
            self.capture.close()
        if self._trace is not None:
            self._trace.close()
            self._trace = None
        self.events.close()
        if write_report:
            from .report import build_report
            rep = build_report(self.run_dir)
            (self.run_dir / "report.txt").write_text(rep.render(), encoding="utf-8")

    async def __aenter__(self):
        await self.start()
        return self

    async def __aexit__(self, *exc):
        await self.stop()

    # --- kernel -----------------------------------------------------------

    async def _await(self, cond, what: str) -> None:
        if cond():
            return
        deadline = self.clock() + LOCKSTEP_TIMEOUT
        while not cond():
            if self.clock() > deadline:
                self.events.emit("orchestrator", "lockstep_timeout", severity="warning", waiting_for=what)
                return
            await asyncio.sleep(0)

    async def _scan_tick(self) -> None:
        sent = self.bridge.rx_count + self._pending_tx()
        self.sim.publish(self.v_wind, self.state.w_rotor, self.state.faults.bitfield)
        await self._await(lambda: self.bridge.rx_count >= sent, "telemetry")
        self.controller.scan()
        await self._await(lambda: self.sim.rx_count >= self.bridge.tx_count, "controls")

    def _pending_tx(self) -> int:
        # datagrams the next publish will send: status (on fault change) + telemetry
        return 1 + (self.state.faults.bitfield != self.sim.fault_bits)

    async def step(self) -> TurbineState:
        cfg = self.cfg
        k = self.step_index
        self.v_wind = self.wind.sample(self.sim_time).v_wind
        if k % cfg.steps_per_scan == 0:
            await self._scan_tick()
        before = self.state.faults
        self.state = plant_step(self.state, self.v_wind, self.sim.controls, cfg.plant_dt, cfg.plant)
        self.step_index += 1
        if self.state.faults != before:
            fresh = FaultFlags.from_bitfield(self.state.faults.bitfield & ~before.bitfield)
            self.events.emit("plant", "plant_fault", severity="alarm", faults=fresh.names(),
                             w_rotor=round(self.state.w_rotor, 4))
        self._write_trace()
        return self.state

    def _write_trace(self) -> None:
        if self._trace is None:
            return
        s, img = self.state, self.controller.snapshot
        c = self.sim.controls
        self._trace.write(
            f"{self.step_index},{self.sim_time:.3f},{self.v_wind:.6f},{s.w_rotor:.6f},{s.pitch:.4f},"
            f"{s.power_out:.3f},{int(s.generator_connected)},{s.faults.bitfield},{int(img.fsm_state)},"
            f"{img.cpu_mode.value},{c.park_brake},{c.pitch_brake},{c.generator_trip},{img.scan_count}\n"
        )

    async def _pace(self) -> None:
        scale = self.cfg.time_scale
        if scale <= 0:
            await asyncio.sleep(0)
            return
        if self._t0 is None:
            self._t0, self._sim_t0 = self.clock(), self.sim_time
        target = self._t0 + (self.sim_time - self._sim_t0) / scale
        delay = target - self.clock()
        await asyncio.sleep(delay if delay > 0 else 0)

    async def run_for(self, seconds: float) -> None:
        steps = round(seconds / self.cfg.plant_dt)
        for _ in range(steps):
            if self.stop_event.is_set():
                break
            await self.step()
            if self.step_index % self.cfg.steps_per_scan == 0:
                await self._pace()

    async def run_until(self, predicate, max_seconds: float) -> bool:
        """Step until ``predicate(self)`` holds; False if time ran out."""
        steps = round(max_seconds / self.cfg.plant_dt)
        for _ in range(steps):
            if predicate(self):
                return True
            if self.stop_event.is_set():
                return False
            await self.step()
            if self.step_index % self.cfg.steps_per_scan == 0:
                await self._pace()
        return predicate(self)

    async def run(self) -> None:
        if self.cfg.duration > 0:
            await self.run_for(self.cfg.duration)
            return
        while not self.stop_event.is_set():
            await self.run_for(self.cfg.controller.scan_period / 1000.0)


async def _run(cfg: ScenarioConfig, run_dir) -> int:
    net = Honeynet(cfg, run_dir)
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, net.stop_event.set)
        except (NotImplementedError, RuntimeError):
            pass
    await net.start()
    try:
        await net.run()
    finally:
        await net.stop()
    return 0


def run_scenario(cfg: ScenarioConfig, run_dir) -> int:
    """Blocking entry point used by the CLI.  Returns a process exit status."""
    try:
        return asyncio.run(_run(cfg, run_dir))
    except OSError as exc:
        logger.error("startup failed: %s", exc)
        return 2

