import asyncio
import dataclasses
import time
from pathlib import Path

import pytest

from honeyturbine.orchestrator import Honeynet, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

ACCEPTANCE_TITLES = {
    1: "FSM conformance",
    2: "fault thresholds",
    3: "signal chain",
    4: "attack A: web CPU stop",
    5: "attack B: forged FC15",
    6: "protocol conformance",
    7: "proxy transparency",
    8: "reachability",
    9: "determinism",
    10: "parser robustness",
}

_acceptance: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.setdefault(marker.args[0], []).append((item.name, report.outcome, report.duration))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        runs = _acceptance.get(n)
        if not runs:
            terminalreporter.write_line(f"AC{n:<2} NOT RUN  {ACCEPTANCE_TITLES[n]}")
            continue
        ok = all(r[1] == "passed" for r in runs)
        secs = sum(r[2] for r in runs)
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"AC{n:<2} {verdict:<8} {ACCEPTANCE_TITLES[n]} ({len(runs)} checks, {secs:.2f} s)"
        )


def run(coro):
    return asyncio.run(coro)


def scenario_config(name="scripted.yaml", **overrides):
    """Load a shipped config with every exposed port made ephemeral."""
    cfg = load_config(CONFIGS / name)
    net = dataclasses.replace(cfg.network, expose={"web": 0, "s7": 0, "modbus": 0},
                              telemetry_port=0, control_port=0)
    return dataclasses.replace(cfg, network=net, **overrides)


async def against_live(run_dir, attack, warm_until=None, cfg=None, settle=0.0):
    """Start a honeynet, optionally advance it to a state, then attack while it keeps stepping.

    ``settle`` keeps the kernel running for that many simulated seconds after
    the attack returns, so the trace covers its aftermath.
    """
    cfg = cfg or scenario_config()
    net = Honeynet(cfg, run_dir)
    ports = await net.start()
    try:
        if warm_until is not None:
            assert await net.run_until(lambda n: n.snapshot.fsm_state is warm_until and
                                       n.state.w_rotor > 1.1, 100)
        runner = asyncio.create_task(net.run_for(cfg.duration))
        try:
            outcome = await attack(ports, net)
            until = net.sim_time + settle
            while net.sim_time < until and not runner.done():
                await asyncio.sleep(0.005)
        finally:
            net.stop_event.set()
            await runner
    finally:
        await net.stop()
    return outcome, net


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start


@pytest.fixture
def stopwatch():
    return Stopwatch()


@pytest.fixture
def scripted_cfg():
    return scenario_config()
