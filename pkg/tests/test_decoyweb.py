import re

import aiohttp
import pytest
from hypothesis import given, settings, strategies as st

from conftest import run
from honeyturbine.controller import Controller, ControllerConfig, CpuMode, ProcessImage, WriteRegisters, scan_cycle
from honeyturbine.decoyweb import SERVER_HEADER, ActionKind, DecoyWebServer, Panel, PanelError
from honeyturbine.modbus import ModbusService, parse_mbap, read_holding_request
from honeyturbine.proxycap import EventLog
from honeyturbine.s7lite import DeviceIdentity

PEER = "198.51.100.7:51515"


@pytest.fixture
def events():
    return EventLog()


@pytest.fixture
def ctl(events):
    return Controller(events=events)


@pytest.fixture
def panel(ctl, events):
    return Panel(ctl, DeviceIdentity(plant_id="WTG-99"), events)


def cell(page, label):
    m = re.search(rf"<th>{re.escape(label)}</th><td>([^<]*)</td>", page)
    return m.group(1) if m else None


class TestStatusPage:
    def test_fresh_boot(self, panel):
        page = panel.status_page(PEER)
        assert cell(page, "Operating state") == "ParkBrake"
        assert cell(page, "CPU mode") == "RUN"

    def test_generating(self, events):
        # 409 -> 9.995 m/s, 491 -> 1.1999 rad/s puts a Startup image into Generating
        img = scan_cycle(ProcessImage(analog_in=(409, 491), fsm_state=1), ControllerConfig())
        page = Panel(Controller(image=img), events=events).status_page(PEER)
        assert cell(page, "Operating state") == "Generating"
        assert int(cell(page, "Power").split()[0]) > 0

    def test_identity_strings(self, panel):
        page = panel.status_page(PEER)
        assert cell(page, "Plant designation") == "WTG-99"
        assert cell(page, "Module") == DeviceIdentity().module_type
        assert cell(page, "Serial number") == DeviceIdentity().serial

    def test_no_scripting(self, panel):
        assert "<script" not in panel.status_page(PEER).lower()

    def test_view_is_not_an_action(self, panel, events):
        panel.status_page(PEER)
        assert events.of_kind("web_action") == []
        assert len(events.of_kind("web_view")) == 1


class TestCpuCommand:
    def test_stop(self, panel, ctl, events):
        page = panel.cpu_command("STOP", PEER)
        assert "STOP" in page
        assert ctl.scan().cpu_mode is CpuMode.STOP
        (ev,) = events.of_kind("web_action")
        assert ev.attrs["peer"] == PEER and ev.attrs["accepted"] is True

    def test_run_when_running_still_logged(self, panel, ctl, events):
        panel.cpu_command("run", PEER)
        assert ctl.scan().cpu_mode is CpuMode.RUN
        assert len(events.of_kind("web_action")) == 1

    def test_unknown_mode(self, panel, events):
        with pytest.raises(PanelError):
            panel.cpu_command("FREEZE", PEER)
        (ev,) = events.of_kind("web_action")
        assert ev.attrs["accepted"] is False
        assert ev.attrs["value"] == "FREEZE"


class TestRegisterPoke:
    def test_store_load_coherence(self, panel, ctl):
        panel.register_poke("7", "1234", PEER)
        ctl.scan()
        svc = ModbusService(ctl)
        resp = svc.handle_frame(parse_mbap(read_holding_request(1, 7, 1))[0][0])
        assert resp[-2:] == (1234).to_bytes(2, "big")

    @pytest.mark.parametrize("addr", ["0", "4", "16", "500", "-1", "x"])
    def test_rejected(self, panel, ctl, events, addr):
        with pytest.raises(PanelError):
            panel.register_poke(addr, "9", PEER)
        assert ctl.pending == 0
        assert events.of_kind("web_action")[0].attrs["accepted"] is False

    def test_value_range(self, panel):
        with pytest.raises(PanelError):
            panel.register_poke("5", "70000", PEER)

    def test_hex_accepted(self, panel, ctl):
        panel.register_poke("0x0f", "0x10", PEER)
        assert ctl.scan().holding_registers[15] == 16

    def test_custom_window(self, ctl):
        p = Panel(ctl, writable=(10, 12))
        with pytest.raises(PanelError):
            p.register_poke("9", "1", PEER)
        p.register_poke("12", "1", PEER)

    def test_window_outside_map(self, ctl):
        with pytest.raises(ValueError):
            Panel(ctl, writable=(3, 16))


class TestCoilWrite:
    def test_emergency_stop(self, panel, ctl):
        panel.coil_write("3", "1", PEER)
        img = ctl.scan()
        assert img.coils[3] is True
        assert img.digital_out == (1, 1, 1)

    @pytest.mark.parametrize("addr,value", [("16", "1"), ("2", "maybe")])
    def test_rejected(self, panel, addr, value):
        with pytest.raises(PanelError):
            panel.coil_write(addr, value, PEER)


class TestProperties:
    @settings(max_examples=100)
    @given(ops=st.lists(st.tuples(st.sampled_from(["cpu", "poke", "coil"]), st.text(max_size=6),
                                  st.text(max_size=6)), max_size=15))
    def test_each_change_logged_once_and_owned_registers_untouched(self, ops):
        events = EventLog()
        ctl = Controller(events=events)
        submitted = []
        real_submit = ctl.submit
        ctl.submit = lambda cmd: (submitted.append(cmd), real_submit(cmd))
        panel = Panel(ctl, events=events)
        for kind, a, b in ops:
            try:
                if kind == "cpu":
                    panel.cpu_command(a, PEER)
                elif kind == "poke":
                    panel.register_poke(a, b, PEER)
                else:
                    panel.coil_write(a, b, PEER)
            except PanelError:
                pass
        assert len(events.of_kind("web_action")) == len(ops) == len(panel.actions)
        assert all(cmd.start >= 5 for cmd in submitted if isinstance(cmd, WriteRegisters))

    def test_action_kinds(self, panel):
        panel.cpu_command("STOP", PEER)
        panel.register_poke("5", "1", PEER)
        panel.coil_write("1", "0", PEER)
        assert [a.kind for a in panel.actions] == [ActionKind.SET_CPU_MODE, ActionKind.WRITE_REGISTER,
                                                   ActionKind.WRITE_COIL]


class TestHttp:
    def test_round_trip(self):
        async def scenario():
            events = EventLog()
            ctl = Controller(events=events)
            srv = DecoyWebServer(ctl, events=events, port=0)
            port = await srv.start()
            base = f"http://127.0.0.1:{port}"
            try:
                async with aiohttp.ClientSession() as s:
                    async with s.get(base + "/") as r:
                        index = (r.status, r.headers.get("Server"), await r.text())
                    async with s.post(base + "/cpu", data={"mode": "STOP"}) as r:
                        stop = r.status
                    async with s.post(base + "/poke", data={"addr": "0", "value": "9"}) as r:
                        bad = r.status
                    async with s.get(base + "/missing") as r:
                        missing = r.status
            finally:
                await srv.stop()
            return index, stop, bad, missing, ctl, events

        index, stop, bad, missing, ctl, events = run(scenario())
        assert index[0] == 200 and index[1] == SERVER_HEADER
        assert "ParkBrake" in index[2]
        assert (stop, bad, missing) == (200, 400, 404)
        assert ctl.scan().cpu_mode is CpuMode.STOP
        peers = {e.attrs["peer"] for e in events.of_kind("web_action")}
        assert len(peers) == 1 and next(iter(peers)).startswith("127.0.0.1:")
