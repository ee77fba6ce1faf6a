"""Embedded-style diagnostic web panel, deliberately unauthenticated.

Paths (plain HTML, no scripting):

    GET  /       status page
    POST /cpu    form field ``mode`` = RUN | STOP
    POST /poke   form fields ``addr``, ``value`` (holding register, writable window only)
    POST /coil   form fields ``addr``, ``value`` (0/1)

Every state-changing request is logged once as ``web_action`` with the
peer address, whether or not it was accepted.
"""

from __future__ import annotations

import enum
import html
import logging
import time
from dataclasses import dataclass, field

from aiohttp import web

from .controller import (
    HR_FAULTS, HR_POWER, HR_ROTOR, HR_STATE, HR_WIND, N_COILS, N_REGISTERS,
    CpuMode, FsmState, WriteCoils, WriteRegisters,
)
from .s7lite import DeviceIdentity

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = (5, 15)
SERVER_HEADER = "WebServer"


class ActionKind(enum.Enum):
    VIEW_STATUS = "ViewStatus"
    SET_CPU_MODE = "SetCpuMode"
    WRITE_REGISTER = "WriteRegister"
    WRITE_COIL = "WriteCoil"


@dataclass(frozen=True)
class PanelAction:
    kind: ActionKind
    target: int | None
    value: object
    peer: str
    timestamp: float = field(default_factory=time.time)


class PanelError(ValueError):
    pass


def _page(title: str, body: str) -> str:
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(title)}</title>"
        "<style>body{font-family:Arial,sans-serif;font-size:12px;background:#f0f0f0}"
        "table{border-collapse:collapse}td,th{border:1px solid #999;padding:2px 8px}"
        "h1{font-size:16px;background:#00557f;color:#fff;padding:4px}</style></head>"
        f"<body><h1>{html.escape(title)}</h1>{body}</body></html>\n"
    )


def _parse_int(raw, name: str) -> int:
    try:
        return int(str(raw).strip(), 0)
    except (TypeError, ValueError):
        raise PanelError(f"{name} must be an integer") from None


class Panel:
    """Request logic without the HTTP layer."""

    def __init__(self, controller, identity: DeviceIdentity | None = None, events=None,
                 writable=DEFAULT_WINDOW):
        self.controller = controller
        self.identity = identity or DeviceIdentity()
        self.events = events
        lo, hi = writable
        if not 0 <= lo <= hi < N_REGISTERS:
            raise ValueError(f"writable window {writable} outside the register map")
        self.writable = (lo, hi)
        self.actions: list[PanelAction] = []

    def _log(self, action: PanelAction, accepted: bool, error: str | None = None) -> None:
        self.actions.append(action)
        if self.events is None:
            return
        attrs = dict(action=action.kind.value, peer=action.peer, target=action.target,
                     value=action.value, accepted=accepted)
        if error:
            attrs["error"] = error
        self.events.emit("decoyweb", "web_action", severity="warning", **attrs)

    def status_page(self, peer: str) -> str:
        img = self.controller.snapshot
        if self.events is not None:
            self.events.emit("decoyweb", "web_view", peer=peer, path="/")
        regs = img.holding_registers
        try:
            state = FsmState(regs[HR_STATE]).label
        except ValueError:
            state = f"unknown ({regs[HR_STATE]})"
        ident = self.identity
        rows = [
            ("Operating state", state),
            ("Rotor speed", f"{regs[HR_ROTOR] / 100:.2f} rad/s"),
            ("Wind speed", f"{regs[HR_WIND] / 100:.2f} m/s"),
            ("Power", f"{regs[HR_POWER]} kW"),
            ("Fault word", f"0x{regs[HR_FAULTS]:04X}"),
            ("CPU mode", img.cpu_mode.value),
        ]
        info = [
            ("Module", ident.module_type),
            ("Order number", ident.order_number),
            ("Serial number", ident.serial),
            ("Firmware", ident.firmware_version),
            ("Plant designation", ident.plant_id),
        ]

        def table(items):
            return "<table>" + "".join(
                f"<tr><th>{html.escape(k)}</th><td>{html.escape(str(v))}</td></tr>" for k, v in items
            ) + "</table>"

        regs_html = "<table><tr><th>Register</th><th>Value</th></tr>" + "".join(
            f"<tr><td>HR{i}</td><td>{v}</td></tr>" for i, v in enumerate(regs)
        ) + "</table>"
        coils_html = "<table><tr><th>Coil</th><th>State</th></tr>" + "".join(
            f"<tr><td>{i}</td><td>{'ON' if c else 'OFF'}</td></tr>" for i, c in enumerate(img.coils)
        ) + "</table>"
        lo, hi = self.writable
        forms = (
            "<h2>CPU</h2><form method=\"post\" action=\"/cpu\"><select name=\"mode\">"
            "<option>RUN</option><option>STOP</option></select> <input type=\"submit\" value=\"Apply\"></form>"
            f"<h2>Memory</h2><form method=\"post\" action=\"/poke\">HR <input name=\"addr\" size=\"3\"> "
            f"({lo}..{hi}) value <input name=\"value\" size=\"6\"> <input type=\"submit\" value=\"Write\"></form>"
            "<form method=\"post\" action=\"/coil\">Coil <input name=\"addr\" size=\"3\"> value "
            "<input name=\"value\" size=\"2\"> <input type=\"submit\" value=\"Force\"></form>"
        )
        body = (
            "<h2>Diagnostics</h2>" + table(rows) + "<h2>Identification</h2>" + table(info)
            + "<h2>Holding registers</h2>" + regs_html + "<h2>Outputs</h2>" + coils_html + forms
        )
        return _page(f"{ident.module_type} - {ident.plant_id}", body)

    def cpu_command(self, mode_raw, peer: str) -> str:
        text = str(mode_raw or "").strip().upper()
        action = PanelAction(ActionKind.SET_CPU_MODE, None, text or str(mode_raw), peer)
        try:
            mode = CpuMode(text)
        except ValueError:
            self._log(action, False, f"unknown mode {mode_raw!r}")
            raise PanelError(f"unknown CPU mode {mode_raw!r}") from None
        self.controller.set_cpu_mode(mode, source=f"web {peer}")
        self._log(action, True)
        return _page("CPU mode", f"<p>CPU mode change to <b>{mode.value}</b> requested.</p><a href=\"/\">Back</a>")

    def register_poke(self, addr_raw, value_raw, peer: str) -> str:
        action = PanelAction(ActionKind.WRITE_REGISTER, None, str(value_raw), peer)
        try:
            addr = _parse_int(addr_raw, "addr")
            value = _parse_int(value_raw, "value")
            action = PanelAction(ActionKind.WRITE_REGISTER, addr, value, peer, action.timestamp)
            lo, hi = self.writable
            if not lo <= addr <= hi:
                raise PanelError(f"address {addr} outside writable window HR{lo}..HR{hi}")
            if not 0 <= value <= 0xFFFF:
                raise PanelError("value must fit in 16 bits")
        except PanelError as exc:
            self._log(action, False, str(exc))
            raise
        self.controller.submit(WriteRegisters(addr, (value,), source=f"web {peer}"))
        self._log(action, True)
        return _page("Memory", f"<p>HR{addr} := {value}</p><a href=\"/\">Back</a>")

    def coil_write(self, addr_raw, value_raw, peer: str) -> str:
        action = PanelAction(ActionKind.WRITE_COIL, None, str(value_raw), peer)
        try:
            addr = _parse_int(addr_raw, "addr")
            text = str(value_raw).strip().lower()
            if text not in ("0", "1", "on", "off", "true", "false"):
                raise PanelError("coil value must be 0 or 1")
            value = text in ("1", "on", "true")
            action = PanelAction(ActionKind.WRITE_COIL, addr, int(value), peer, action.timestamp)
            if not 0 <= addr < N_COILS:
                raise PanelError(f"coil {addr} outside 0..{N_COILS - 1}")
        except PanelError as exc:
            self._log(action, False, str(exc))
            raise
        self.controller.submit(WriteCoils(addr, (value,), source=f"web {peer}"))
        self._log(action, True)
        return _page("Outputs", f"<p>Coil {addr} := {'ON' if value else 'OFF'}</p><a href=\"/\">Back</a>")


class DecoyWebServer:
    def __init__(self, controller, identity=None, events=None, registry=None,
                 host: str = "127.0.0.1", port: int = 80, writable=DEFAULT_WINDOW):
        self.panel = Panel(controller, identity, events, writable)
        self.registry = registry
        self.host = host
        self.port = port
        self._runner = None

    def _peer(self, request: web.Request) -> str:
        peer = request.transport.get_extra_info("peername") if request.transport else None
        if self.registry is not None:
            peer = self.registry.resolve(peer)
        return f"{peer[0]}:{peer[1]}" if peer else "unknown"

    def _html(self, text: str, status: int = 200) -> web.Response:
        return web.Response(text=text, status=status, content_type="text/html")

    def _error(self, exc: Exception) -> web.Response:
        return self._html(_page("Error", f"<p>{html.escape(str(exc))}</p><a href=\"/\">Back</a>"), 400)

    async def index(self, request):
        return self._html(self.panel.status_page(self._peer(request)))

    async def cpu(self, request):
        form = await request.post()
        try:
            return self._html(self.panel.cpu_command(form.get("mode"), self._peer(request)))
        except PanelError as exc:
            return self._error(exc)

    async def poke(self, request):
        form = await request.post()
        try:
            return self._html(self.panel.register_poke(form.get("addr"), form.get("value"), self._peer(request)))
        except PanelError as exc:
            return self._error(exc)

    async def coil(self, request):
        form = await request.post()
        try:
            return self._html(self.panel.coil_write(form.get("addr"), form.get("value"), self._peer(request)))
        except PanelError as exc:
            return self._error(exc)

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_get("/", self.index)
        app.router.add_post("/cpu", self.cpu)
        app.router.add_post("/poke", self.poke)
        app.router.add_post("/coil", self.coil)

        async def _header(request, response):
            response.headers["Server"] = SERVER_HEADER

        app.on_response_prepare.append(_header)
        return app

    async def start(self) -> int:
        self._runner = web.AppRunner(self.app(), access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port)
        await site.start()
        self.port = site._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None
