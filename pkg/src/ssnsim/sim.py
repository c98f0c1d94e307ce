"""Scenario files and the simulation that binds nodes, network and controller.

Scenario grammar, one directive per line (``#`` starts a comment)::

    node <id> <role> [parent=<id>] [fw=<id>] [intervals=TEMP:5,HUM:10]
                     [sd=1,3,7|all] [battery=<pct>] [listen=<min>] [serial=<bps>]
    link <id> <id>
    arrive <t_s> <app> [<interval_s>] [activity=<s>]
    depart <t_s> <app>
    pir <t_s> <node_id>
    pirgen <node_id> <count>
    battery <t_s> <node_id> <pct>
    duration <s>
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import energy, proto
from .controller import Controller
from .energy import Role
from .errors import ScenarioParseError
from .netsim import (
    BUFFERED,
    Engine,
    EventKind,
    LinkModel,
    Network,
    NodeSpec,
    Topology,
    descriptor_for,
    image_size,
    ota_transfer,
)
from .node import RESTART_LATENCY_MS, Mode, Node
from .proto import AppConfig, AppKind
from .store import Store


@dataclass
class NodeDecl:
    node_id: int
    role: Role
    parent: int | None = None
    firmware: int | None = None
    intervals: dict = field(default_factory=dict)
    sd: tuple = ()
    battery_pct: float = 100.0
    listen: int = 1
    serial: int | None = None


@dataclass
class Scenario:
    name: str = "scenario"
    nodes: list[NodeDecl] = field(default_factory=list)
    links: list[tuple[int, int]] = field(default_factory=list)
    arrivals: list[tuple[int, AppKind, int | None, int | None]] = field(default_factory=list)
    departures: list[tuple[int, AppKind]] = field(default_factory=list)
    pir: list[tuple[int, int]] = field(default_factory=list)
    pirgen: list[tuple[int, int]] = field(default_factory=list)
    battery: list[tuple[int, int, float]] = field(default_factory=list)
    duration_s: int | None = None

    @property
    def empty(self) -> bool:
        return not self.nodes


def _kv(tokens, lineno):
    out = {}
    for t in tokens:
        k, sep, v = t.partition("=")
        if not sep or not v:
            raise ScenarioParseError(lineno, f"expected key=value, got {t!r}")
        out[k] = v
    return out


def _int(text, lineno, what):
    try:
        return int(text)
    except ValueError:
        raise ScenarioParseError(lineno, f"{what} must be an integer, got {text!r}") from None


def _seconds_ms(text, lineno):
    try:
        v = float(text)
    except ValueError:
        raise ScenarioParseError(lineno, f"time must be a number of seconds, got {text!r}") from None
    if v < 0:
        raise ScenarioParseError(lineno, "time must be >= 0")
    return int(round(v * 1000))


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    sc = Scenario(name)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, *args = line.split()
        try:
            if word == "node":
                if len(args) < 2:
                    raise ScenarioParseError(lineno, "node needs <id> <role>")
                decl = NodeDecl(_int(args[0], lineno, "node id"), Role.parse(args[1]))
                for k, v in _kv(args[2:], lineno).items():
                    if k == "parent":
                        decl.parent = _int(v, lineno, "parent")
                    elif k == "fw":
                        decl.firmware = proto.check_firmware(_int(v, lineno, "fw"))
                    elif k == "intervals":
                        for item in v.split(","):
                            tag, _, iv = item.partition(":")
                            kind = AppKind.parse(tag)
                            decl.intervals.setdefault(kind, []).append(_int(iv, lineno, "interval"))
                    elif k == "sd":
                        decl.sd = tuple(range(1, 16)) if v == "all" else tuple(
                            proto.check_firmware(_int(x, lineno, "sd")) for x in v.split(","))
                    elif k == "battery":
                        decl.battery_pct = float(v)
                    elif k == "listen":
                        decl.listen = _int(v, lineno, "listen")
                    elif k == "serial":
                        decl.serial = _int(v, lineno, "serial")
                    else:
                        raise ScenarioParseError(lineno, f"unknown node option {k!r}")
                sc.nodes.append(decl)
            elif word == "link":
                if len(args) != 2:
                    raise ScenarioParseError(lineno, "link needs two node ids")
                sc.links.append((_int(args[0], lineno, "node id"), _int(args[1], lineno, "node id")))
            elif word == "arrive":
                if len(args) < 2:
                    raise ScenarioParseError(lineno, "arrive needs <t_s> <app> [interval]")
                t = _seconds_ms(args[0], lineno)
                kind = AppKind.parse(args[1])
                rest = args[2:]
                interval = None
                if rest and "=" not in rest[0]:
                    interval = None if rest[0] == "-" else _int(rest[0], lineno, "interval")
                    rest = rest[1:]
                opts = _kv(rest, lineno)
                activity = _seconds_ms(opts.pop("activity"), lineno) if "activity" in opts else None
                if opts:
                    raise ScenarioParseError(lineno, f"unknown arrive option {next(iter(opts))!r}")
                AppConfig(kind, interval)
                sc.arrivals.append((t, kind, interval, activity))
            elif word == "depart":
                if len(args) != 2:
                    raise ScenarioParseError(lineno, "depart needs <t_s> <app>")
                sc.departures.append((_seconds_ms(args[0], lineno), AppKind.parse(args[1])))
            elif word == "pir":
                if len(args) != 2:
                    raise ScenarioParseError(lineno, "pir needs <t_s> <node_id>")
                sc.pir.append((_seconds_ms(args[0], lineno), _int(args[1], lineno, "node id")))
            elif word == "pirgen":
                if len(args) != 2:
                    raise ScenarioParseError(lineno, "pirgen needs <node_id> <count>")
                sc.pirgen.append((_int(args[0], lineno, "node id"), _int(args[1], lineno, "count")))
            elif word == "battery":
                if len(args) != 3:
                    raise ScenarioParseError(lineno, "battery needs <t_s> <node_id> <pct>")
                sc.battery.append((_seconds_ms(args[0], lineno), _int(args[1], lineno, "node id"),
                                   float(args[2])))
            elif word == "duration":
                if len(args) != 1:
                    raise ScenarioParseError(lineno, "duration needs <s>")
                sc.duration_s = _int(args[0], lineno, "duration")
            else:
                raise ScenarioParseError(lineno, f"unknown directive {word!r}")
        except ScenarioParseError:
            raise
        except ValueError as e:
            raise ScenarioParseError(lineno, str(e)) from None
    return sc


BUNDLED = ("schedule_demo", "realloc_demo", "ota_demo", "enddevice_demo", "mesh_demo")


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario file, or a bundled one by name."""
    p = Path(ref)
    if p.exists():
        return parse_scenario(p.read_text(), p.stem)
    name = str(ref)
    if name.endswith(".scn"):
        name = name[:-4]
    res = resources.files("ssnsim.data.scenarios").joinpath(f"{name}.scn")
    if not res.is_file():
        raise FileNotFoundError(f"no scenario file or bundled scenario named {ref!r}")
    return parse_scenario(res.read_text(), name)


@dataclass
class SimResult:
    log: list[str]
    violations: list[str]
    nodes: dict[int, Node]
    store: Store
    controller: Controller
    network: Network

    @property
    def text(self) -> str:
        return "".join(line + "\n" for line in self.log)

    @property
    def ok(self) -> bool:
        return not self.violations


class Simulation:
    def __init__(self, scenario: Scenario, draws: energy.CurrentDraws | None = None,
                 link: LinkModel = LinkModel(), seed: int = 0, data_dir=None):
        self.scenario = scenario
        self.seed = seed
        self.draws = draws or energy.CurrentDraws()
        self.link = link
        self.engine = Engine()
        self.violations: list[str] = []
        self.nodes: dict[int, Node] = {}
        self.store = Store(data_dir)
        self._alarm_events: dict[tuple[int, str], object] = {}
        self._window_events: dict[int, object] = {}
        self._reported_errors: dict[int, int] = {}
        if scenario.empty:
            self.topo = None
            self.network = None
            self.controller = Controller(self.store, self._ctrl_send, self._log, self.draws)
            return
        specs = [NodeSpec(d.node_id, d.role, d.parent, d.serial) for d in scenario.nodes]
        self.topo = Topology(specs, scenario.links)
        self.coord = self.topo.coordinator
        self.network = Network(self.topo, self.engine, link, is_awake=self._awake)
        self.controller = Controller(self.store, self._ctrl_send, self._log, self.draws, self.coord)
        for d in scenario.nodes:
            if d.role is Role.COORDINATOR:
                continue
            n = Node(d.node_id, d.role, listen_interval=d.listen, draws=self.draws)
            n.battery_mah = n.battery_capacity * d.battery_pct / 100.0
            n.preload(sorted(set(d.sd) | ({d.firmware} if d.firmware else set())))
            self.nodes[d.node_id] = n

    # --- plumbing ------------------------------------------------------

    def _log(self, kind, src="-", dst="-", detail=""):
        self.engine.log(kind, src, dst, detail)

    def _awake(self, node_id: int, t: int) -> bool:
        n = self.nodes.get(node_id)
        return True if n is None else n.awake_at(t)

    def _node_send(self, n: Node, frame: proto.Frame) -> None:
        if n.mode is Mode.SLEEPING:
            self.violations.append(f"{self.engine.now}: node {n.node_id} transmitted while sleeping")
        self.network.deliver(frame, n.node_id, self.coord)

    def _ctrl_send(self, frame: proto.Frame, dst: int) -> None:
        n = self.nodes[dst]
        if not n.accepting(self.engine.now):
            self.violations.append(f"{self.engine.now}: controller frame to node {dst} outside listen window")
        self.network.deliver(frame, self.coord, dst)

    def _sync(self, n: Node) -> None:
        for key, t, kind in (("a1", n.alarm1_next, EventKind.ALARM1), ("a2", n.alarm2_next, EventKind.ALARM2)):
            ev = self._alarm_events.get((n.node_id, key))
            if ev is not None and not ev.cancelled and ev.time == t:
                continue
            if ev is not None:
                ev.cancelled = True
            if t is not None and t >= self.engine.now:
                self._alarm_events[(n.node_id, key)] = self.engine.at(t, kind, n.node_id)
            else:
                self._alarm_events.pop((n.node_id, key), None)
        errs = n.errors[self._reported_errors.get(n.node_id, 0):]
        for t, msg in errs:
            self._log("NODEERR", n.node_id, "-", msg)
        self._reported_errors[n.node_id] = len(n.errors)
        for v in n.check():
            self.violations.append(f"{self.engine.now}: {v}")

    # --- event dispatch ------------------------------------------------

    def _dispatch(self, e) -> None:
        now = self.engine.now
        k = e.kind
        n = self.nodes.get(e.node) if e.node is not None else None
        if k == EventKind.SETUP:
            decl = e.payload
            cfgs = [AppConfig(kind, i) for kind, ivs in decl.intervals.items() for i in ivs]
            info = n.on_setup(now, decl.firmware, cfgs)
            self.controller.register_node(n.node_id, n.battery_pct, n.listen_interval, n.sd_store)
            self._log("SETUP", n.node_id, "-", n.snapshot())
            if info is not None:
                self._node_send(n, info)
            n.settle(now)
        elif k == EventKind.ALARM1:
            if n.alarm1_next != now:
                return
            pos = n.schedule.event_at(now - n.anchor_ms)[1] if n.schedule else -1
            frame = n.on_alarm1(now)
            if frame is not None:
                idx = proto.firmware_of(frame.readings)
                self._log("SENSE", n.node_id, "-", f"idx={idx} pos={pos}")
                self._node_send(n, frame)
            n.settle(now)
        elif k == EventKind.ALARM2:
            if n.alarm2_next != now:
                return
            frames = n.on_alarm2(now)
            for f in frames:
                self._node_send(n, f)
            if frames and n.window_end is not None:
                self.network.wake(n.node_id)
                self._window_events[n.node_id] = self.engine.at(n.window_end, EventKind.WINDOW_CLOSE, n.node_id)
        elif k == EventKind.WINDOW_CLOSE:
            if n.window_end != now:
                return
            n.on_window_close(now)
        elif k == EventKind.FRAME_ARRIVAL:
            item = e.payload
            self.network.arrived(item)
            if e.node == self.coord:
                self.controller.on_frame(now, item.src, item.frame)
            else:
                self._node_frame(n, item.frame)
        elif k == EventKind.TRANSFER_COMPLETE:
            for f in n.on_transfer_complete(now):
                self._node_send(n, f)
            n.on_window_close(now)
        elif k == EventKind.REBOOT_DONE:
            info = n.on_reboot_done(now)
            self._log("REBOOT", n.node_id, "-", n.snapshot())
            if info is not None:
                self._node_send(n, info)
            n.settle(now)
        elif k == EventKind.PIR_DETECT:
            frame = n.on_pir(now)
            if frame is not None:
                self._log("SENSE", n.node_id, "-", "idx=8 pir=1")
                self._node_send(n, frame)
            n.reprogram_alarms(now)
            n.settle(now)
        elif k == EventKind.APP_ARRIVAL:
            kind, interval, activity = e.payload
            req = self.controller.new_request(kind, interval, now, activity)
            target = self.controller.on_request(now, req)
            if target is not None and activity is not None:
                self.engine.at(now + activity, EventKind.APP_DEPARTURE, None, req.request_id)
        elif k == EventKind.APP_DEPARTURE:
            if isinstance(e.payload, AppKind):
                self.controller.departure_by_kind(now, e.payload)
            else:
                self.controller.on_departure(now, e.payload)
        elif k == EventKind.BATTERY_OVERRIDE:
            pct = e.payload
            n.account(now)
            n.battery_mah = n.battery_capacity * pct / 100.0
            self._log("BATTERY", n.node_id, "-", f"forced={pct:g}%")
        if n is not None:
            self._sync(n)

    def _node_frame(self, n: Node, frame: proto.Frame) -> None:
        now = self.engine.now
        replies = n.on_frame(now, frame)
        for f in replies:
            self._node_send(n, f)
        if isinstance(frame, proto.OtaSend) and n.transferring == frame.firmware:
            hops = self.topo.hop_count(self.coord, n.node_id)
            size = None if frame.size_bytes == image_size(frame.firmware) else frame.size_bytes
            desc = descriptor_for(frame.firmware, hops, size, self.link)
            res = ota_transfer(desc, self.link, self.topo.nodes[self.coord].serial_bps,
                               self.topo.nodes[n.node_id].serial_bps)
            done = now + int(round(res.duration * 1000))
            self._log("OTA", self.coord, n.node_id,
                      f"fw={frame.firmware} frames={desc.frames} bytes={desc.bytes_sent} "
                      f"duration_ms={done - now} rate_bps={res.effective_rate:.1f}")
            self.engine.at(done, EventKind.TRANSFER_COMPLETE, n.node_id)
        elif isinstance(frame, proto.OtaStart) and n.mode is Mode.REBOOTING:
            self.engine.at(now + RESTART_LATENCY_MS, EventKind.REBOOT_DONE, n.node_id)

    # --- driver --------------------------------------------------------

    def _seed_events(self, duration_ms: int) -> None:
        sc = self.scenario
        for d in sc.nodes:
            if d.role is not Role.COORDINATOR:
                self.engine.at(0, EventKind.SETUP, d.node_id, d)
        for t, kind, interval, activity in sc.arrivals:
            self.engine.at(t, EventKind.APP_ARRIVAL, None, (kind, interval, activity))
        for t, kind in sc.departures:
            self.engine.at(t, EventKind.APP_DEPARTURE, None, kind)
        for t, nid, pct in sc.battery:
            self._require_node(nid)
            self.engine.at(t, EventKind.BATTERY_OVERRIDE, nid, pct)
        pir = list(sc.pir)
        rng = np.random.default_rng(self.seed)
        for nid, count in sc.pirgen:
            times = np.sort(rng.integers(0, max(1, duration_ms), size=count))
            pir += [(int(t), nid) for t in times]
        for t, nid in sorted(pir):
            self._require_node(nid)
            self.engine.at(t, EventKind.PIR_DETECT, nid)

    def _require_node(self, nid: int) -> None:
        if nid not in self.nodes:
            raise ScenarioParseError(0, f"scenario references unknown sensor node {nid}")

    def run(self, duration_s: float | None = None) -> SimResult:
        dur = duration_s if duration_s is not None else (self.scenario.duration_s or 600)
        duration_ms = int(round(dur * 1000))
        if self.network is None:
            self.engine.run_until(duration_ms, self._dispatch)
            return SimResult(self.engine.log_lines, [], {}, self.store, self.controller, None)
        self.engine.log_lines.append(f"# ssnsim event log scenario={self.scenario.name} seed={self.seed} duration_ms={duration_ms}")
        self._seed_events(duration_ms)
        self.engine.run_until(duration_ms, self._dispatch)
        self.network.finish()
        for n in self.nodes.values():
            n.account(duration_ms)
        self._final_checks()
        self.store.flush()
        return SimResult(self.engine.log_lines, self.violations, self.nodes, self.store,
                         self.controller, self.network)

    def _final_checks(self) -> None:
        if not self.network.conserved():
            self.violations.append("frame conservation violated")
        self.violations += check_end_device_isolation(self.engine.log_lines, self.topo)
        self.violations += self.store.validate()
        for nid, n in self.nodes.items():
            if self.controller.busy(nid) or self.controller.queues.get(nid):
                continue
            row = self.store.devices.get(nid)
            if row is None:
                continue
            if n.mode is Mode.REBOOTING or n.transferring is not None:
                continue
            if row.firmware_id != n.running_firmware:
                self.violations.append(f"store says node {nid} runs {row.firmware_id}, node runs {n.running_firmware}")
            actual = n.schedule.app_intervals() if n.schedule else {}
            if {k: tuple(v) for k, v in row.intervals.items()} != actual:
                self.violations.append(f"store intervals for node {nid} disagree with node schedule")


def check_end_device_isolation(lines, topo: Topology) -> list[str]:
    """Every hop touching an end device must be its parent link."""
    bad = []
    for line in lines:
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 5 or parts[1] not in ("TX", "FLUSH"):
            continue
        path = next((f[5:] for f in parts[4].split() if f.startswith("path=")), None)
        if path is None:
            continue
        hops = [int(x) for x in path.split(">")]
        for a, b in zip(hops, hops[1:]):
            for x, y in ((a, b), (b, a)):
                spec = topo.nodes[x]
                if spec.role is Role.END_DEVICE and spec.parent != y:
                    bad.append(f"end device {x} used non-parent link {a}>{b}: {line}")
    return bad


def run_scenario(ref, duration_s=None, seed=0, data_dir=None, draws=None) -> SimResult:
    sc = load_scenario(ref) if not isinstance(ref, Scenario) else ref
    return Simulation(sc, draws=draws, seed=seed, data_dir=data_dir).run(duration_s)


__all__ = [
    "BUFFERED", "Scenario", "NodeDecl", "Simulation", "SimResult",
    "parse_scenario", "load_scenario", "run_scenario", "check_end_device_isolation",
]
