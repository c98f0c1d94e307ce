"""Deterministic discrete-event engine, ZigBee-style topology and link timing.

Every transmission crosses three kinds of segment: the serial port of the
sending host, one radio hop per edge on the route, and the serial port of
the receiving host. End devices talk only to their parent, which holds
frames for a sleeping child until it wakes.
"""
from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import proto
from .energy import Role
from .errors import BufferOverflow, NoRoute, TimeReversal, TopologyError

NODE_SERIAL_BPS = 115_200
COORDINATOR_SERIAL_BPS = 38_400

FRAME_BYTES = 81
START_COMMAND_BYTES = 19

BUFFERED = "BUFFERED"


# --- topology ---------------------------------------------------------------


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    role: Role
    parent: int | None = None
    serial_rate: int | None = None

    @property
    def serial_bps(self) -> int:
        if self.serial_rate is not None:
            return self.serial_rate
        return COORDINATOR_SERIAL_BPS if self.role is Role.COORDINATOR else NODE_SERIAL_BPS


class Topology:
    """Coordinator/router mesh with end devices hanging off single parents."""

    def __init__(self, nodes: Iterable[NodeSpec], links: Iterable[tuple[int, int]] = ()):
        self.nodes: dict[int, NodeSpec] = {}
        for n in nodes:
            if n.node_id in self.nodes:
                raise TopologyError(f"duplicate node id {n.node_id}")
            self.nodes[n.node_id] = n
        self.adj: dict[int, set[int]] = {i: set() for i in self.nodes}
        for a, b in links:
            self.add_link(a, b)
        self._routes: dict[tuple[int, int], list[int]] = {}
        self.validate()

    def add_link(self, a: int, b: int) -> None:
        for x in (a, b):
            if x not in self.nodes:
                raise TopologyError(f"link references unknown node {x}")
            if self.nodes[x].role is Role.END_DEVICE:
                raise TopologyError(f"end device {x} cannot hold mesh links; use parent=")
        if a == b:
            raise TopologyError("self link")
        self.adj[a].add(b)
        self.adj[b].add(a)

    @property
    def coordinator(self) -> int:
        return next(i for i, n in self.nodes.items() if n.role is Role.COORDINATOR)

    def role(self, node_id: int) -> Role:
        return self.nodes[node_id].role

    def validate(self) -> None:
        coords = [i for i, n in self.nodes.items() if n.role is Role.COORDINATOR]
        if len(coords) != 1:
            raise TopologyError(f"exactly one coordinator required, found {len(coords)}")
        for i, n in self.nodes.items():
            if n.role is Role.END_DEVICE:
                if n.parent is None or n.parent not in self.nodes:
                    raise TopologyError(f"end device {i} needs an existing parent")
                if self.nodes[n.parent].role is Role.END_DEVICE:
                    raise TopologyError(f"end device {i} has an end-device parent")
            elif n.parent is not None:
                raise TopologyError(f"only end devices take a parent (node {i})")
        mesh = [i for i, n in self.nodes.items() if n.role is not Role.END_DEVICE]
        seen = self._bfs(coords[0])
        missing = [i for i in mesh if i not in seen]
        if missing:
            raise NoRoute(f"radio graph is partitioned; unreachable: {sorted(missing)}")

    def _bfs(self, src: int) -> dict[int, int | None]:
        prev: dict[int, int | None] = {src: None}
        q = deque([src])
        while q:
            u = q.popleft()
            for v in sorted(self.adj[u]):
                if v not in prev:
                    prev[v] = u
                    q.append(v)
        return prev

    def _mesh_path(self, a: int, b: int) -> list[int]:
        prev = self._bfs(a)
        if b not in prev:
            raise NoRoute(f"no radio path {a} -> {b}")
        path = [b]
        while path[-1] != a:
            path.append(prev[path[-1]])
        return path[::-1]

    def route(self, src: int, dst: int) -> list[int]:
        """Node ids visited from ``src`` to ``dst`` inclusive."""
        key = (src, dst)
        if key in self._routes:
            return self._routes[key]
        for x in (src, dst):
            if x not in self.nodes:
                raise NoRoute(f"unknown node {x}")
        if src == dst:
            path = [src]
        else:
            head, a = ([src], self.nodes[src].parent) if self.role(src) is Role.END_DEVICE else ([], src)
            tail, b = ([dst], self.nodes[dst].parent) if self.role(dst) is Role.END_DEVICE else ([], dst)
            if head and tail and a == b:
                path = [src, a, dst]
            elif head and a == dst:
                path = [src, dst]
            elif tail and b == src:
                path = [src, dst]
            else:
                path = head + self._mesh_path(a, b) + tail
        self._routes[key] = path
        return path

    def hop_count(self, src: int, dst: int) -> int:
        return len(self.route(src, dst)) - 1


# --- link timing ------------------------------------------------------------


@dataclass(frozen=True)
class LinkModel:
    radio_rate: int = 250_000
    # Per OTA data frame: OTA-Shell processing, SD write and end-to-end ack.
    # Fitted so the four reference firmware sends share the same worst-case
    # relative error; not a hardware figure.
    per_frame_overhead_delay: float = 95.9
    # Per single-frame OTA command (start/delete).
    command_overhead_delay: float = 5.1
    ota_chunk_payload: int = 75
    frame_payload_cap: int = FRAME_BYTES
    throughput_ceiling: float = 35_000.0
    buffer_cap: int = 64

    def __post_init__(self):
        if self.frame_payload_cap != FRAME_BYTES:
            raise ValueError("frame payload cap is fixed at 81 bytes")
        if self.radio_rate <= 0 or self.ota_chunk_payload <= 0:
            raise ValueError("rates and chunk sizes must be positive")


def tx_ms(nbytes: int, bps: float) -> float:
    return nbytes * 8 * 1000.0 / bps


@dataclass(frozen=True)
class TransferDescriptor:
    firmware: int
    size_bytes: int
    frames: int
    hop_count: int = 1

    def __post_init__(self):
        proto.check_firmware(self.firmware)
        if self.frames < 1 or self.hop_count < 1:
            raise ValueError("frames and hop_count must be >= 1")

    @property
    def bytes_sent(self) -> int:
        return self.frames * FRAME_BYTES


# Frame counts and image sizes measured for the four reference firmwares.
REFERENCE_IMAGES: dict[int, tuple[int, int]] = {
    1: (982, 74080),
    3: (1058, 79704),
    7: (1061, 79754),
    15: (1071, 80506),
}
SYNTHETIC_BASE_SIZE = 72_000
SYNTHETIC_PER_APP_SIZE = 2_000


def image_size(fw: int) -> int:
    """Image size in bytes; reference firmwares use measured sizes."""
    fw = proto.check_firmware(fw)
    if fw in REFERENCE_IMAGES:
        return REFERENCE_IMAGES[fw][1]
    return SYNTHETIC_BASE_SIZE + SYNTHETIC_PER_APP_SIZE * bin(fw).count("1")


def descriptor_for(fw: int, hop_count: int = 1, size_bytes: int | None = None,
                   link: LinkModel = LinkModel()) -> TransferDescriptor:
    fw = proto.check_firmware(fw)
    if size_bytes is None and fw in REFERENCE_IMAGES:
        frames, size = REFERENCE_IMAGES[fw]
        return TransferDescriptor(fw, size, frames, hop_count)
    size = image_size(fw) if size_bytes is None else size_bytes
    return TransferDescriptor(fw, size, math.ceil(size / link.ota_chunk_payload), hop_count)


@dataclass(frozen=True)
class TransferResult:
    duration: float
    effective_rate: float
    bytes_sent: int
    frames: int


def _chain_ms(nbytes: int, hops: int, link: LinkModel, src_serial: int, dst_serial: int) -> float:
    return tx_ms(nbytes, src_serial) + hops * tx_ms(nbytes, link.radio_rate) + tx_ms(nbytes, dst_serial)


def ota_transfer(desc: TransferDescriptor, link: LinkModel = LinkModel(),
                 coordinator_serial: int = COORDINATOR_SERIAL_BPS,
                 node_serial: int = NODE_SERIAL_BPS) -> TransferResult:
    """Time to push a firmware image frame by frame from the controller."""
    per_frame = _chain_ms(FRAME_BYTES, desc.hop_count, link, coordinator_serial, node_serial)
    per_frame += link.per_frame_overhead_delay
    duration = desc.frames * per_frame / 1000.0
    return TransferResult(duration, desc.bytes_sent * 8 / duration, desc.bytes_sent, desc.frames)


def command_transfer(hop_count: int = 1, link: LinkModel = LinkModel(),
                     coordinator_serial: int = COORDINATOR_SERIAL_BPS,
                     node_serial: int = NODE_SERIAL_BPS,
                     nbytes: int = START_COMMAND_BYTES) -> TransferResult:
    """Time for a single-frame OTA command such as start_new_program."""
    ms = _chain_ms(nbytes, hop_count, link, coordinator_serial, node_serial) + link.command_overhead_delay
    return TransferResult(ms / 1000.0, nbytes * 8 / (ms / 1000.0), nbytes, 1)


def max_throughput(topo: Topology, src: int, dst: int, link: LinkModel = LinkModel(),
                   coordinator_serial: int | None = None) -> float:
    """Saturated application throughput in bps along the route.

    The bottleneck is the slower serial port of the two hosts, scaled by the
    payload share of a PHY frame, or the radio ceiling shared among the hops.
    """
    path = topo.route(src, dst)
    hops = len(path) - 1
    if hops == 0:
        raise NoRoute("source and destination coincide")

    def serial(i):
        if coordinator_serial is not None and topo.role(i) is Role.COORDINATOR:
            return coordinator_serial
        return topo.nodes[i].serial_bps

    efficiency = FRAME_BYTES / (FRAME_BYTES + proto.PHY_OVERHEAD)
    serial_bound = min(serial(src), serial(dst)) * efficiency
    return min(serial_bound, link.throughput_ceiling / hops)


# --- event engine -----------------------------------------------------------


class EventKind:
    ALARM1 = "Alarm1"
    ALARM2 = "Alarm2"
    WINDOW_CLOSE = "WindowClose"
    PIR_DETECT = "PirDetect"
    FRAME_ARRIVAL = "FrameArrival"
    TRANSFER_COMPLETE = "TransferComplete"
    REBOOT_DONE = "RebootDone"
    APP_ARRIVAL = "AppArrival"
    APP_DEPARTURE = "AppDeparture"
    BATTERY_OVERRIDE = "BatteryOverride"
    SETUP = "Setup"


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int = field(default=0)
    kind: str = field(default="", compare=False)
    node: int | None = field(default=None, compare=False)
    payload: object = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)


class Engine:
    """Priority queue of events ordered by (time, insertion sequence)."""

    def __init__(self):
        self.now = 0
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self.log_lines: list[str] = []
        self.processed = 0

    def schedule_event(self, e: SimEvent) -> SimEvent:
        if e.time < self.now:
            raise TimeReversal(f"event {e.kind} at {e.time} ms is before now={self.now} ms")
        e.seq = next(self._seq)
        heapq.heappush(self._queue, e)
        return e

    def at(self, time: int, kind: str, node: int | None = None, payload=None) -> SimEvent:
        return self.schedule_event(SimEvent(int(time), 0, kind, node, payload))

    def log(self, kind: str, src="-", dst="-", detail: str = "", time: int | None = None) -> None:
        t = self.now if time is None else time
        self.log_lines.append(f"{t}\t{kind}\t{src}\t{dst}\t{detail}")

    def pending(self) -> list[SimEvent]:
        return sorted(e for e in self._queue if not e.cancelled)

    def run_until(self, t_end: int, dispatch: Callable[[SimEvent], None]) -> list[str]:
        if t_end < self.now:
            raise TimeReversal(f"cannot run back to {t_end} ms from {self.now} ms")
        while self._queue and self._queue[0].time <= t_end:
            e = heapq.heappop(self._queue)
            if e.cancelled:
                continue
            self.now = e.time
            self.processed += 1
            dispatch(e)
        self.now = t_end
        return self.log_lines


# --- frame delivery ---------------------------------------------------------


@dataclass
class InFlight:
    fid: int
    frame: proto.Frame
    src: int
    dst: int
    path: list[int]


class Network:
    """Routes frames over the topology and accounts for every one of them."""

    def __init__(self, topo: Topology, engine: Engine, link: LinkModel = LinkModel(),
                 is_awake: Callable[[int, int], bool] | None = None, strict: bool = False):
        self.topo = topo
        self.strict = strict
        self.engine = engine
        self.link = link
        self.is_awake = is_awake or (lambda node, t: True)
        self.buffers: dict[int, deque[InFlight]] = {
            i: deque() for i, n in topo.nodes.items() if n.role is Role.END_DEVICE
        }
        self._fid = itertools.count(1)
        self.injected = 0
        self.delivered = 0
        self.dropped = 0

    @property
    def buffered(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def segment_ms(self, frame: proto.Frame, path: list[int]) -> float:
        size = proto.phy_size(frame)
        ms = tx_ms(size, self.topo.nodes[path[0]].serial_bps)
        ms += (len(path) - 1) * tx_ms(size, self.link.radio_rate)
        ms += tx_ms(size, self.topo.nodes[path[-1]].serial_bps)
        return ms

    def deliver(self, frame: proto.Frame, src: int, dst: int) -> int | str:
        """Send ``frame``; returns its arrival time in ms or ``BUFFERED``."""
        now = self.engine.now
        path = self.topo.route(src, dst)
        item = InFlight(next(self._fid), frame, src, dst, path)
        self.injected += 1
        route = ">".join(map(str, path))
        text = proto.describe(frame)
        if self.topo.role(dst) is Role.END_DEVICE and len(path) >= 2:
            # time to reach the parent: serial out plus the hops before the last
            size = proto.phy_size(frame)
            at_parent = now + math.ceil(
                tx_ms(size, self.topo.nodes[src].serial_bps)
                + (len(path) - 2) * tx_ms(size, self.link.radio_rate)
            )
            if not self.is_awake(dst, at_parent):
                self._buffer(item, at_parent)
                self.engine.log("TX", src, dst, f"id={item.fid} path={route} buffered_at={path[-2]} frame={text}")
                return BUFFERED
        arrival = now + max(1, math.ceil(self.segment_ms(frame, path)))
        self.engine.log("TX", src, dst, f"id={item.fid} path={route} arrive={arrival} frame={text}")
        self.engine.at(arrival, EventKind.FRAME_ARRIVAL, dst, item)
        return arrival

    def _buffer(self, item: InFlight, t: int) -> None:
        buf = self.buffers[item.dst]
        if len(buf) >= self.link.buffer_cap:
            if self.strict:
                raise BufferOverflow(f"parent buffer for {item.dst} is full")
            old = buf.popleft()
            self.dropped += 1
            self.engine.log("DROP", old.src, old.dst, f"id={old.fid} reason=buffer_overflow", time=t)
        buf.append(item)
        self.engine.log("BUF", item.path[-2], item.dst, f"id={item.fid}", time=t)

    def wake(self, node: int) -> list[int]:
        """Flush frames held by the parent of a waking end device."""
        buf = self.buffers.get(node)
        if not buf:
            return []
        now = self.engine.now
        parent = self.topo.nodes[node].parent
        out = []
        while buf:
            item = buf.popleft()
            size = proto.phy_size(item.frame)
            arrival = now + max(1, math.ceil(
                tx_ms(size, self.link.radio_rate) + tx_ms(size, self.topo.nodes[node].serial_bps)
            ))
            self.engine.log("FLUSH", parent, node, f"id={item.fid} path={parent}>{node} arrive={arrival}")
            self.engine.at(arrival, EventKind.FRAME_ARRIVAL, node, item)
            out.append(arrival)
        return out

    def arrived(self, item: InFlight) -> None:
        self.delivered += 1
        self.engine.log("RX", item.src, item.dst, f"id={item.fid} frame={proto.describe(item.frame)}")

    def finish(self) -> None:
        """Drop whatever is still in flight at the end of the run."""
        for e in self.engine.pending():
            if e.kind == EventKind.FRAME_ARRIVAL:
                e.cancelled = True
                self.dropped += 1
                it = e.payload
                self.engine.log("DROP", it.src, it.dst, f"id={it.fid} reason=sim_end")

    def conserved(self) -> bool:
        return self.injected == self.delivered + self.buffered + self.dropped
