"""Central controller: admission, deployment planning and command dispatch.

Decision functions (``select_node``, ``plan_deployment``, ``plan_removal``)
are pure; :class:`Controller` wires them to the event loop, holding each
node's commands until that node announces a listen window and updating the
store only once the node acknowledges.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

from . import energy, proto
from .errors import NoEligibleNode
from .netsim import image_size
from .proto import AppConfig, AppKind
from .store import DeviceRow, Store

ACK_TIMEOUT_WINDOWS = 3
MAX_RETRIES = 1


class Case(enum.IntEnum):
    NOOP = 1
    RECONFIGURE = 2
    START_STORED = 3
    SEND_AND_START = 4
    # removal of a node's last app: delete the running image, node idles
    STOP = 5


@dataclass(frozen=True)
class AppRequest:
    kind: AppKind
    sensing_interval: int | None = None
    arrival_time: int = 0
    activity_time: int | None = None
    request_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", AppKind(self.kind))
        AppConfig(self.kind, self.sensing_interval)

    @property
    def config(self) -> AppConfig:
        return AppConfig(self.kind, self.sensing_interval)


@dataclass(frozen=True)
class NodeView:
    """What the controller believes about one node."""

    node_id: int
    battery_pct: int = 100
    running_firmware: int | None = None
    intervals: Mapping = field(default_factory=dict)
    sd: frozenset = frozenset()
    listen_interval: int = 1

    @property
    def apps(self) -> frozenset[AppKind]:
        return proto.apps_of(self.running_firmware) if self.running_firmware else frozenset()


@dataclass(frozen=True)
class Step:
    frame: proto.Frame
    ack: str  # "PROGOK" or "INFO"


@dataclass(frozen=True)
class DeploymentPlan:
    node_id: int
    case: Case
    target_firmware: int | None
    steps: tuple[Step, ...] = ()
    desired: Mapping = field(default_factory=dict)
    app: AppKind | None = None

    def __post_init__(self):
        if self.case is Case.SEND_AND_START:
            sends = [s.frame for s in self.steps if isinstance(s.frame, proto.OtaSend)]
            last = self.steps[-1].frame if self.steps else None
            if not sends or not isinstance(last, proto.OtaStart) or last.firmware != sends[0].firmware:
                raise ValueError("send-and-start plans must end starting the firmware they send")

    @property
    def frames(self) -> list[proto.Frame]:
        return [s.frame for s in self.steps]

    @property
    def expected_acks(self) -> list[str]:
        return [s.ack for s in self.steps]


def select_node(candidates: Mapping[int, int], request: AppRequest | None = None,
                exclude: Iterable[int] = ()) -> int:
    """Node with the highest battery percentage above the low-battery threshold."""
    excl = set(exclude)
    eligible = [
        (pct, nid) for nid, pct in candidates.items()
        if nid not in excl and pct > energy.LOW_BATTERY_PCT
    ]
    if not eligible:
        raise NoEligibleNode("every candidate is at or below the battery threshold")
    best = max(pct for pct, _ in eligible)
    return min(nid for pct, nid in eligible if pct == best)


def served(existing: Iterable[int], interval: int) -> bool:
    """True if some running progression already fires at every multiple of ``interval``."""
    return any(interval % e == 0 for e in existing)


def _merged(intervals: Mapping, kind: AppKind, interval: int | None) -> dict:
    out = {k: tuple(v) for k, v in intervals.items()}
    if interval is not None:
        out[kind] = tuple(sorted(set(out.get(kind, ())) | {interval}))
    return out


def schedule_for(intervals: Mapping) -> proto.Schedule | None:
    cfgs = [AppConfig(k, i) for k, ivs in intervals.items() for i in ivs]
    return proto.build_schedule(cfgs) if cfgs else None


def _start_steps(view: NodeView, target: int) -> tuple[Case, tuple[Step, ...]]:
    start = Step(proto.OtaStart(target), "INFO")
    if target in view.sd:
        return Case.START_STORED, (start,)
    send = Step(proto.OtaSend(target, image_size(target)), "PROGOK")
    return Case.SEND_AND_START, (send, start)


def plan_deployment(view: NodeView, request: AppRequest) -> DeploymentPlan:
    """Pick one of the four deployment cases for ``request`` on ``view``'s node."""
    kind, iv = request.kind, request.sensing_interval
    apps = view.apps
    if kind in apps:
        existing = view.intervals.get(kind, ())
        if not kind.periodic or served(existing, iv):
            return DeploymentPlan(view.node_id, Case.NOOP, view.running_firmware,
                                  desired=dict(view.intervals), app=kind)
        desired = _merged(view.intervals, kind, iv)
        upd = proto.ScheduleUpdate(schedule_for(desired))
        return DeploymentPlan(view.node_id, Case.RECONFIGURE, view.running_firmware,
                              (Step(upd, "PROGOK"),), desired, kind)
    target = proto.firmware_of(apps | {kind})
    desired = _merged(view.intervals, kind, iv)
    case, steps = _start_steps(view, target)
    return DeploymentPlan(view.node_id, case, target, steps, desired, kind)


def plan_removal(view: NodeView, kind: AppKind, keep_intervals: Iterable[int] = ()) -> DeploymentPlan:
    """Plan that drops ``kind`` (or some of its intervals) from a node."""
    keep = tuple(sorted(set(keep_intervals)))
    if kind not in view.apps:
        return DeploymentPlan(view.node_id, Case.NOOP, view.running_firmware,
                              desired=dict(view.intervals), app=kind)
    if keep and kind.periodic:
        desired = {k: v for k, v in view.intervals.items()}
        desired[kind] = keep
        upd = proto.ScheduleUpdate(schedule_for(desired))
        return DeploymentPlan(view.node_id, Case.RECONFIGURE, view.running_firmware,
                              (Step(upd, "PROGOK"),), desired, kind)
    rest = view.apps - {kind}
    desired = {k: v for k, v in view.intervals.items() if k != kind}
    if not rest:
        step = Step(proto.OtaDelete(view.running_firmware), "PROGOK")
        return DeploymentPlan(view.node_id, Case.STOP, None, (step,), {}, kind)
    target = proto.firmware_of(rest)
    case, steps = _start_steps(view, target)
    return DeploymentPlan(view.node_id, case, target, steps, desired, kind)


# --- runtime ----------------------------------------------------------------


@dataclass
class _Active:
    plan: DeploymentPlan
    step: int = 0
    sent: bool = False
    listens: int = 0
    retries: int = 0
    info_intervals: dict | None = None


@dataclass
class _Op:
    action: str  # "admit" | "remove"
    request: AppRequest | None = None
    kind: AppKind | None = None
    note: str = ""


class Controller:
    """Event-driven controller bound to a store and a frame sender."""

    def __init__(self, store: Store, send: Callable[[proto.Frame, int], None],
                 log: Callable[..., None], draws: energy.CurrentDraws | None = None,
                 coordinator: int = 0):
        self.store = store
        self.send = send
        self.log = log
        self.draws = draws or energy.CurrentDraws()
        self.coordinator = coordinator
        self.active: dict[int, _Active] = {}
        self.queues: dict[int, deque[_Op]] = {}
        self.admitted: dict[int, list[AppRequest]] = {}
        self.low_latch: set[int] = set()
        self.failed: list[DeploymentPlan] = []
        self.completed: list[DeploymentPlan] = []
        self._next_request = 1

    # --- views ---------------------------------------------------------

    def register_node(self, node_id: int, battery_pct: int, listen_interval: int,
                      sd: Iterable[int] = ()) -> None:
        self.store.upsert_device(DeviceRow(node_id, battery_pct, listen_interval, {}, None))
        self.store.record_sd_contents(node_id, sd)
        self.queues.setdefault(node_id, deque())
        self.admitted.setdefault(node_id, [])

    def view(self, node_id: int) -> NodeView:
        row = self.store.devices[node_id]
        return NodeView(node_id, row.battery_pct, row.firmware_id, dict(row.intervals),
                        frozenset(self.store.sd_contents(node_id)), row.listen_interval)

    def batteries(self) -> dict[int, int]:
        return {nid: row.battery_pct for nid, row in self.store.devices.items()}

    def busy(self, node_id: int) -> bool:
        return node_id in self.active

    # --- requests ------------------------------------------------------

    def new_request(self, kind: AppKind, interval: int | None, now: int,
                    activity: int | None = None) -> AppRequest:
        req = AppRequest(kind, interval, now, activity, self._next_request)
        self._next_request += 1
        return req

    def on_request(self, now: int, req: AppRequest, exclude: Iterable[int] = ()) -> int | None:
        try:
            nid = select_node(self.batteries(), req, exclude)
        except NoEligibleNode:
            self.log("REJECT", "-", "-", f"req={req.request_id} app={req.kind.tag} reason=no_eligible_node")
            return None
        self.admitted[nid].append(req)
        self.log("ADMIT", "-", nid, f"req={req.request_id} app={req.kind.tag} interval={req.sensing_interval or 0}")
        self._enqueue(now, nid, _Op("admit", request=req))
        return nid

    def on_departure(self, now: int, request_id: int) -> None:
        for nid, reqs in self.admitted.items():
            for r in reqs:
                if r.request_id == request_id:
                    reqs.remove(r)
                    self.log("DEPART", "-", nid, f"req={request_id} app={r.kind.tag}")
                    self._enqueue(now, nid, _Op("remove", kind=r.kind))
                    return
        self.log("DEPART", "-", "-", f"req={request_id} reason=not_admitted")

    def departure_by_kind(self, now: int, kind: AppKind) -> None:
        for nid in sorted(self.admitted):
            for r in self.admitted[nid]:
                if r.kind is kind:
                    self.on_departure(now, r.request_id)
                    return
        self.log("DEPART", "-", "-", f"app={kind.tag} reason=not_admitted")

    def _enqueue(self, now: int, nid: int, op: _Op) -> None:
        self.queues[nid].append(op)
        if not self.busy(nid):
            self._next_op(now, nid)

    def _next_op(self, now: int, nid: int) -> None:
        q = self.queues[nid]
        while q and not self.busy(nid):
            op = q.popleft()
            view = self.view(nid)
            if op.action == "admit":
                plan = plan_deployment(view, op.request)
            else:
                keep = [r.sensing_interval for r in self.admitted[nid]
                        if r.kind is op.kind and r.sensing_interval is not None]
                plan = plan_removal(view, op.kind, keep)
            self._start(now, plan, op.note)

    def _start(self, now: int, plan: DeploymentPlan, note: str = "") -> None:
        fw = plan.target_firmware or 0
        extra = f" app={plan.app.tag}" if plan.app else ""
        self.log("DECIDE", "-", plan.node_id,
                 f"case={int(plan.case)} node={plan.node_id} fw={fw}{extra}{note}")
        if plan.case is Case.NOOP:
            self.completed.append(plan)
            self.log("DB", "-", plan.node_id, f"device={plan.node_id} unchanged")
            return
        self.active[plan.node_id] = _Active(plan)

    # --- frames from nodes ---------------------------------------------

    def on_frame(self, now: int, src: int, frame: proto.Frame) -> None:
        if isinstance(frame, proto.Listen):
            self._on_listen(now, src)
        elif isinstance(frame, proto.SensorData):
            self._on_data(now, src, frame)
        elif isinstance(frame, proto.Info):
            self._on_info(now, src, frame)
        elif isinstance(frame, proto.ProgOk):
            self._on_ack(now, src, "PROGOK", None)

    def _on_listen(self, now: int, nid: int) -> None:
        act = self.active.get(nid)
        if act is None:
            return
        if not act.sent:
            self._send_step(nid, act)
            return
        act.listens += 1
        if act.listens >= ACK_TIMEOUT_WINDOWS:
            if act.retries < MAX_RETRIES:
                act.retries += 1
                self.log("RETRY", "-", nid, f"step={act.step} attempt={act.retries + 1}")
                self._send_step(nid, act)
            else:
                self.log("FAIL", "-", nid, f"case={int(act.plan.case)} step={act.step} reason=ack_timeout")
                self.failed.append(act.plan)
                del self.active[nid]
                self._next_op(now, nid)

    def _send_step(self, nid: int, act: _Active) -> None:
        frame = act.plan.steps[act.step].frame
        self.send(proto.FrameKindNotice(isinstance(frame, proto.OTA_FRAMES)), nid)
        self.send(frame, nid)
        act.sent = True
        act.listens = 0

    def _on_data(self, now: int, nid: int, f: proto.SensorData) -> None:
        row = self.store.devices.get(nid)
        if row is None:
            return
        self.store.upsert_device(replace(row, battery_pct=f.battery_pct))
        self.store.insert_register(nid, row.firmware_id, now, f.readings, f.battery_pct)
        self.on_battery_report(now, nid, f.battery_pct)

    def _on_info(self, now: int, nid: int, f: proto.Info) -> None:
        row = self.store.devices.get(nid)
        if row is None:
            return
        act = self.active.get(nid)
        expecting = act is not None and act.sent and act.plan.steps[act.step].ack == "INFO"
        if expecting:
            self._on_ack(now, nid, "INFO", f)
        else:
            self.store.upsert_device(replace(row, firmware_id=f.firmware, intervals=f.sensor_intervals,
                                             listen_interval=f.listen_interval))
            self.log("DB", "-", nid, f"device={nid} fw={f.firmware} source=info")

    def _on_ack(self, now: int, nid: int, kind: str, info: proto.Info | None) -> None:
        act = self.active.get(nid)
        if act is None or not act.sent:
            return
        step = act.plan.steps[act.step]
        if step.ack != kind:
            return
        if kind == "INFO" and info.firmware != step.frame.firmware:
            return
        self.log("ACK", nid, "-", f"{kind} step={act.step}")
        if isinstance(step.frame, proto.OtaSend):
            self.store.add_sd_entry(nid, step.frame.firmware)
            self.log("DB", "-", nid, f"device={nid} sd+={step.frame.firmware}")
        elif isinstance(step.frame, proto.OtaDelete):
            self.store.remove_sd_entry(nid, step.frame.firmware)
            self.log("DB", "-", nid, f"device={nid} sd-={step.frame.firmware}")
        if info is not None:
            act.info_intervals = dict(info.sensor_intervals)
        act.step += 1
        act.sent = False
        act.listens = 0
        if act.step < len(act.plan.steps):
            return
        self._finish(now, nid, act)

    def _finish(self, now: int, nid: int, act: _Active) -> None:
        plan = act.plan
        row = self.store.devices[nid]
        actual = act.info_intervals if act.info_intervals is not None else dict(plan.desired)
        self.store.upsert_device(replace(row, firmware_id=plan.target_firmware, intervals=actual))
        self.log("DB", "-", nid, f"device={nid} fw={plan.target_firmware or 0} case={int(plan.case)}")
        if plan.case is Case.STOP:
            self.log("IDLE", "-", nid, f"node={nid} no firmware running")
        self.completed.append(plan)
        del self.active[nid]
        # firmware restarts with retained/default intervals; align them with the admitted set
        want = {k: tuple(sorted(v)) for k, v in plan.desired.items()}
        have = {k: tuple(sorted(v)) for k, v in actual.items()}
        if plan.target_firmware and want != have and want:
            sched = schedule_for(want)
            if sched is not None and schedule_for(have) != sched:
                follow = DeploymentPlan(nid, Case.RECONFIGURE, plan.target_firmware,
                                        (Step(proto.ScheduleUpdate(sched), "PROGOK"),), want, plan.app)
                self._start(now, follow, " followup=1")
                return
        self._next_op(now, nid)

    # --- reallocation --------------------------------------------------

    def on_battery_report(self, now: int, nid: int, pct: int) -> None:
        if pct >= energy.LOW_BATTERY_PCT:
            self.low_latch.discard(nid)
            return
        if nid in self.low_latch:
            return
        view = self.view(nid)
        if not view.apps:
            return
        self.low_latch.add(nid)
        cfgs = [AppConfig(k, i) for k, ivs in view.intervals.items() for i in ivs]
        if AppKind.PRESENCE in view.apps:
            cfgs.append(AppConfig(AppKind.PRESENCE))
        victim = energy.app_energy_rank(cfgs, self.draws)[0]
        self.log("EVICT", "-", nid, f"node={nid} app={victim.tag} battery={pct}")
        moved = [r for r in self.admitted[nid] if r.kind is victim]
        for r in moved:
            self.admitted[nid].remove(r)
        if not moved:
            ivs = view.intervals.get(victim, ()) or (None,)
            moved = [self.new_request(victim, i, now) for i in ivs]
        self._enqueue(now, nid, _Op("remove", kind=victim, note=" evict=1"))
        for r in moved:
            fresh = self.new_request(r.kind, r.sensing_interval, now, r.activity_time)
            target = self.on_request(now, fresh, exclude=[nid])
            if target is None:
                self.log("UNDEPLOYABLE", "-", "-", f"app={victim.tag} from={nid}")
            else:
                self.log("REALLOC", nid, target, f"app={victim.tag} from={nid} to={target}")

