"""Duty-cycle energy model and battery lifetime estimates.

The average current of a node is the sum over power states of the state
current weighted by the fraction of time spent in that state. States are
sleep, sensing, data send, link-ACK receive, the listen window, and the
send/ACK exchange that opens each listen window.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DegenerateConfig, InfiniteLifetime
from .proto import (
    DATA_FRAME_EXTRA_READING,
    DATA_FRAME_PHY,
    LINK_ACK_PHY,
    LISTEN_PHY,
    AppConfig,
    AppKind,
    build_schedule,
)

RADIO_BPS = 250_000
SENSE_DURATION_S = 0.020
LISTEN_WINDOW_S = 1.0
DEFAULT_CAPACITY_MAH = 6600.0
LOW_BATTERY_PCT = 20


class Role(str, enum.Enum):
    COORDINATOR = "Coordinator"
    ROUTER = "Router"
    END_DEVICE = "EndDevice"

    @classmethod
    def parse(cls, text: str) -> "Role":
        key = text.strip().lower().replace("_", "").replace("-", "")
        for r in cls:
            if r.value.lower() == key:
                return r
        aliases = {"coord": cls.COORDINATOR, "ed": cls.END_DEVICE, "enddev": cls.END_DEVICE}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown role {text!r}")

    @property
    def radio_always_on(self) -> bool:
        return self is not Role.END_DEVICE


def _default_sensor_draws() -> dict[AppKind, float]:
    return {
        AppKind.TEMPERATURE: 0.032 + 0.006,
        AppKind.HUMIDITY: 0.032 + 0.180,
        # connector range 32-64 uA, midpoint
        AppKind.LUMINOSITY: 0.048,
        AppKind.PRESENCE: 0.100,
    }


@dataclass(frozen=True)
class CurrentDraws:
    """Module current draws in mA."""

    mote_on: float = 15.0
    mote_sleep: float = 0.055
    xbee_on: float = 45.56
    xbee_sleep: float = 0.71
    xbee_send: float = 105.0
    xbee_recv: float = 50.46
    board_min: float = 0.0036
    board_per_sensor: dict = field(default_factory=_default_sensor_draws)
    board_read_register: float = 0.150
    sd_on: float = 0.14
    sd_read: float = 0.2
    sd_write: float = 0.2
    sd_off: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if f.name == "board_per_sensor":
                continue
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")
        per = {AppKind(k): float(v) for k, v in self.board_per_sensor.items()}
        if any(v < 0 for v in per.values()):
            raise ValueError("sensor draws must be >= 0")
        object.__setattr__(self, "board_per_sensor", per)

    def sensor(self, kind: AppKind) -> float:
        return self.board_per_sensor.get(kind, 0.0)

    def scaled(self, factor: float) -> "CurrentDraws":
        kw = {f.name: getattr(self, f.name) * factor for f in fields(self) if f.name != "board_per_sensor"}
        kw["board_per_sensor"] = {k: v * factor for k, v in self.board_per_sensor.items()}
        return CurrentDraws(**kw)


def load_profile(path: str | Path | None = None) -> CurrentDraws:
    """Read ``key = value`` lines; ``sensor.<TAG>`` keys set per-sensor draws.

    ``None`` or ``"default"`` loads the shipped hardware profile.
    """
    if path is None or str(path) == "default":
        text = resources.files("ssnsim.data").joinpath("default.profile").read_text()
    else:
        text = Path(path).read_text()
    return parse_profile(text)


def parse_profile(text: str) -> CurrentDraws:
    kw: dict = {}
    sensors = _default_sensor_draws()
    names = {f.name for f in fields(CurrentDraws)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"profile line {lineno}: expected key = value")
        key = key.strip()
        try:
            v = float(value)
        except ValueError:
            raise ValueError(f"profile line {lineno}: bad number {value.strip()!r}") from None
        if key.startswith("sensor."):
            sensors[AppKind.parse(key[len("sensor."):])] = v
        elif key in names and key != "board_per_sensor":
            kw[key] = v
        else:
            raise ValueError(f"profile line {lineno}: unknown key {key!r}")
    return CurrentDraws(board_per_sensor=sensors, **kw)


@dataclass(frozen=True)
class DutyCycle:
    t_sleep: float
    t_sense: float
    t_send: float
    t_recv: float
    t_listen_window: float
    t_listen_send: float
    t_listen_ack: float

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError("duty-cycle fractions must lie in [0, 1]")
        if sum(vals) > 1.0 + 1e-9:
            raise ValueError("duty-cycle fractions sum above 1")

    @property
    def t_listen(self) -> float:
        return self.t_listen_window + self.t_listen_send + self.t_listen_ack


@dataclass(frozen=True)
class NodeEnergyConfig:
    role: Role = Role.ROUTER
    apps: tuple = ()
    listen_interval: int | None = 1
    battery_capacity: float = DEFAULT_CAPACITY_MAH

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role) if not isinstance(self.role, Role) else self.role)
        object.__setattr__(self, "apps", tuple(self.apps))
        if self.battery_capacity <= 0:
            raise ValueError("battery capacity must be positive")
        if self.listen_interval is not None and self.listen_interval <= 0:
            raise ValueError("listen interval must be positive")

    @property
    def periodic(self) -> list[AppConfig]:
        return [a for a in self.apps if a.kind.periodic]

    @property
    def has_presence(self) -> bool:
        return any(a.kind is AppKind.PRESENCE for a in self.apps)


def _airtime(nbytes: int) -> float:
    return nbytes * 8 / RADIO_BPS


@dataclass(frozen=True)
class _Activity:
    """Per-second rates behind the duty cycle, kept for energy_rate."""

    events_per_s: float
    send_s_per_s: float
    sensor_fire_rate: dict


def _activity(cfg: NodeEnergyConfig) -> _Activity:
    periodic = cfg.periodic
    if not periodic:
        return _Activity(0.0, 0.0, {})
    sched = build_schedule(periodic)
    H = sched.hyperperiod
    body = sched.indices[:-1]
    send = sum(
        _airtime(DATA_FRAME_PHY + DATA_FRAME_EXTRA_READING * (bin(x).count("1") - 1))
        for x in body
    )
    fires = {k: sum(1 for x in body if x & k.bit) / H for k in sched.kinds}
    return _Activity(len(body) / H, send / H, fires)


def duty_cycle_of(cfg: NodeEnergyConfig) -> DutyCycle:
    act = _activity(cfg)
    t_sense = act.events_per_s * SENSE_DURATION_S
    t_send = act.send_s_per_s
    t_recv = act.events_per_s * _airtime(LINK_ACK_PHY)
    if cfg.listen_interval is None:
        lw = ls = la = 0.0
    else:
        per_s = 1.0 / (60.0 * cfg.listen_interval)
        lw = per_s * LISTEN_WINDOW_S
        ls = per_s * _airtime(LISTEN_PHY)
        la = per_s * _airtime(LINK_ACK_PHY)
    active = t_sense + t_send + t_recv + lw + ls + la
    if active == 0.0:
        raise DegenerateConfig("node neither senses nor listens")
    return DutyCycle(max(0.0, 1.0 - active), t_sense, t_send, t_recv, lw, ls, la)


def state_currents(cfg: NodeEnergyConfig, draws: CurrentDraws) -> dict[str, float]:
    """Current in mA of each power state for the given node configuration.

    The sensing entry excludes the per-sensor draws, which depend on which
    apps fire at each event and are added separately by ``energy_rate``.
    """
    d = draws
    pir = d.sensor(AppKind.PRESENCE) if cfg.has_presence else 0.0
    awake = d.mote_on + d.sd_on + d.board_min + pir
    radio_idle = d.xbee_on if cfg.role.radio_always_on else d.xbee_sleep
    return {
        "sleep": d.mote_sleep + radio_idle + d.board_min + d.sd_on + pir,
        "sense": awake + d.xbee_on + d.board_read_register,
        "send": awake + d.xbee_send,
        "recv": awake + d.xbee_recv,
        "listen_window": awake + d.xbee_recv,
        "listen_send": awake + d.xbee_send,
        "listen_ack": awake + d.xbee_recv,
    }


def energy_rate(cfg: NodeEnergyConfig, draws: CurrentDraws, duty: DutyCycle | None = None) -> float:
    """Average current in mA."""
    duty = duty or duty_cycle_of(cfg)
    cur = state_currents(cfg, draws)
    ec = (
        cur["sleep"] * duty.t_sleep
        + cur["sense"] * duty.t_sense
        + cur["send"] * duty.t_send
        + cur["recv"] * duty.t_recv
        + cur["listen_window"] * duty.t_listen_window
        + cur["listen_send"] * duty.t_listen_send
        + cur["listen_ack"] * duty.t_listen_ack
    )
    if duty.t_sense > 0:
        act = _activity(cfg)
        for kind, rate in act.sensor_fire_rate.items():
            ec += draws.sensor(kind) * rate * SENSE_DURATION_S
    return ec


def lifetime(cfg: NodeEnergyConfig, draws: CurrentDraws) -> float:
    """Days until the battery is empty at the average current."""
    ec = energy_rate(cfg, draws)
    if ec <= 0:
        raise InfiniteLifetime("zero average current")
    return cfg.battery_capacity / ec / 24.0


def drain(battery_mah: float, cfg: NodeEnergyConfig, draws: CurrentDraws, elapsed_s: float) -> float:
    if elapsed_s < 0:
        raise ValueError("elapsed time must be >= 0")
    if elapsed_s == 0:
        return battery_mah
    return max(0.0, battery_mah - energy_rate(cfg, draws) * elapsed_s / 3600.0)


def event_charge(draws: CurrentDraws, cfg: NodeEnergyConfig, kinds: Iterable[AppKind]) -> float:
    """Charge in mAh of one unscheduled sense-and-send (a presence detection)."""
    kinds = list(kinds)
    cur = state_currents(cfg, draws)
    sense = cur["sense"] + sum(draws.sensor(k) for k in kinds if k.periodic)
    nbytes = DATA_FRAME_PHY + DATA_FRAME_EXTRA_READING * (max(1, len(kinds)) - 1)
    mas = (
        sense * SENSE_DURATION_S
        + cur["send"] * _airtime(nbytes)
        + cur["recv"] * _airtime(LINK_ACK_PHY)
    )
    # only the excess above the idle draw is extra
    idle = cur["sleep"] * (SENSE_DURATION_S + _airtime(nbytes) + _airtime(LINK_ACK_PHY))
    return max(0.0, mas - idle) / 3600.0


def battery_pct(mah: float, capacity: float) -> int:
    return max(0, min(100, round(100.0 * mah / capacity)))


def app_contribution(kind: AppKind, intervals: Sequence[int], draws: CurrentDraws) -> float:
    """Average current in mA attributable to one app."""
    if kind is AppKind.PRESENCE:
        return draws.sensor(kind)
    sched = build_schedule([AppConfig(kind, i) for i in intervals])
    fires = (len(sched.indices) - 1) / sched.hyperperiod
    per_event = (
        draws.sensor(kind) * SENSE_DURATION_S
        + draws.xbee_send * _airtime(DATA_FRAME_PHY)
        + draws.xbee_recv * _airtime(LINK_ACK_PHY)
    )
    return per_event * fires


def app_energy_rank(apps: Iterable[AppConfig], draws: CurrentDraws) -> list[AppKind]:
    """Apps by descending attributable current; ties go to the lower bit."""
    grouped: dict[AppKind, list[int]] = {}
    for a in apps:
        grouped.setdefault(a.kind, [])
        if a.sensing_interval is not None:
            grouped[a.kind].append(a.sensing_interval)
    if not grouped:
        raise ValueError("no applications to rank")
    score = {k: app_contribution(k, v, draws) for k, v in grouped.items()}
    return sorted(score, key=lambda k: (-score[k], k.bit))


def reference_router_config(role: Role = Role.ROUTER, capacity: float = DEFAULT_CAPACITY_MAH) -> NodeEnergyConfig:
    """Temperature every 10 s, listening 1 s every minute."""
    return NodeEnergyConfig(role, (AppConfig(AppKind.TEMPERATURE, 10),), 1, capacity)


def with_capacity(cfg: NodeEnergyConfig, capacity: float) -> NodeEnergyConfig:
    return replace(cfg, battery_capacity=capacity)
