"""Sensor node firmware state machine.

A node sleeps until one of four things wakes it: alarm1 (next sensing
event of its schedule), alarm2 (start of a listen window), a presence
interrupt, or the end of an OTA image transfer. Handlers return the frames
the node transmits; the simulator owns timing and delivery.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

from . import energy, proto
from .energy import Role
from .errors import SdFull, UnknownFirmware
from .netsim import image_size
from .proto import AppConfig, AppKind, Schedule

log = logging.getLogger(__name__)

SD_CAPACITY_IMAGES = 16_000
MAX_IMAGE_BYTES = 131_072
LISTEN_WINDOW_MS = 1_000
RESTART_LATENCY_MS = 2_000
SCHEDULE_LEAD_MS = 1_000
DEFAULT_LISTEN_MIN = 1
DEFAULT_INTERVAL_S = 60


class Mode(str, enum.Enum):
    SLEEPING = "Sleeping"
    SENSING = "Sensing"
    LISTENING = "Listening"
    REBOOTING = "Rebooting"


@dataclass(frozen=True)
class SdImage:
    firmware: int
    size_bytes: int

    def __post_init__(self):
        proto.check_firmware(self.firmware)
        if not 0 < self.size_bytes <= MAX_IMAGE_BYTES:
            raise ValueError(f"image size must be in (0, {MAX_IMAGE_BYTES}] bytes")


def reading_value(node_id: int, kind: AppKind, t_ms: int) -> float:
    """Deterministic synthetic sensor reading."""
    day = 2 * math.pi * (t_ms / 1000.0) / 86_400.0
    if kind is AppKind.TEMPERATURE:
        v = 21.0 + 4.0 * math.sin(day) + 0.1 * node_id
    elif kind is AppKind.HUMIDITY:
        v = 55.0 - 10.0 * math.sin(day) + 0.2 * node_id
    elif kind is AppKind.LUMINOSITY:
        v = 400.0 + 300.0 * math.sin(day) + node_id
    else:
        return 1.0
    return round(v, 2)


@dataclass
class Node:
    node_id: int
    role: Role = Role.ROUTER
    battery_capacity: float = energy.DEFAULT_CAPACITY_MAH
    battery_mah: float | None = None
    listen_interval: int = DEFAULT_LISTEN_MIN
    draws: energy.CurrentDraws = field(default_factory=energy.CurrentDraws)
    running_firmware: int | None = None
    schedule: Schedule | None = None
    anchor_ms: int = 0
    sd_store: dict[int, SdImage] = field(default_factory=dict)
    alarm1_next: int | None = None
    alarm2_next: int | None = None
    mode: Mode = Mode.SLEEPING
    window_end: int | None = None
    transferring: int | None = None
    expect_ota: bool | None = None
    last_alarm1: int | None = None
    last_energy_ms: int = 0
    retained: dict = field(default_factory=dict)
    pending_size: int = 0
    boot_target: int | None = None
    strict: bool = False
    errors: list = field(default_factory=list)

    def __post_init__(self):
        if self.battery_mah is None:
            self.battery_mah = self.battery_capacity

    # --- views ---------------------------------------------------------

    @property
    def apps(self) -> frozenset[AppKind]:
        return proto.apps_of(self.running_firmware) if self.running_firmware else frozenset()

    @property
    def battery_pct(self) -> int:
        return energy.battery_pct(self.battery_mah, self.battery_capacity)

    @property
    def awake(self) -> bool:
        return self.mode is not Mode.SLEEPING

    def app_configs(self) -> list[AppConfig]:
        out = self.schedule.configs() if self.schedule else []
        if AppKind.PRESENCE in self.apps:
            out.append(AppConfig(AppKind.PRESENCE))
        return out

    def energy_config(self) -> energy.NodeEnergyConfig:
        return energy.NodeEnergyConfig(
            self.role, tuple(self.app_configs()), self.listen_interval, self.battery_capacity
        )

    def info(self) -> proto.Info:
        intervals = self.schedule.app_intervals() if self.schedule else {}
        return proto.Info(self.running_firmware, intervals, self.listen_interval)

    def snapshot(self) -> str:
        sd = ",".join(map(str, sorted(self.sd_store))) or "-"
        return (
            f"node={self.node_id} role={self.role.value} fw={self.running_firmware or 0} "
            f"mode={self.mode.value} sd={sd} bat={self.battery_mah:.4f}mAh"
        )

    def awake_at(self, t: int) -> bool:
        if self.role.radio_always_on:
            return True
        if self.mode is Mode.REBOOTING or self.transferring is not None:
            return True
        return self.mode is Mode.LISTENING and self.window_end is not None and t < self.window_end

    # --- energy --------------------------------------------------------

    def account(self, now: int) -> None:
        """Drain the battery for the time elapsed since the last call."""
        elapsed = (now - self.last_energy_ms) / 1000.0
        self.last_energy_ms = now
        if elapsed <= 0:
            return
        try:
            cfg = self.energy_config()
            self.battery_mah = energy.drain(self.battery_mah, cfg, self.draws, elapsed)
        except energy.DegenerateConfig:
            pass

    def charge_event(self, kinds) -> None:
        cfg = self.energy_config()
        self.battery_mah = max(0.0, self.battery_mah - energy.event_charge(self.draws, cfg, kinds))

    # --- alarms --------------------------------------------------------

    def _reprogram_alarm1(self, now: int) -> None:
        if self.schedule is None:
            self.alarm1_next = None
            return
        t, _ = self.schedule.event_at(max(0, now - self.anchor_ms))
        t += self.anchor_ms
        if t < now or (self.last_alarm1 is not None and t <= self.last_alarm1):
            after = max(now, (self.last_alarm1 or now) + 1)
            t, _ = self.schedule.event_at(after - self.anchor_ms)
            t += self.anchor_ms
        self.alarm1_next = t

    def _reprogram_alarm2(self, now: int) -> None:
        period = self.listen_interval * 60_000
        if self.alarm2_next is None or self.alarm2_next <= now:
            self.alarm2_next = now + period

    def reprogram_alarms(self, now: int) -> None:
        self._reprogram_alarm1(now)
        self._reprogram_alarm2(now)

    def _install(self, fw: int | None, configs, now: int) -> None:
        self.running_firmware = fw
        periodic = [c for c in configs if c.kind.periodic and fw and fw & c.kind.bit]
        if fw:
            have = {c.kind for c in periodic}
            for k in proto.apps_of(fw):
                if k.periodic and k not in have:
                    for iv in self.retained.get(k, (DEFAULT_INTERVAL_S,)):
                        periodic.append(AppConfig(k, iv))
        self.schedule = proto.build_schedule(periodic) if periodic else None
        self.anchor_ms = now + SCHEDULE_LEAD_MS
        self.last_alarm1 = None
        self.alarm1_next = self.anchor_ms if self.schedule else None

    # --- handlers ------------------------------------------------------

    def on_setup(self, now: int, initial_firmware: int | None, configs=()) -> proto.Info | None:
        """Configure modules, announce the running firmware, arm both alarms."""
        self.account(now)
        if initial_firmware is not None:
            initial_firmware = proto.check_firmware(initial_firmware)
            if initial_firmware not in self.sd_store:
                self._store(SdImage(initial_firmware, image_size(initial_firmware)))
        self._install(initial_firmware, list(configs), now)
        self.alarm2_next = None
        self._reprogram_alarm2(now)
        self.mode = Mode.SENSING
        if initial_firmware is None:
            return None
        return self.info()

    def on_alarm1(self, now: int) -> proto.SensorData | None:
        self.account(now)
        if self.schedule is None or self.mode is Mode.REBOOTING or self.transferring is not None:
            # lost alarm; reprogrammed when the node is free again
            self.alarm1_next = None
            return None
        rel, pos = self.schedule.event_at(now - self.anchor_ms)
        if rel + self.anchor_ms != now:
            self._reprogram_alarm1(now)
            return None
        idx = self.schedule.indices[pos]
        kinds = [k for k in proto.PERIODIC_KINDS if idx & k.bit]
        readings = {k: reading_value(self.node_id, k, now) for k in kinds}
        prev_mode = self.mode
        self.mode = Mode.SENSING if prev_mode is Mode.SLEEPING else prev_mode
        self.last_alarm1 = now
        self.alarm1_next = now + self.schedule.intervals[pos] * 1000
        return proto.SensorData(readings, self.battery_pct)

    def on_alarm2(self, now: int, incoming=None) -> list[proto.Frame]:
        """Announce the listen window; optionally process ``incoming`` and close it."""
        self.account(now)
        if self.mode is Mode.REBOOTING or self.transferring is not None:
            self.alarm2_next = now + self.listen_interval * 60_000
            return []
        self.mode = Mode.LISTENING
        self.window_end = now + LISTEN_WINDOW_MS
        self.alarm2_next = now + self.listen_interval * 60_000
        out: list[proto.Frame] = [proto.Listen()]
        if incoming is not None:
            for f in incoming:
                out.extend(self.on_frame(now, f))
            self.on_window_close(self.window_end)
        return out

    def on_window_close(self, now: int) -> None:
        self.account(now)
        if self.mode is Mode.LISTENING and self.transferring is None:
            self.mode = Mode.SLEEPING
            self.window_end = None
            self.expect_ota = None
            self.reprogram_alarms(now)

    def settle(self, now: int) -> None:
        """Return to sleep after a sensing or setup burst."""
        if self.mode is Mode.SENSING:
            self.mode = Mode.SLEEPING
            self.reprogram_alarms(now)

    def accepting(self, now: int) -> bool:
        return self.mode is Mode.LISTENING and (
            self.transferring is not None or (self.window_end is not None and now <= self.window_end)
        )

    def on_frame(self, now: int, frame: proto.Frame) -> list[proto.Frame]:
        """Handle a controller frame received during a listen window."""
        self.account(now)
        if not self.accepting(now):
            self._error(now, f"frame outside listen window ignored: {proto.describe(frame)}")
            return []
        if isinstance(frame, proto.FrameKindNotice):
            self.expect_ota = frame.ota
            return []
        is_ota = isinstance(frame, proto.OTA_FRAMES)
        if self.expect_ota is None or self.expect_ota != is_ota:
            self._error(now, f"frame without matching kind notice: {proto.describe(frame)}")
            return []
        self.expect_ota = None
        if isinstance(frame, proto.ScheduleUpdate):
            return self._apply_schedule(now, frame.schedule)
        if isinstance(frame, proto.OtaSend):
            if len(self.sd_store) >= SD_CAPACITY_IMAGES and frame.firmware not in self.sd_store:
                self._error(now, "SD card full", SdFull)
                return []
            self.transferring = frame.firmware
            self.pending_size = frame.size_bytes
            return []
        if isinstance(frame, proto.OtaDelete):
            if frame.firmware not in self.sd_store:
                self._error(now, f"delete of unknown firmware {frame.firmware}", UnknownFirmware)
                return []
            del self.sd_store[frame.firmware]
            if frame.firmware == self.running_firmware:
                self._remember()
                self.running_firmware = None
                self.schedule = None
                self.alarm1_next = None
            return [proto.ProgOk()]
        if isinstance(frame, proto.OtaStart):
            if frame.firmware not in self.sd_store:
                self._error(now, f"start of unknown firmware {frame.firmware}", UnknownFirmware)
                return []
            self._remember()
            self.mode = Mode.REBOOTING
            self.window_end = None
            self.boot_target = frame.firmware
            self.alarm1_next = None
            return []
        self._error(now, f"unexpected frame {proto.describe(frame)}")
        return []

    def _apply_schedule(self, now: int, sched: Schedule) -> list[proto.Frame]:
        if self.running_firmware is None or sched.bits & ~self.running_firmware:
            self._error(now, "schedule references apps outside the running firmware")
            return []
        self.schedule = sched
        self.anchor_ms = self.window_end or now
        self.last_alarm1 = None
        self.alarm1_next = self.anchor_ms
        return [proto.ProgOk()]

    def _remember(self) -> None:
        if self.schedule is not None:
            self.retained.update(self.schedule.app_intervals())

    def on_transfer_complete(self, now: int) -> list[proto.Frame]:
        self.account(now)
        fw = self.transferring
        if fw is None:
            return []
        self.transferring = None
        try:
            self._store(SdImage(fw, self.pending_size))
            out: list[proto.Frame] = [proto.ProgOk()]
        except (SdFull, ValueError) as e:
            self._error(now, str(e))
            out = []
        self.mode = Mode.LISTENING
        self.window_end = now
        return out

    def on_reboot_done(self, now: int) -> proto.Info | None:
        fw = self.boot_target
        self.boot_target = None
        self.mode = Mode.SENSING
        configs = [AppConfig(k, i) for k, ivs in self.retained.items() for i in ivs]
        return self.on_setup(now, fw, configs)

    def on_pir(self, now: int) -> proto.SensorData | None:
        self.account(now)
        if AppKind.PRESENCE not in self.apps:
            log.warning("node %s: presence interrupt without presence firmware", self.node_id)
            self._error(now, "presence interrupt ignored: PIR not in running firmware")
            return None
        if self.mode is Mode.REBOOTING:
            return None
        self.charge_event([AppKind.PRESENCE])
        if self.mode is Mode.SLEEPING:
            self.mode = Mode.SENSING
        return proto.SensorData({AppKind.PRESENCE: 1.0}, self.battery_pct)

    # --- SD ------------------------------------------------------------

    def _store(self, img: SdImage) -> None:
        if img.firmware not in self.sd_store and len(self.sd_store) >= SD_CAPACITY_IMAGES:
            raise SdFull("SD card holds the maximum number of images")
        self.sd_store[img.firmware] = img

    def preload(self, firmwares) -> None:
        for fw in firmwares:
            self._store(SdImage(fw, image_size(fw)))

    def _error(self, now: int, msg: str, exc: type[Exception] | None = None) -> None:
        self.errors.append((now, msg))
        if self.strict and exc is not None:
            raise exc(msg)

    def check(self) -> list[str]:
        """Invariant violations in the current state."""
        bad = []
        if self.running_firmware is not None and self.running_firmware not in self.sd_store:
            bad.append(f"node {self.node_id}: running firmware not on SD")
        if len(self.sd_store) > SD_CAPACITY_IMAGES:
            bad.append(f"node {self.node_id}: SD over capacity")
        return bad
