"""Firmware codification, merged sensing schedules and the wire frame codec.

Standard frames are ASCII, ``#``-delimited::

    #INFO#APP:7#TEMP:5#HUM:10#LDR:15#LSTN:1
    #DATA#TEMP:21.5#BAT:87
    #LISTEN
    #PROGOK
    #ACK
    #KIND:STD | #KIND:OTA
    #OTA#-send#FW:3#SIZE:79704
    #OTA#-start_new_program#FW:3
    #OTA#-delete_program#FW:3

Schedule updates use the interval/index layout::

    2|<5><5><5><5><5><5>|-|<7><1><3><5><3><1><7>|
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np

from . import _kernels
from .errors import (
    EmptyAppSet,
    InvalidFirmwareId,
    MalformedFrame,
    NoPeriodicApps,
    ScheduleTooLarge,
)

MAX_INTERVAL_S = 86_400
MAX_HYPERPERIOD_S = 10_000_000

PHY_OVERHEAD = 21
DATA_FRAME_PHY = 102
DATA_FRAME_EXTRA_READING = 10
LINK_ACK_PHY = 49
LISTEN_PHY = 87


class AppKind(enum.IntEnum):
    """Application types; the value is the app's bit in the firmware id."""

    TEMPERATURE = 1
    HUMIDITY = 2
    LUMINOSITY = 4
    PRESENCE = 8

    @property
    def bit(self) -> int:
        return int(self)

    @property
    def tag(self) -> str:
        return _TAGS[self]

    @property
    def periodic(self) -> bool:
        return self is not AppKind.PRESENCE

    @classmethod
    def parse(cls, text: str) -> "AppKind":
        key = text.strip().upper()
        if key in _BY_TAG:
            return _BY_TAG[key]
        for kind in cls:
            if kind.name == key or kind.name.startswith(key) and len(key) >= 3:
                return kind
        raise ValueError(f"unknown application kind {text!r}")


_TAGS = {
    AppKind.TEMPERATURE: "TEMP",
    AppKind.HUMIDITY: "HUM",
    AppKind.LUMINOSITY: "LDR",
    AppKind.PRESENCE: "PIR",
}
_BY_TAG = {v: k for k, v in _TAGS.items()}
PERIODIC_KINDS = (AppKind.TEMPERATURE, AppKind.HUMIDITY, AppKind.LUMINOSITY)
PERIODIC_MASK = 0b0111


def check_firmware(fw: int) -> int:
    if isinstance(fw, bool) or not isinstance(fw, (int, np.integer)) or not 1 <= fw <= 15:
        raise InvalidFirmwareId(f"firmware id must be in [1, 15], got {fw!r}")
    return int(fw)


def firmware_of(apps: Iterable[AppKind]) -> int:
    fw = 0
    for a in apps:
        fw |= AppKind(a).bit
    if fw == 0:
        raise EmptyAppSet("an application set must be nonempty")
    return fw


def apps_of(fw: int) -> frozenset[AppKind]:
    fw = check_firmware(fw)
    return frozenset(k for k in AppKind if fw & k.bit)


@dataclass(frozen=True)
class AppConfig:
    kind: AppKind
    sensing_interval: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AppKind(self.kind))
        if self.kind.periodic:
            if self.sensing_interval is None or int(self.sensing_interval) < 1:
                raise ValueError(f"{self.kind.name} needs a sensing interval >= 1 s")
            object.__setattr__(self, "sensing_interval", int(self.sensing_interval))
        elif self.sensing_interval is not None:
            raise ValueError("PRESENCE is event driven and takes no interval")


@dataclass(frozen=True)
class Schedule:
    """Merged sensing timetable for one node.

    ``intervals[k]`` is the gap between event ``k`` and event ``k + 1``;
    ``indices[k]`` is the bitmask of apps sensed at event ``k``.
    """

    intervals: tuple[int, ...]
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(int(i) for i in self.intervals))
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.intervals:
            raise ValueError("schedule needs at least one interval")
        if any(i < 1 or i > MAX_INTERVAL_S for i in self.intervals):
            raise ValueError(f"schedule intervals must be in [1, {MAX_INTERVAL_S}]")
        if len(self.indices) != len(self.intervals) + 1:
            raise ValueError("schedule needs exactly one more index than intervals")
        if any(not 1 <= x <= PERIODIC_MASK for x in self.indices):
            raise ValueError("schedule indices must be nonzero periodic-app bitmasks")
        if self.hyperperiod > MAX_HYPERPERIOD_S:
            raise ScheduleTooLarge(f"hyperperiod {self.hyperperiod} s exceeds {MAX_HYPERPERIOD_S} s")
        full = 0
        for x in self.indices:
            full |= x
        if self.indices[0] != full or self.indices[-1] != full:
            raise ValueError("first and last schedule index must hold every scheduled app")

    @property
    def hyperperiod(self) -> int:
        return sum(self.intervals)

    @property
    def bits(self) -> int:
        return self.indices[0]

    @property
    def kinds(self) -> frozenset[AppKind]:
        return frozenset(k for k in PERIODIC_KINDS if self.bits & k.bit)

    def offsets(self) -> np.ndarray:
        """Event times within one hyperperiod, ``0`` through ``hyperperiod``."""
        return np.concatenate(([0], np.cumsum(self.intervals, dtype=np.int64)))

    def app_intervals(self) -> dict[AppKind, tuple[int, ...]]:
        """Smallest set of progressions per app that regenerates the schedule."""
        offs = self.offsets()
        idx = np.asarray(self.indices, dtype=np.int64)
        H = self.hyperperiod
        out = {}
        for kind in self.kinds:
            times = offs[(idx & kind.bit) != 0]
            times = times[times > 0]
            covered = np.zeros(H + 1, dtype=bool)
            gens = []
            for t in times:
                if not covered[t]:
                    gens.append(int(t))
                    covered[::t] = True
            out[kind] = tuple(gens)
        return out

    def configs(self) -> list[AppConfig]:
        return [
            AppConfig(kind, i)
            for kind, ivs in sorted(self.app_intervals().items())
            for i in ivs
        ]

    def event_at(self, elapsed_ms: int) -> tuple[int, int]:
        """Next event at or after ``elapsed_ms`` past the anchor.

        Returns ``(time_ms, position)`` where ``position`` indexes ``indices``.
        """
        period = self.hyperperiod * 1000
        cycle, rem = divmod(int(elapsed_ms), period)
        offs = self.offsets() * 1000
        pos = int(np.searchsorted(offs, rem, side="left"))
        if pos >= len(self.intervals):
            cycle, pos = cycle + 1, 0
        return cycle * period + int(offs[pos]), pos


def build_schedule(configs: Iterable[AppConfig]) -> Schedule:
    periodic = [c for c in configs if c.kind.periodic]
    if not periodic:
        raise NoPeriodicApps("a schedule needs at least one periodic application")
    for c in periodic:
        if c.sensing_interval > MAX_INTERVAL_S:
            raise ScheduleTooLarge(f"interval {c.sensing_interval} s exceeds {MAX_INTERVAL_S} s")
    H = math.lcm(*(c.sensing_interval for c in periodic))
    if H > MAX_HYPERPERIOD_S:
        raise ScheduleTooLarge(f"hyperperiod {H} s exceeds {MAX_HYPERPERIOD_S} s")
    periods = np.array([c.sensing_interval for c in periodic], dtype=np.int64)
    bits = np.array([c.kind.bit for c in periodic], dtype=np.int64)
    mask = _kernels.event_mask(periods, bits, H)
    times, idx = _kernels.compress_mask(mask)
    return Schedule(tuple(np.diff(times).tolist()), tuple(idx.tolist()))


# --- frames -----------------------------------------------------------------


def _interval_map(m: Mapping) -> dict:
    out = {}
    for k, v in m.items():
        k = AppKind(k)
        if not k.periodic:
            raise ValueError("PRESENCE carries no sensing interval")
        vals = (v,) if isinstance(v, (int, np.integer)) else tuple(v)
        if not vals or any(int(x) < 1 for x in vals):
            raise ValueError("sensing intervals must be >= 1 s")
        out[k] = tuple(int(x) for x in vals)
    return dict(sorted(out.items()))


@dataclass(frozen=True)
class Info:
    firmware: int
    sensor_intervals: dict = field(default_factory=dict)
    listen_interval: int = 1

    def __post_init__(self):
        check_firmware(self.firmware)
        object.__setattr__(self, "sensor_intervals", _interval_map(self.sensor_intervals))
        if self.listen_interval < 1:
            raise ValueError("listen interval must be >= 1 min")


@dataclass(frozen=True)
class SensorData:
    readings: dict
    battery_pct: int

    def __post_init__(self):
        if not self.readings:
            raise ValueError("a data frame carries at least one reading")
        r = {AppKind(k): float(v) for k, v in self.readings.items()}
        object.__setattr__(self, "readings", dict(sorted(r.items())))
        if not 0 <= int(self.battery_pct) <= 100:
            raise ValueError("battery percentage must be in [0, 100]")


@dataclass(frozen=True)
class Listen:
    pass


@dataclass(frozen=True)
class ProgOk:
    pass


@dataclass(frozen=True)
class LinkAck:
    pass


@dataclass(frozen=True)
class ScheduleUpdate:
    schedule: Schedule


@dataclass(frozen=True)
class OtaSend:
    firmware: int
    size_bytes: int

    def __post_init__(self):
        check_firmware(self.firmware)
        if self.size_bytes < 1:
            raise ValueError("firmware image must be nonempty")


@dataclass(frozen=True)
class OtaStart:
    firmware: int

    def __post_init__(self):
        check_firmware(self.firmware)


@dataclass(frozen=True)
class OtaDelete:
    firmware: int

    def __post_init__(self):
        check_firmware(self.firmware)


@dataclass(frozen=True)
class FrameKindNotice:
    ota: bool


Frame = Union[
    Info, SensorData, Listen, ProgOk, LinkAck, ScheduleUpdate,
    OtaSend, OtaStart, OtaDelete, FrameKindNotice,
]
OTA_FRAMES = (OtaSend, OtaStart, OtaDelete)


def _fmt_value(v: float) -> str:
    return repr(float(v))


def encode_frame(f: Frame) -> bytes:
    if isinstance(f, ScheduleUpdate):
        s = f.schedule
        ivs = "".join(f"<{i}>" for i in s.intervals)
        idx = "".join(f"<{i}>" for i in s.indices)
        return f"2|{ivs}|-|{idx}|".encode("ascii")
    if isinstance(f, Info):
        parts = ["INFO", f"APP:{f.firmware}"]
        parts += [
            f"{k.tag}:{','.join(map(str, v))}" for k, v in f.sensor_intervals.items()
        ]
        parts.append(f"LSTN:{f.listen_interval}")
    elif isinstance(f, SensorData):
        parts = ["DATA"] + [f"{k.tag}:{_fmt_value(v)}" for k, v in f.readings.items()]
        parts.append(f"BAT:{int(f.battery_pct)}")
    elif isinstance(f, Listen):
        parts = ["LISTEN"]
    elif isinstance(f, ProgOk):
        parts = ["PROGOK"]
    elif isinstance(f, LinkAck):
        parts = ["ACK"]
    elif isinstance(f, FrameKindNotice):
        parts = ["KIND:OTA" if f.ota else "KIND:STD"]
    elif isinstance(f, OtaSend):
        parts = ["OTA", "-send", f"FW:{f.firmware}", f"SIZE:{f.size_bytes}"]
    elif isinstance(f, OtaStart):
        parts = ["OTA", "-start_new_program", f"FW:{f.firmware}"]
    elif isinstance(f, OtaDelete):
        parts = ["OTA", "-delete_program", f"FW:{f.firmware}"]
    else:
        raise TypeError(f"not a frame: {f!r}")
    return ("#" + "#".join(parts)).encode("ascii")


class _Tokens:
    """``#``-separated fields with their byte offsets."""

    def __init__(self, text: str):
        if not text.startswith("#"):
            raise MalformedFrame(0, "standard frames start with '#'")
        self.fields = []
        pos = 1
        for part in text[1:].split("#"):
            self.fields.append((pos, part))
            pos += len(part) + 1
        self.i = 0
        self.end = len(text)

    def next(self, what: str) -> tuple[int, str]:
        if self.i >= len(self.fields):
            raise MalformedFrame(self.end, f"missing {what}")
        off, part = self.fields[self.i]
        self.i += 1
        if not part:
            raise MalformedFrame(off, f"empty field where {what} expected")
        return off, part

    def done(self):
        if self.i < len(self.fields):
            off, part = self.fields[self.i]
            raise MalformedFrame(off, f"unexpected trailing field {part!r}")

    def remaining(self):
        while self.i < len(self.fields):
            yield self.next("field")


def _int(off: int, text: str, lo: int | None = None, hi: int | None = None) -> int:
    if not text.isdigit():
        raise MalformedFrame(off, f"expected a decimal integer, got {text!r}")
    v = int(text)
    if (lo is not None and v < lo) or (hi is not None and v > hi):
        raise MalformedFrame(off, f"value {v} out of range [{lo}, {hi}]")
    return v


def _keyed(off: int, part: str, key: str) -> tuple[int, str]:
    k, sep, v = part.partition(":")
    if k != key or not sep:
        raise MalformedFrame(off, f"expected {key}:<value>, got {part!r}")
    return off + len(key) + 1, v


def _decode_schedule(text: str) -> ScheduleUpdate:
    if not text.endswith("|"):
        raise MalformedFrame(len(text), "schedule frame must end with '|'")
    head, sep, rest = text.partition("|-|")
    if not sep:
        raise MalformedFrame(2, "missing '|-|' separator")

    def tokens(body: str, base: int) -> list[int]:
        out, pos = [], 0
        while pos < len(body):
            if body[pos] != "<":
                raise MalformedFrame(base + pos, "expected '<'")
            close = body.find(">", pos)
            if close < 0:
                raise MalformedFrame(base + pos, "unterminated '<' token")
            out.append(_int(base + pos + 1, body[pos + 1:close]))
            pos = close + 1
        return out

    intervals = tokens(head[2:], 2)
    indices = tokens(rest[:-1], len(head) + 3)
    try:
        sched = Schedule(tuple(intervals), tuple(indices))
    except ValueError as e:
        raise MalformedFrame(len(head) + 3, str(e)) from None
    return ScheduleUpdate(sched)


def decode_frame(data: bytes | str) -> Frame:
    if isinstance(data, (bytes, bytearray)):
        try:
            text = bytes(data).decode("ascii")
        except UnicodeDecodeError as e:
            raise MalformedFrame(e.start, "non-ASCII byte") from None
    else:
        text = data
    if not text:
        raise MalformedFrame(0, "empty frame")
    if text.startswith("2|"):
        return _decode_schedule(text)
    tok = _Tokens(text)
    off, tag = tok.next("frame tag")
    if tag == "INFO":
        o, v = _keyed(*tok.next("APP"), "APP")
        fw = _int(o, v, 1, 15)
        intervals = {}
        listen = None
        for o, part in tok.remaining():
            key, sep, v = part.partition(":")
            if not sep:
                raise MalformedFrame(o, f"expected KEY:value, got {part!r}")
            vo = o + len(key) + 1
            if key == "LSTN":
                listen = _int(vo, v, 1)
                tok.done()
                break
            kind = _BY_TAG.get(key)
            if kind is None or not kind.periodic:
                raise MalformedFrame(o, f"unknown sensor tag {key!r}")
            if kind in intervals:
                raise MalformedFrame(o, f"duplicate sensor tag {key!r}")
            vals, p = [], vo
            for piece in v.split(","):
                vals.append(_int(p, piece, 1))
                p += len(piece) + 1
            intervals[kind] = tuple(vals)
        if listen is None:
            raise MalformedFrame(len(text), "missing LSTN field")
        return Info(fw, intervals, listen)
    if tag == "DATA":
        readings = {}
        battery = None
        for o, part in tok.remaining():
            key, sep, v = part.partition(":")
            if not sep:
                raise MalformedFrame(o, f"expected KEY:value, got {part!r}")
            vo = o + len(key) + 1
            if key == "BAT":
                battery = _int(vo, v, 0, 100)
                tok.done()
                break
            kind = _BY_TAG.get(key)
            if kind is None:
                raise MalformedFrame(o, f"unknown sensor tag {key!r}")
            if kind in readings:
                raise MalformedFrame(o, f"duplicate sensor tag {key!r}")
            try:
                val = float(v)
            except ValueError:
                raise MalformedFrame(vo, f"bad reading {v!r}") from None
            if not math.isfinite(val):
                raise MalformedFrame(vo, "reading must be finite")
            readings[kind] = val
        if battery is None:
            raise MalformedFrame(len(text), "missing BAT field")
        if not readings:
            raise MalformedFrame(off, "data frame without readings")
        return SensorData(readings, battery)
    if tag in ("LISTEN", "PROGOK", "ACK"):
        tok.done()
        return {"LISTEN": Listen, "PROGOK": ProgOk, "ACK": LinkAck}[tag]()
    if tag in ("KIND:STD", "KIND:OTA"):
        tok.done()
        return FrameKindNotice(ota=tag == "KIND:OTA")
    if tag == "OTA":
        co, cmd = tok.next("OTA command")
        o, v = _keyed(*tok.next("FW"), "FW")
        fw = _int(o, v, 1, 15)
        if cmd == "-send":
            o, v = _keyed(*tok.next("SIZE"), "SIZE")
            size = _int(o, v, 1)
            tok.done()
            return OtaSend(fw, size)
        tok.done()
        if cmd == "-start_new_program":
            return OtaStart(fw)
        if cmd == "-delete_program":
            return OtaDelete(fw)
        raise MalformedFrame(co, f"unknown OTA command {cmd!r}")
    raise MalformedFrame(off, f"unknown frame tag {tag!r}")


def phy_size(f: Frame) -> int:
    """Frame length at the 802.15.4 PHY, in bytes."""
    if isinstance(f, SensorData):
        return DATA_FRAME_PHY + DATA_FRAME_EXTRA_READING * (len(f.readings) - 1)
    if isinstance(f, LinkAck):
        return LINK_ACK_PHY
    if isinstance(f, Listen):
        return LISTEN_PHY
    return len(encode_frame(f)) + PHY_OVERHEAD


def describe(f: Frame) -> str:
    """Compact human-readable rendering used in event logs."""
    return encode_frame(f).decode("ascii")
