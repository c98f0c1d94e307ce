"""File-backed store with the controller's four tables.

Tables: ``register`` (every data frame received), ``devices`` (per-node
battery, listen interval, sensing intervals, running firmware),
``firmwares`` (the fifteen application combinations) and
``ota_firmwares`` (images held on each node's SD card).

Each table is a line-delimited JSON journal under the data directory.
Lines are ``{"op": "put", "row": {...}}`` or ``{"op": "del", "key": ...}``;
loading replays them in order, and :meth:`Store.compact` rewrites each
journal as puts of the live rows only. The ``timestamp_ms`` column of
``register`` and the ``image_size`` column of ``firmwares`` are additions
not present in the original schema.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, TextIO

from . import proto
from .errors import DuplicateSdEntry, ForeignKeyViolation
from .netsim import image_size
from .proto import AppKind

TABLES = ("register", "devices", "firmwares", "ota_firmwares")


def _readings_out(r) -> dict:
    return {AppKind(k).tag: v for k, v in r.items()}


def _readings_in(r) -> dict:
    return {AppKind.parse(k): float(v) for k, v in r.items()}


def _intervals_out(iv) -> dict:
    return {AppKind(k).tag: list(v) for k, v in iv.items()}


def _intervals_in(iv) -> dict:
    return {AppKind.parse(k): tuple(int(x) for x in v) for k, v in iv.items()}


@dataclass(frozen=True)
class RegisterRow:
    id: int
    device_id: int
    firmware_id: int | None
    timestamp_ms: int
    readings: dict
    battery_pct: int

    def to_json(self) -> dict:
        d = asdict(self)
        d["readings"] = _readings_out(self.readings)
        return d

    @classmethod
    def from_json(cls, d) -> "RegisterRow":
        return cls(d["id"], d["device_id"], d["firmware_id"], d["timestamp_ms"],
                   _readings_in(d["readings"]), d["battery_pct"])


@dataclass(frozen=True)
class DeviceRow:
    device_id: int
    battery_pct: int = 100
    listen_interval: int = 1
    intervals: dict = field(default_factory=dict)
    firmware_id: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["intervals"] = _intervals_out(self.intervals)
        return d

    @classmethod
    def from_json(cls, d) -> "DeviceRow":
        return cls(d["device_id"], d["battery_pct"], d["listen_interval"],
                   _intervals_in(d["intervals"]), d["firmware_id"])


@dataclass(frozen=True)
class FirmwareRow:
    firmware_id: int
    temperature: bool
    humidity: bool
    luminosity: bool
    presence: bool
    image_size: int

    @classmethod
    def for_id(cls, fw: int) -> "FirmwareRow":
        apps = proto.apps_of(fw)
        return cls(fw, AppKind.TEMPERATURE in apps, AppKind.HUMIDITY in apps,
                   AppKind.LUMINOSITY in apps, AppKind.PRESENCE in apps, image_size(fw))

    @property
    def bits(self) -> int:
        return self.temperature | self.humidity << 1 | self.luminosity << 2 | self.presence << 3

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "FirmwareRow":
        return cls(**d)


@dataclass(frozen=True)
class OtaFirmwareRow:
    firmware_ota_id: int
    device_id: int
    firmware_id: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d) -> "OtaFirmwareRow":
        return cls(**d)


_ROW_TYPES = {
    "register": (RegisterRow, "id"),
    "devices": (DeviceRow, "device_id"),
    "firmwares": (FirmwareRow, "firmware_id"),
    "ota_firmwares": (OtaFirmwareRow, "firmware_ota_id"),
}


class Store:
    """Single-writer store; pass ``data_dir=None`` for a purely in-memory one."""

    def __init__(self, data_dir: str | Path | None = None):
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.register: dict[int, RegisterRow] = {}
        self.devices: dict[int, DeviceRow] = {}
        self.firmwares: dict[int, FirmwareRow] = {}
        self.ota_firmwares: dict[int, OtaFirmwareRow] = {}
        self._files: dict[str, TextIO] = {}
        if self.data_dir is not None:
            self.data_dir.mkdir(parents=True, exist_ok=True)
            self._load()
        self._next_register = max(self.register, default=0) + 1
        self._next_ota = max(self.ota_firmwares, default=0) + 1
        if not self.firmwares:
            for fw in range(1, 16):
                self._put("firmwares", FirmwareRow.for_id(fw))

    # --- persistence ---------------------------------------------------

    def path(self, table: str) -> Path:
        return self.data_dir / f"{table}.jsonl"

    def _load(self) -> None:
        for table in TABLES:
            p = self.path(table)
            if not p.exists():
                continue
            cls, _ = _ROW_TYPES[table]
            rows = getattr(self, table)
            with p.open() as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    if rec["op"] == "put":
                        row = cls.from_json(rec["row"])
                        rows[self._key(table, row)] = row
                    elif rec["op"] == "del":
                        rows.pop(rec["key"], None)

    @staticmethod
    def _key(table: str, row) -> int:
        return getattr(row, _ROW_TYPES[table][1])

    def _append(self, table: str, rec: dict) -> None:
        if self.data_dir is None:
            return
        fh = self._files.get(table)
        if fh is None:
            fh = self._files[table] = self.path(table).open("a")
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def _put(self, table: str, row) -> None:
        getattr(self, table)[self._key(table, row)] = row
        self._append(table, {"op": "put", "row": row.to_json()})

    def _del(self, table: str, key: int) -> None:
        getattr(self, table).pop(key)
        self._append(table, {"op": "del", "key": key})

    def flush(self) -> None:
        for fh in self._files.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()
        self._files.clear()

    def compact(self) -> None:
        if self.data_dir is None:
            return
        self.close()
        for table in TABLES:
            rows = getattr(self, table)
            tmp = self.path(table).with_suffix(".tmp")
            with tmp.open("w") as fh:
                for key in sorted(rows):
                    fh.write(json.dumps({"op": "put", "row": rows[key].to_json()}, sort_keys=True) + "\n")
            tmp.replace(self.path(table))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # --- writes --------------------------------------------------------

    def upsert_device(self, row: DeviceRow) -> DeviceRow:
        if row.firmware_id is not None and row.firmware_id not in self.firmwares:
            raise ForeignKeyViolation(f"unknown firmware {row.firmware_id}")
        self._put("devices", row)
        return row

    def insert_register(self, device_id: int, firmware_id: int | None, timestamp_ms: int,
                        readings: dict, battery_pct: int) -> RegisterRow:
        if device_id not in self.devices:
            raise ForeignKeyViolation(f"unknown device {device_id}")
        if firmware_id is not None and firmware_id not in self.firmwares:
            raise ForeignKeyViolation(f"unknown firmware {firmware_id}")
        rid = self._next_register
        self._next_register += 1
        row = RegisterRow(rid, device_id, firmware_id, int(timestamp_ms),
                          {AppKind(k): float(v) for k, v in readings.items()}, int(battery_pct))
        self._put("register", row)
        return row

    def add_sd_entry(self, device_id: int, firmware_id: int) -> OtaFirmwareRow:
        if device_id not in self.devices:
            raise ForeignKeyViolation(f"unknown device {device_id}")
        if firmware_id not in self.firmwares:
            raise ForeignKeyViolation(f"unknown firmware {firmware_id}")
        if firmware_id in self.sd_contents(device_id):
            raise DuplicateSdEntry(f"device {device_id} already stores firmware {firmware_id}")
        oid = self._next_ota
        self._next_ota += 1
        row = OtaFirmwareRow(oid, device_id, firmware_id)
        self._put("ota_firmwares", row)
        return row

    def remove_sd_entry(self, device_id: int, firmware_id: int) -> None:
        for key, row in list(self.ota_firmwares.items()):
            if row.device_id == device_id and row.firmware_id == firmware_id:
                self._del("ota_firmwares", key)

    def record_sd_contents(self, device_id: int, firmware_ids: Iterable[int]) -> None:
        """Make the device's SD rows match ``firmware_ids`` exactly."""
        want = set(firmware_ids)
        have = self.sd_contents(device_id)
        for fw in sorted(have - want):
            self.remove_sd_entry(device_id, fw)
        for fw in sorted(want - have):
            self.add_sd_entry(device_id, fw)

    # --- reads ---------------------------------------------------------

    def sd_contents(self, device_id: int) -> set[int]:
        return {r.firmware_id for r in self.ota_firmwares.values() if r.device_id == device_id}

    def query(self, device_id: int | None = None, app: AppKind | None = None,
              t0: int | None = None, t1: int | None = None) -> list[RegisterRow]:
        """Register rows ordered by timestamp; ``t0``/``t1`` bound inclusively."""
        out = []
        for row in self.register.values():
            if device_id is not None and row.device_id != device_id:
                continue
            if app is not None and AppKind(app) not in row.readings:
                continue
            if t0 is not None and row.timestamp_ms < t0:
                continue
            if t1 is not None and row.timestamp_ms > t1:
                continue
            out.append(row)
        return sorted(out, key=lambda r: (r.timestamp_ms, r.id))

    def validate(self) -> list[str]:
        """Full-scan integrity check; returns a list of problems."""
        bad = []
        for r in self.register.values():
            if r.device_id not in self.devices:
                bad.append(f"register {r.id}: dangling device {r.device_id}")
            if r.firmware_id is not None and r.firmware_id not in self.firmwares:
                bad.append(f"register {r.id}: dangling firmware {r.firmware_id}")
        ids = sorted(self.register)
        if ids != list(range(1, len(ids) + 1)):
            bad.append("register ids are not gapless")
        for d in self.devices.values():
            if d.firmware_id is not None and d.firmware_id not in self.firmwares:
                bad.append(f"device {d.device_id}: dangling firmware {d.firmware_id}")
        for f in self.firmwares.values():
            if f.bits != f.firmware_id:
                bad.append(f"firmware {f.firmware_id}: flags disagree with id")
        seen = set()
        for o in self.ota_firmwares.values():
            if o.device_id not in self.devices:
                bad.append(f"ota {o.firmware_ota_id}: dangling device {o.device_id}")
            if o.firmware_id not in self.firmwares:
                bad.append(f"ota {o.firmware_ota_id}: dangling firmware {o.firmware_id}")
            if (o.device_id, o.firmware_id) in seen:
                bad.append(f"ota {o.firmware_ota_id}: duplicate entry")
            seen.add((o.device_id, o.firmware_id))
        return bad

    def snapshot(self) -> dict:
        return {t: {k: v.to_json() for k, v in sorted(getattr(self, t).items())} for t in TABLES}

    # --- export --------------------------------------------------------

    MONITOR_HEADER = ("id", "timestamp_ms", "device_id", "firmware_id", "app", "value", "battery_pct")

    def export_monitor_csv(self, out: TextIO | None = None, by: str = "device") -> str:
        """One CSV line per reading, grouped by device or by application."""
        buf = out or io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.MONITOR_HEADER)
        lines = []
        for r in self.query():
            for kind, v in r.readings.items():
                lines.append((r.id, r.timestamp_ms, r.device_id, r.firmware_id or 0, kind.tag, v, r.battery_pct))
        if by == "app":
            lines.sort(key=lambda x: (x[4], x[1], x[0]))
        else:
            lines.sort(key=lambda x: (x[2], x[1], x[0]))
        w.writerows(lines)
        return buf.getvalue() if out is None else ""
