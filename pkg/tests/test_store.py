import pytest

from ssnsim.errors import DuplicateSdEntry, ForeignKeyViolation
from ssnsim.proto import AppKind
from ssnsim.sim import run_scenario
from ssnsim.store import DeviceRow, Store

T, H = AppKind.TEMPERATURE, AppKind.HUMIDITY


def test_firmwares_seeded():
    s = Store()
    assert sorted(s.firmwares) == list(range(1, 16))
    for fw, row in s.firmwares.items():
        assert row.bits == fw
    assert s.firmwares[6].humidity and s.firmwares[6].luminosity and not s.firmwares[6].temperature
    assert s.validate() == []


def test_foreign_keys():
    s = Store()
    with pytest.raises(ForeignKeyViolation):
        s.insert_register(9, 1, 0, {T: 1.0}, 50)
    with pytest.raises(ForeignKeyViolation):
        s.upsert_device(DeviceRow(1, firmware_id=16))
    s.upsert_device(DeviceRow(1))
    with pytest.raises(ForeignKeyViolation):
        s.insert_register(1, 99, 0, {T: 1.0}, 50)
    with pytest.raises(ForeignKeyViolation):
        s.add_sd_entry(2, 1)


def test_duplicate_sd_entry():
    s = Store()
    s.upsert_device(DeviceRow(1))
    s.add_sd_entry(1, 3)
    with pytest.raises(DuplicateSdEntry):
        s.add_sd_entry(1, 3)
    s.record_sd_contents(1, [1, 7])
    assert s.sd_contents(1) == {1, 7}


def test_query_order_and_filters():
    s = Store()
    s.upsert_device(DeviceRow(1))
    s.upsert_device(DeviceRow(2))
    for t in (500, 100, 300, 200, 400):
        s.insert_register(1 if t % 200 else 2, 1, t, {T: t / 10, H: 1.0} if t == 300 else {T: t / 10}, 90)
    rows = s.query(t0=0, t1=1000)
    assert [r.timestamp_ms for r in rows] == [100, 200, 300, 400, 500]
    assert [r.timestamp_ms for r in s.query(device_id=2)] == [200, 400]
    assert [r.timestamp_ms for r in s.query(app=H)] == [300]
    assert [r.timestamp_ms for r in s.query(t0=200, t1=400)] == [200, 300, 400]


def test_register_ids_gapless():
    s = Store()
    s.upsert_device(DeviceRow(1))
    ids = [s.insert_register(1, None, i, {T: 1.0}, 80).id for i in range(50)]
    assert ids == list(range(1, 51))
    assert s.validate() == []


def test_reload_round_trip(tmp_path):
    s = Store(tmp_path)
    s.upsert_device(DeviceRow(1, 77, 2, {T: (5, 7)}, 1))
    s.upsert_device(DeviceRow(2))
    s.insert_register(1, 1, 10, {T: 21.5}, 77)
    s.insert_register(2, None, 20, {H: 40.25}, 100)
    s.add_sd_entry(1, 1)
    s.add_sd_entry(1, 3)
    s.remove_sd_entry(1, 3)
    s.upsert_device(DeviceRow(1, 70, 2, {T: (5,)}, 1))
    s.close()
    back = Store(tmp_path)
    assert back.snapshot() == s.snapshot()
    # ids continue after a reload
    assert back.insert_register(1, 1, 30, {T: 1.0}, 70).id == 3
    back.close()


def test_compact_preserves_state(tmp_path):
    s = Store(tmp_path)
    s.upsert_device(DeviceRow(1))
    for i in range(5):
        s.upsert_device(DeviceRow(1, 100 - i))
    before = s.snapshot()
    s.flush()
    lines = len((tmp_path / "devices.jsonl").read_text().splitlines())
    s.compact()
    assert len((tmp_path / "devices.jsonl").read_text().splitlines()) < lines
    assert Store(tmp_path).snapshot() == before


def test_validate_detects_corruption():
    s = Store()
    s.upsert_device(DeviceRow(1))
    s.insert_register(1, 1, 0, {T: 1.0}, 50)
    del s.devices[1]
    assert any("dangling device" in p for p in s.validate())


def test_monitor_csv():
    s = Store()
    assert s.export_monitor_csv() == "id,timestamp_ms,device_id,firmware_id,app,value,battery_pct\n"
    s.upsert_device(DeviceRow(2))
    s.upsert_device(DeviceRow(1))
    s.insert_register(2, 3, 10, {T: 20.0, H: 50.0}, 99)
    s.insert_register(1, 1, 20, {T: 21.0}, 98)
    lines = s.export_monitor_csv().splitlines()
    assert lines[1].startswith("2,20,1,1,TEMP")
    by_app = s.export_monitor_csv(by="app").splitlines()
    assert [l.split(",")[4] for l in by_app[1:]] == ["HUM", "TEMP", "TEMP"]


def test_case4_scenario_records_sd(tmp_path):
    res = run_scenario("ota_demo", data_dir=tmp_path)
    assert res.ok
    assert 3 in res.store.sd_contents(1)
    res.store.close()
    assert 3 in Store(tmp_path).sd_contents(1)
