import pytest

from ssnsim import proto
from ssnsim.energy import Role
from ssnsim.errors import SdFull, UnknownFirmware
from ssnsim.node import LISTEN_WINDOW_MS, SCHEDULE_LEAD_MS, Mode, Node, SdImage
from ssnsim.proto import AppConfig, AppKind
from ssnsim.sim import parse_scenario, run_scenario

T, H, L, P = AppKind.TEMPERATURE, AppKind.HUMIDITY, AppKind.LUMINOSITY, AppKind.PRESENCE
REFERENCE = [AppConfig(T, 5), AppConfig(H, 10), AppConfig(L, 15)]


def reference_node(**kw):
    n = Node(1, **kw)
    info = n.on_setup(0, 7, REFERENCE)
    n.settle(0)
    return n, info


def open_window(n, now):
    n.alarm2_next = now
    return n.on_alarm2(now)


def test_setup_emits_info():
    n, info = reference_node()
    assert proto.encode_frame(info) == b"#INFO#APP:7#TEMP:5#HUM:10#LDR:15#LSTN:1"
    assert n.mode is Mode.SLEEPING
    assert n.alarm1_next == SCHEDULE_LEAD_MS
    assert n.alarm2_next == 60_000
    assert 7 in n.sd_store


def test_setup_presence_only():
    n = Node(2, Role.END_DEVICE)
    info = n.on_setup(0, 8, [AppConfig(P)])
    assert info == proto.Info(8, {}, 1)
    assert n.alarm1_next is None


def test_setup_without_firmware():
    n = Node(3)
    assert n.on_setup(0, None) is None
    assert n.alarm1_next is None and n.alarm2_next == 60_000


def test_alarm1_follows_reference():
    n, _ = reference_node()
    a = n.anchor_ms
    f = n.on_alarm1(a)
    assert set(f.readings) == {T, H, L}
    assert n.alarm1_next == a + 5000
    n.settle(a)
    f = n.on_alarm1(a + 5000)
    assert set(f.readings) == {T}
    n.settle(a + 5000)
    f = n.on_alarm1(a + 10_000)
    assert set(f.readings) == {T, H}
    assert f.battery_pct == 100


def test_three_hyperperiods_match_oracle():
    n, _ = reference_node()
    a = n.anchor_ms
    fired = {T: [], H: [], L: []}
    while n.alarm1_next < a + 90_000:
        t = n.alarm1_next
        f = n.on_alarm1(t)
        n.settle(t)
        for k in f.readings:
            fired[k].append((t - a) // 1000)
    for k, iv in ((T, 5), (H, 10), (L, 15)):
        assert fired[k] == list(range(0, 90, iv))


def test_empty_window_returns_to_sleep():
    n, _ = reference_node()
    out = open_window(n, 60_000)
    assert out == [proto.Listen()]
    assert n.mode is Mode.LISTENING and n.window_end == 60_000 + LISTEN_WINDOW_MS
    n.on_window_close(61_000)
    assert n.mode is Mode.SLEEPING
    assert n.alarm2_next == 120_000
    assert n.alarm1_next >= 61_000


def test_schedule_update_acknowledged():
    n = Node(1)
    n.on_setup(0, 3, [AppConfig(T, 5)])
    n.settle(0)
    open_window(n, 60_000)
    sched = proto.build_schedule([AppConfig(T, 10), AppConfig(H, 20)])
    assert n.on_frame(60_050, proto.FrameKindNotice(False)) == []
    assert n.on_frame(60_060, proto.ScheduleUpdate(sched)) == [proto.ProgOk()]
    assert n.schedule == sched


def test_schedule_outside_firmware_rejected():
    n = Node(1)
    n.on_setup(0, 1, [AppConfig(T, 5)])
    n.settle(0)
    open_window(n, 60_000)
    n.on_frame(60_050, proto.FrameKindNotice(False))
    bad = proto.build_schedule([AppConfig(H, 10)])
    assert n.on_frame(60_060, proto.ScheduleUpdate(bad)) == []
    assert n.schedule.bits == 1
    assert n.errors


def test_frame_needs_kind_notice():
    n, _ = reference_node()
    open_window(n, 60_000)
    assert n.on_frame(60_010, proto.OtaStart(7)) == []
    assert n.mode is Mode.LISTENING
    assert any("notice" in msg for _, msg in n.errors)


def test_frame_outside_window_ignored():
    n, _ = reference_node()
    assert n.on_frame(30_000, proto.FrameKindNotice(True)) == []
    assert n.errors


def test_ota_send_then_start():
    n = Node(1)
    n.on_setup(0, 1, [AppConfig(T, 10)])
    n.settle(0)
    open_window(n, 60_000)
    n.on_frame(60_030, proto.FrameKindNotice(True))
    n.on_frame(60_040, proto.OtaSend(6, 77_000))
    assert n.transferring == 6
    assert n.on_alarm1(70_000) is None  # sensing skipped during the transfer
    assert n.on_alarm2(120_000) == []  # no new window while busy
    assert n.on_transfer_complete(180_000) == [proto.ProgOk()]
    assert n.sd_store[6].size_bytes == 77_000
    n.on_window_close(180_000)
    assert n.mode is Mode.SLEEPING
    open_window(n, 240_000)
    n.on_frame(240_030, proto.FrameKindNotice(True))
    assert n.on_frame(240_040, proto.OtaStart(6)) == []
    assert n.mode is Mode.REBOOTING
    info = n.on_reboot_done(242_040)
    assert info.firmware == 6
    assert n.running_firmware == 6
    # new apps start at the default interval
    assert info.sensor_intervals == {H: (60,), L: (60,)}


def test_restart_keeps_known_intervals():
    n = Node(1, sd_store={})
    n.preload([1, 3])
    n.on_setup(0, 1, [AppConfig(T, 7)])
    n.settle(0)
    open_window(n, 60_000)
    n.on_frame(60_010, proto.FrameKindNotice(True))
    n.on_frame(60_020, proto.OtaStart(3))
    info = n.on_reboot_done(62_020)
    assert info.sensor_intervals == {T: (7,), H: (60,)}


def test_start_unknown_firmware():
    n, _ = reference_node()
    open_window(n, 60_000)
    n.on_frame(60_010, proto.FrameKindNotice(True))
    assert n.on_frame(60_020, proto.OtaStart(12)) == []
    assert n.running_firmware == 7
    strict, _ = reference_node(strict=True)
    open_window(strict, 60_000)
    strict.on_frame(60_010, proto.FrameKindNotice(True))
    with pytest.raises(UnknownFirmware):
        strict.on_frame(60_020, proto.OtaDelete(12))


def test_delete_running_idles_node():
    n, _ = reference_node()
    open_window(n, 60_000)
    n.on_frame(60_010, proto.FrameKindNotice(True))
    assert n.on_frame(60_020, proto.OtaDelete(7)) == [proto.ProgOk()]
    assert n.running_firmware is None and n.alarm1_next is None
    assert n.check() == []


def test_pir_handling():
    n = Node(2, Role.END_DEVICE)
    n.on_setup(0, 8, [AppConfig(P)])
    n.settle(0)
    before = n.battery_mah
    f = n.on_pir(5_000)
    assert f.readings == {P: 1.0}
    assert n.battery_mah < before
    m, _ = reference_node()
    assert m.on_pir(5_000) is None
    assert any("presence" in msg for _, msg in m.errors)


def test_pir_does_not_shift_alarm1():
    base = """
node 0 coordinator
node 1 router fw=9 intervals=TEMP:5
link 0 1
"""
    quiet = run_scenario(parse_scenario(base), 120)
    noisy = run_scenario(parse_scenario(base + "pir 4.999 1\npir 17.3 1\npir 61 1\n"), 120)

    def sense_times(res):
        return [line.split("\t")[0] for line in res.log
                if "\tSENSE\t" in line and "pir=1" not in line]

    assert sense_times(quiet) == sense_times(noisy)
    assert sum("pir=1" in line for line in noisy.log) == 3


def test_sd_limits():
    with pytest.raises(ValueError):
        SdImage(3, 131_073)
    with pytest.raises(ValueError):
        SdImage(3, 0)
    n = Node(1)
    n.sd_store = {100 + i: SdImage(1, 10) for i in range(16_000)}
    with pytest.raises(SdFull):
        n.preload([2])


def test_battery_drains_with_time():
    n, _ = reference_node()
    n.account(3_600_000)
    assert n.battery_mah < n.battery_capacity
    assert n.battery_pct <= 100


def test_end_device_awake_only_in_window():
    n = Node(2, Role.END_DEVICE)
    n.on_setup(0, 1, [AppConfig(T, 10)])
    n.settle(0)
    assert not n.awake_at(30_000)
    open_window(n, 60_000)
    assert n.awake_at(60_500)
    assert not n.awake_at(61_000)
    r = Node(3, Role.ROUTER)
    assert r.awake_at(12_345)
