import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssnsim import proto
from ssnsim.errors import (
    EmptyAppSet,
    InvalidFirmwareId,
    MalformedFrame,
    NoPeriodicApps,
    ScheduleTooLarge,
)
from ssnsim.proto import AppConfig, AppKind, build_schedule, decode_frame, encode_frame

T, H, L, P = AppKind.TEMPERATURE, AppKind.HUMIDITY, AppKind.LUMINOSITY, AppKind.PRESENCE

# firmware id -> (presence, luminosity, humidity, temperature), written out by hand
CODIFICATION = {
    1: (0, 0, 0, 1), 2: (0, 0, 1, 0), 3: (0, 0, 1, 1), 4: (0, 1, 0, 0),
    5: (0, 1, 0, 1), 6: (0, 1, 1, 0), 7: (0, 1, 1, 1), 8: (1, 0, 0, 0),
    9: (1, 0, 0, 1), 10: (1, 0, 1, 0), 11: (1, 0, 1, 1), 12: (1, 1, 0, 0),
    13: (1, 1, 0, 1), 14: (1, 1, 1, 0), 15: (1, 1, 1, 1),
}


def oracle_events(intervals_by_bit, hyperperiod):
    """Brute force: every second in [0, H] with the OR of apps whose interval divides it."""
    out = []
    for t in range(hyperperiod + 1):
        m = 0
        for bit, ivs in intervals_by_bit:
            if any(t % i == 0 for i in ivs):
                m |= bit
        if m:
            out.append((t, m))
    return out


def test_codification_table_exhaustive():
    for fw, (p, l, h, t) in CODIFICATION.items():
        apps = {k for k, flag in zip((P, L, H, T), (p, l, h, t)) if flag}
        assert proto.firmware_of(apps) == fw
        assert proto.apps_of(fw) == apps


def test_firmware_examples():
    assert proto.firmware_of({T}) == 1
    assert proto.firmware_of({P, L, H, T}) == 15
    assert proto.firmware_of({L}) == 4
    assert proto.apps_of(6) == {L, H}
    assert proto.apps_of(7) == {L, H, T}
    assert proto.apps_of(8) == {P}


def test_bijection_all_subsets():
    subsets = [set(c) for r in range(1, 5) for c in itertools.combinations(AppKind, r)]
    assert len(subsets) == 15
    ids = {proto.firmware_of(s) for s in subsets}
    assert ids == set(range(1, 16))
    for s in subsets:
        assert proto.apps_of(proto.firmware_of(s)) == s


def test_firmware_errors():
    with pytest.raises(EmptyAppSet):
        proto.firmware_of(set())
    for bad in (0, 16, -1):
        with pytest.raises(InvalidFirmwareId):
            proto.apps_of(bad)


def test_app_config_validation():
    with pytest.raises(ValueError):
        AppConfig(T, 0)
    with pytest.raises(ValueError):
        AppConfig(T)
    with pytest.raises(ValueError):
        AppConfig(P, 5)
    assert AppConfig(P).sensing_interval is None


def test_reference_schedule():
    s = build_schedule([AppConfig(T, 5), AppConfig(H, 10), AppConfig(L, 15)])
    assert s.intervals == (5, 5, 5, 5, 5, 5)
    assert s.indices == (7, 1, 3, 5, 3, 1, 7)
    assert s.hyperperiod == 30


def test_single_progression():
    s = build_schedule([AppConfig(T, 5)])
    assert s.intervals == (5,)
    assert s.indices == (1, 1)
    assert s.hyperperiod == 5


def test_coprime_against_oracle():
    s = build_schedule([AppConfig(T, 3), AppConfig(H, 7)])
    assert s.hyperperiod == 21
    assert len(s.indices) == 10
    events = list(zip(s.offsets().tolist(), s.indices))
    assert events == oracle_events([(1, [3]), (2, [7])], 21)


def test_presence_excluded_from_schedule():
    s = build_schedule([AppConfig(T, 5), AppConfig(P)])
    assert s.indices == (1, 1)
    with pytest.raises(NoPeriodicApps):
        build_schedule([AppConfig(P)])


def test_schedule_caps():
    with pytest.raises(ScheduleTooLarge):
        build_schedule([AppConfig(T, 86_401)])
    with pytest.raises(ScheduleTooLarge):
        build_schedule([AppConfig(T, 86_399), AppConfig(H, 86_391), AppConfig(L, 86_383)])


def test_same_kind_two_intervals_union():
    s = build_schedule([AppConfig(T, 5), AppConfig(T, 7)])
    assert s.hyperperiod == 35
    times = set(s.offsets().tolist())
    assert times == {t for t in range(36) if t % 5 == 0 or t % 7 == 0}
    assert s.app_intervals() == {T: (5, 7)}


def _replay_counts(s, cycles):
    counts = {k: 0 for k in s.kinds}
    times = {k: [] for k in s.kinds}
    offs = s.offsets()
    for c in range(cycles):
        for pos in range(len(s.intervals)):
            t = c * s.hyperperiod + int(offs[pos])
            for k in s.kinds:
                if s.indices[pos] & k.bit:
                    counts[k] += 1
                    times[k].append(t)
    return counts, times


def test_randomized_against_oracle():
    rng = random.Random(7)
    for _ in range(300):
        kinds = rng.sample([T, H, L], rng.randint(1, 3))
        cfgs = [AppConfig(k, rng.randint(1, 60)) for k in kinds]
        s = build_schedule(cfgs)
        hp = math.lcm(*(c.sensing_interval for c in cfgs))
        assert s.hyperperiod == hp
        full = 0
        for c in cfgs:
            full |= c.kind.bit
        assert s.indices[0] == s.indices[-1] == full
        assert list(zip(s.offsets().tolist(), s.indices)) == oracle_events(
            [(c.kind.bit, [c.sensing_interval]) for c in cfgs], hp)
        counts, times = _replay_counts(s, 3)
        for c in cfgs:
            assert counts[c.kind] == 3 * hp // c.sensing_interval
            assert times[c.kind] == list(range(0, 3 * hp, c.sensing_interval))


def test_event_at():
    s = build_schedule([AppConfig(T, 5), AppConfig(H, 10), AppConfig(L, 15)])
    assert s.event_at(0) == (0, 0)
    assert s.event_at(1) == (5000, 1)
    assert s.event_at(10_000) == (10_000, 2)
    assert s.event_at(29_999) == (30_000, 0)
    assert s.event_at(65_000) == (65_000, 1)


def test_info_encoding():
    f = proto.Info(7, {T: 5, H: 10, L: 15}, 1)
    assert encode_frame(f) == b"#INFO#APP:7#TEMP:5#HUM:10#LDR:15#LSTN:1"
    assert decode_frame(encode_frame(f)) == f


def test_info_without_sensors():
    f = proto.Info(8, {}, 1)
    assert encode_frame(f) == b"#INFO#APP:8#LSTN:1"


def test_reference_frame():
    s = build_schedule([AppConfig(T, 5), AppConfig(H, 10), AppConfig(L, 15)])
    text = b"2|<5><5><5><5><5><5>|-|<7><1><3><5><3><1><7>|"
    assert encode_frame(proto.ScheduleUpdate(s)) == text
    assert decode_frame(text) == proto.ScheduleUpdate(s)
    assert decode_frame(text.decode()).schedule == s


FIXED_FRAMES = [
    proto.Listen(),
    proto.ProgOk(),
    proto.LinkAck(),
    proto.FrameKindNotice(True),
    proto.FrameKindNotice(False),
    proto.OtaSend(3, 79704),
    proto.OtaStart(6),
    proto.OtaDelete(15),
    proto.SensorData({T: 21.5}, 87),
    proto.SensorData({P: 1.0}, 0),
    proto.SensorData({T: -3.25, H: 40.0, L: 512.0}, 100),
]


@pytest.mark.parametrize("frame", FIXED_FRAMES, ids=lambda f: type(f).__name__)
def test_round_trip_fixed(frame):
    assert decode_frame(encode_frame(frame)) == frame


kinds_st = st.sampled_from([T, H, L])
interval_maps = st.dictionaries(kinds_st, st.lists(st.integers(1, 3600), min_size=1, max_size=2), max_size=3)
schedules = st.lists(st.tuples(kinds_st, st.integers(1, 60)), min_size=1, max_size=4).map(
    lambda items: build_schedule([AppConfig(k, i) for k, i in items]))
readings = st.dictionaries(st.sampled_from(list(AppKind)),
                           st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False), min_size=1)

frames = st.one_of(
    st.builds(proto.Info, st.integers(1, 15), interval_maps, st.integers(1, 60)),
    st.builds(proto.SensorData, readings, st.integers(0, 100)),
    st.builds(proto.ScheduleUpdate, schedules),
    st.builds(proto.OtaSend, st.integers(1, 15), st.integers(1, 131072)),
    st.builds(proto.OtaStart, st.integers(1, 15)),
    st.builds(proto.OtaDelete, st.integers(1, 15)),
    st.builds(proto.FrameKindNotice, st.booleans()),
    st.just(proto.Listen()),
    st.just(proto.ProgOk()),
)


@settings(max_examples=300, deadline=None)
@given(frames)
def test_round_trip_property(frame):
    data = encode_frame(frame)
    assert decode_frame(data) == frame
    assert proto.phy_size(frame) > 0


@pytest.mark.parametrize("text", [
    "",
    "#INFO#APP:16#TEMP:5#LSTN:1",
    "#INFO#APP:0#LSTN:1",
    "#NOPE",
    "#DATA#BAT:101",
    "#DATA#TEMP:abc#BAT:5",
    "#OTA#-send#FW:3",
    "#OTA#-explode#FW:3",
    "2|<5><5>|-|<1><1>|",
    "2|<5>|-|<1>",
    "2|<0>|-|<1><1>|",
    "#KIND:XYZ",
    "#LISTEN#extra",
    "hello",
])
def test_decode_rejects(text):
    with pytest.raises(MalformedFrame) as ei:
        decode_frame(text)
    assert ei.value.offset >= 0
    assert ei.value.reason


def test_decode_reports_offset():
    with pytest.raises(MalformedFrame) as ei:
        decode_frame("#INFO#APP:16#LSTN:1")
    assert ei.value.offset == len("#INFO#APP:")  # points at the bad value


def test_phy_sizes():
    assert proto.phy_size(proto.SensorData({T: 21.5}, 90)) == 102
    assert proto.phy_size(proto.SensorData({T: 21.5, H: 40.0}, 90)) == 112
    assert proto.phy_size(proto.LinkAck()) == 49
    assert proto.phy_size(proto.Listen()) == 87
    f = proto.OtaStart(3)
    assert proto.phy_size(f) == len(encode_frame(f)) + 21


def test_app_intervals_minimal():
    s = build_schedule([AppConfig(T, 5), AppConfig(T, 10), AppConfig(H, 4)])
    assert s.app_intervals() == {T: (5,), H: (4,)}
    assert np.all(np.diff(s.offsets()) > 0)
