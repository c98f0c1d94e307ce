import pytest

from ssnsim.errors import ScenarioParseError
from ssnsim.node import Mode
from ssnsim.proto import AppKind
from ssnsim.sim import BUNDLED, load_scenario, parse_scenario, run_scenario

T = AppKind.TEMPERATURE


def rows(log, kind):
    return [line.split("\t") for line in log if not line.startswith("#") and line.split("\t")[1] == kind]


def test_parse_full_grammar():
    sc = parse_scenario("""
# comment
node 0 coordinator
node 1 router fw=3 intervals=TEMP:5,TEMP:7,HUM:10 sd=1,3 battery=80 listen=2
node 2 end_device parent=1 sd=all
link 0 1
arrive 1.5 HUM 10 activity=30
arrive 2 PIR
depart 40 HUM
pir 3 2
pirgen 2 4
battery 5 1 19.5
duration 90
""", "x")
    assert [n.node_id for n in sc.nodes] == [0, 1, 2]
    assert sc.nodes[1].intervals == {T: [5, 7], AppKind.HUMIDITY: [10]}
    assert sc.nodes[2].sd == tuple(range(1, 16))
    assert sc.arrivals == [(1500, AppKind.HUMIDITY, 10, 30_000), (2000, AppKind.PRESENCE, None, None)]
    assert sc.battery == [(5000, 1, 19.5)]
    assert sc.duration_s == 90


@pytest.mark.parametrize("text,lineno", [
    ("node 0 coordinator\nfrobnicate 1", 2),
    ("node x router", 1),
    ("node 1 wizard", 1),
    ("node 1 router fw=0", 1),
    ("node 1 router colour=red", 1),
    ("link 1", 1),
    ("\n\narrive 5 TEMP", 3),
    ("arrive -1 TEMP 5", 1),
    ("arrive 1 BOGUS 5", 1),
    ("arrive 1 TEMP 5 after=2", 1),
    ("pir 5", 1),
    ("battery 1 2", 1),
])
def test_parse_errors_carry_line(text, lineno):
    with pytest.raises(ScenarioParseError) as ei:
        parse_scenario(text)
    assert ei.value.lineno == lineno


def test_empty_scenario():
    res = run_scenario(parse_scenario(""), 10)
    assert res.log == [] and res.ok


def test_reference_arrivals_follow_schedule():
    res = run_scenario("schedule_demo")
    assert res.ok
    sense = rows(res.log, "SENSE")
    idx = [int(r[4].split()[0][4:]) for r in sense]
    assert idx[:13] == [7, 1, 3, 5, 3, 1, 7, 1, 3, 5, 3, 1, 7]
    times = [int(r[0]) for r in sense]
    assert all(b - a == 5000 for a, b in zip(times, times[1:]))
    # every data frame reaches the controller after its sensing event
    rx = [r for r in rows(res.log, "RX") if "#DATA#" in r[4]]
    assert len(rx) == len(sense)
    assert all(int(x[0]) > int(s[0]) for x, s in zip(rx, sense))


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_hold_invariants(name):
    a = run_scenario(name)
    b = run_scenario(name)
    assert a.ok, a.violations
    assert a.text == b.text
    assert a.network.conserved()


def test_seed_changes_generated_pir_only():
    a = run_scenario("enddevice_demo", seed=1)
    b = run_scenario("enddevice_demo", seed=2)
    assert a.log[0].endswith("seed=1 duration_ms=600000")
    assert a.text != b.text
    assert a.text == run_scenario("enddevice_demo", seed=1).text


def test_no_transmission_while_sleeping():
    res = run_scenario("mesh_demo")
    assert not any("sleeping" in v for v in res.violations)


def test_one_info_before_data_after_start():
    res = run_scenario("ota_demo")
    lines = [l for l in res.log if not l.startswith("#")]
    for i, line in enumerate(lines):
        if line.split("\t")[1] == "REBOOT":
            after = [l for l in lines[i + 1:] if "\tTX\t1\t0\t" in l]
            assert "#INFO#" in after[0]
            assert sum("#INFO#" in l for l in after[:3]) == 1


def test_every_schedule_update_answered_once():
    res = run_scenario("ota_demo")
    rx_updates = [r for r in rows(res.log, "RX") if r[3] == "1" and r[4].split("frame=")[1].startswith("2|")]
    progoks = rows(res.log, "ACK")
    assert rx_updates
    assert len([p for p in progoks if "PROGOK" in p[4]]) >= len(rx_updates)


def test_controller_frames_only_in_windows():
    for name in BUNDLED:
        res = run_scenario(name)
        assert not any("outside listen window" in v for v in res.violations)
        for n in res.nodes.values():
            assert not any("outside listen window" in msg for _, msg in n.errors)


def test_end_state_reconciles():
    res = run_scenario("ota_demo")
    node = res.nodes[1]
    row = res.store.devices[1]
    assert node.mode in (Mode.SLEEPING, Mode.LISTENING, Mode.SENSING)
    assert row.firmware_id == node.running_firmware == 7
    assert row.intervals == node.schedule.app_intervals()


def test_unknown_bundled_scenario():
    with pytest.raises(FileNotFoundError):
        load_scenario("no_such_thing")


def test_scenario_unknown_node_reference():
    sc = parse_scenario("node 0 coordinator\nnode 1 router\nlink 0 1\npir 3 7\n")
    with pytest.raises(ScenarioParseError):
        run_scenario(sc, 10)
