"""``ssnsim`` command line: run scenarios, print reports, encode/decode frames, plan deployments.

Exit codes: 0 success, 1 invariant violation, 2 usage or parse error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import controller, energy, netsim, proto
from .errors import MalformedFrame, MissingData, ScenarioParseError, SSNError
from .proto import AppConfig, AppKind
from .sim import Simulation, load_scenario
from .store import TABLES, Store

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2

UPDATE_FIRMWARES = (1, 3, 7, 15)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _intervals_arg(text: str) -> list[AppConfig]:
    """``TEMP:5,HUM:10`` -> configs; a bare ``PIR`` adds presence."""
    out = []
    for item in filter(None, text.split(",")):
        tag, _, iv = item.partition(":")
        kind = AppKind.parse(tag)
        out.append(AppConfig(kind, int(iv) if iv else None))
    return out


# --- run ----------------------------------------------------------------


def cmd_run(args) -> int:
    if args.duration is not None and args.duration <= 0:
        raise _Usage("--duration must be > 0")
    scenario = load_scenario(args.scenario)
    draws = energy.load_profile(args.profile)
    sim = Simulation(scenario, draws=draws, seed=args.seed, data_dir=args.data_dir)
    result = sim.run(args.duration)
    if args.log:
        Path(args.log).write_text(result.text)
    else:
        sys.stdout.write(result.text)
    result.store.close()
    for v in result.violations:
        print(f"invariant violation: {v}", file=sys.stderr)
    return EXIT_VIOLATION if result.violations else EXIT_OK


# --- report -------------------------------------------------------------


def update_time_rows(link: netsim.LinkModel = netsim.LinkModel(), hops: int = 1) -> list[dict]:
    rows = []
    for fw in UPDATE_FIRMWARES:
        desc = netsim.descriptor_for(fw, hops, link=link)
        res = netsim.ota_transfer(desc, link)
        rows.append(dict(firmware=fw, command="-send", frames=desc.frames, size=desc.size_bytes,
                         bytes=res.bytes_sent, time_s=res.duration, rate_kbps=res.effective_rate / 1000))
        start = netsim.command_transfer(hops, link)
        rows.append(dict(firmware=fw, command="-start_new_program", frames=start.frames, size=0,
                         bytes=start.bytes_sent, time_s=start.duration, rate_kbps=start.effective_rate / 1000))
    return rows


def lifetime_rows(draws: energy.CurrentDraws) -> list[dict]:
    rows = []
    for role in (energy.Role.ROUTER, energy.Role.END_DEVICE):
        cfg = energy.reference_router_config(role)
        ec = energy.energy_rate(cfg, draws)
        rows.append(dict(role=role.value, ec_ma=ec, lifetime_days=energy.lifetime(cfg, draws)))
    return rows


def cmd_report(args) -> int:
    if args.kind == "update-times":
        print("firmware\tcommand\tframes\tsize_B\tbytes_sent\ttime_s\trate_kbps")
        for r in update_time_rows():
            size = r["size"] or "-"
            print(f"{r['firmware']}\t{r['command']}\t{r['frames']}\t{size}\t{r['bytes']}\t"
                  f"{r['time_s']:.3f}\t{r['rate_kbps']:.2f}")
    elif args.kind == "lifetimes":
        draws = energy.load_profile(args.profile)
        print("role\tavg_current_mA\tlifetime_days")
        for r in lifetime_rows(draws):
            print(f"{r['role']}\t{r['ec_ma']:.4f}\t{r['lifetime_days']:.2f}")
    else:
        if args.data_dir is None:
            store = Store(None)
        else:
            d = Path(args.data_dir)
            if not d.is_dir():
                raise MissingData(f"data directory {d} does not exist")
            if not any((d / f"{t}.jsonl").exists() for t in TABLES):
                raise MissingData(f"no store tables under {d}")
            store = Store(d)
        sys.stdout.write(store.export_monitor_csv(by=args.by))
        store.close()
    return EXIT_OK


# --- codec --------------------------------------------------------------


def pretty_schedule(s: proto.Schedule) -> str:
    lines = [f"hyperperiod: {s.hyperperiod} s",
             f"intervals: {' '.join(map(str, s.intervals))}",
             f"indices: {' '.join(map(str, s.indices))}",
             "t_s\tindex\tapps"]
    for t, idx in zip(s.offsets(), s.indices):
        tags = ",".join(k.tag for k in proto.PERIODIC_KINDS if idx & k.bit)
        lines.append(f"{t}\t{idx}\t{tags}")
    return "\n".join(lines)


def pretty_frame(f) -> str:
    if isinstance(f, proto.ScheduleUpdate):
        return "ScheduleUpdate\n" + pretty_schedule(f.schedule)
    return f"{type(f).__name__}\t{proto.describe(f)}\tphy={proto.phy_size(f)}B"


def cmd_codec(args) -> int:
    if args.op == "decode":
        texts = args.input or [line for line in sys.stdin.read().splitlines() if line.strip()]
        for text in texts:
            f = proto.decode_frame(text)
            print(proto.describe(f) if args.canonical else pretty_frame(f))
        return EXIT_OK
    configs = _intervals_arg(args.apps)
    if args.info:
        fw = args.firmware or proto.firmware_of({c.kind for c in configs})
        periodic = [c for c in configs if c.kind.periodic]
        intervals = proto.build_schedule(periodic).app_intervals() if periodic else {}
        frame = proto.Info(fw, intervals, args.listen)
    else:
        frame = proto.ScheduleUpdate(proto.build_schedule(configs))
    print(proto.describe(frame))
    return EXIT_OK


# --- plan ---------------------------------------------------------------


def cmd_plan(args) -> int:
    running = proto.check_firmware(args.running) if args.running else None
    intervals: dict = {}
    for c in _intervals_arg(args.intervals or ""):
        if c.sensing_interval is not None:
            intervals.setdefault(c.kind, []).append(c.sensing_interval)
    sd = {proto.check_firmware(int(x)) for x in filter(None, (args.sd or "").split(","))}
    if running:
        sd.add(running)
        for k in proto.apps_of(running):
            if k.periodic and k not in intervals:
                intervals[k] = [60]
    view = controller.NodeView(args.node, 100, running, {k: tuple(v) for k, v in intervals.items()},
                               frozenset(sd), 1)
    req = controller.AppRequest(AppKind.parse(args.app), args.interval, 0)
    plan = controller.plan_deployment(view, req)
    print(f"case={int(plan.case)} ({plan.case.name}) node={plan.node_id} fw={plan.target_firmware or 0}")
    for step in plan.steps:
        print(f"send\t{proto.describe(step.frame)}\tack={step.ack}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssnsim", description="Shared sensor network simulator and controller.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate a scenario and print its event log")
    r.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    r.add_argument("--data-dir", help="directory for the store tables (default: in memory)")
    r.add_argument("--duration", type=float, help="simulated seconds (default: scenario or 600)")
    r.add_argument("--seed", type=int, default=0, help="seed for generated presence events")
    r.add_argument("--profile", default="default", help="current-draw profile file")
    r.add_argument("--log", help="write the event log here instead of stdout")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="print update-time, lifetime or monitoring tables")
    rep.add_argument("kind", choices=("update-times", "lifetimes", "monitor"))
    rep.add_argument("--profile", default="default")
    rep.add_argument("--data-dir")
    rep.add_argument("--by", choices=("device", "app"), default="device")
    rep.set_defaults(func=cmd_report)

    c = sub.add_parser("codec", help="encode or decode wire frames")
    csub = c.add_subparsers(dest="op", required=True, parser_class=_Parser)
    enc = csub.add_parser("encode", help="encode a schedule (or an INFO frame with --info)")
    enc.add_argument("apps", help="app intervals, e.g. TEMP:5,HUM:10,LDR:15")
    enc.add_argument("--info", action="store_true")
    enc.add_argument("--firmware", type=int)
    enc.add_argument("--listen", type=int, default=1)
    dec = csub.add_parser("decode", help="decode frames given as arguments or on stdin")
    dec.add_argument("input", nargs="*")
    dec.add_argument("--canonical", action="store_true", help="print the re-encoded frame only")
    c.set_defaults(func=cmd_codec)

    pl = sub.add_parser("plan", help="show the deployment plan for one request")
    pl.add_argument("app")
    pl.add_argument("interval", type=int, nargs="?")
    pl.add_argument("--running", type=int, default=0, help="running firmware id (0 = none)")
    pl.add_argument("--intervals", help="running intervals, e.g. TEMP:5")
    pl.add_argument("--sd", help="comma-separated firmware ids on the SD card")
    pl.add_argument("--node", type=int, default=1)
    pl.set_defaults(func=cmd_plan)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioParseError, MalformedFrame, MissingData, _Usage, FileNotFoundError, ValueError) as e:
        print(f"ssnsim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SSNError as e:
        # runtime invariant failures (buffer overflow in strict mode, time reversal, ...)
        print(f"ssnsim: invariant violation: {e}", file=sys.stderr)
        return EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
