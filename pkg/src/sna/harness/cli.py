"""``sna`` command line: simulate, serve the realtime roles, recompute reports."""

from __future__ import annotations

import argparse
import asyncio
import contextlib
import json
import logging
import os
import signal
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from ..domain import ContractViolation, SamplingInterval
from ..envsim import calibrate_trace, trace_exceedance
from ..metrics import build_report, report_csv, report_json
from .config import ConfigError, RunConfig, default_config, dump_config, load_config
from .eventlog import EventLog

log = logging.getLogger("sna")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def _configure_logging() -> None:
    level = os.environ.get("SNA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)


def _load(args: argparse.Namespace) -> tuple[RunConfig, Optional[Path]]:
    path = args.config_pos or args.config
    if path is None:
        cfg, base = default_config(), None
    else:
        cfg, base = load_config(path), Path(path).resolve().parent
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "scale", None) is not None:
        overrides["realtime"] = replace(cfg.realtime, scale=args.scale)
    try:
        cfg = cfg.with_overrides(**overrides)
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from None
    return cfg, base


def _write_outputs(out: Path, eventlog: EventLog, report) -> None:
    """Write every artefact to temporaries first so a failure leaves nothing half-written."""
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "events.ndjson": eventlog.to_bytes(),
        "report.csv": report_csv(report).encode("utf-8"),
        "report.json": report_json(report).encode("utf-8"),
    }
    tmps = []
    for name, data in files.items():
        tmp = out / f".{name}.tmp"
        tmp.write_bytes(data)
        tmps.append((tmp, out / name))
    for tmp, final in tmps:
        os.replace(tmp, final)


def _summary(report) -> str:
    lines = ["node  tx_saved  exceed  avg_delta  delay_mean_ms"]
    for n in report.nodes:
        exceed = "-" if n.exceed_frac is None else f"{n.exceed_frac:.3f}"
        avg = "-" if n.avg_delta is None else f"{n.avg_delta:.3f}"
        delay = "-" if n.delay_mean_ms is None else f"{n.delay_mean_ms:.0f}"
        lines.append(f"{n.node:>4}  {n.tx_saved:>8.3f}  {exceed:>6}  {avg:>9}  {delay:>13}")
    return "\n".join(lines)


def cmd_simulate(args: argparse.Namespace) -> int:
    from .realtime import run_realtime
    from .virtual import run_virtual

    cfg, base = _load(args)
    out = Path(args.out or cfg.out or "out")
    runner = run_realtime if (args.realtime or cfg.mode == "realtime") else run_virtual
    if runner is run_realtime and cfg.mode != "realtime":
        cfg = replace(cfg, mode="realtime")
    trace = cfg.build_trace(base)
    result = runner(cfg, trace)
    _write_outputs(out, result.log, result.report)
    print(_summary(result.report))
    print(f"wrote {out}/events.ndjson, report.csv, report.json")
    return EXIT_OK


def _read_log(path: str) -> EventLog:
    try:
        return EventLog.read(path)
    except OSError as exc:
        raise ConfigError(f"cannot read event log {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: malformed event log ({exc})") from None


def cmd_report(args: argparse.Namespace) -> int:
    logs = [_read_log(p) for p in args.eventlog]
    eventlog = logs[0] if len(logs) == 1 else EventLog.merge(logs)
    report = build_report(eventlog)
    text = report_json(report) if args.format == "json" else report_csv(report)
    if args.out:
        Path(args.out).write_bytes(text.encode("utf-8"))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    cfg, base = _load(args)
    if cfg.trace_csv is not None:
        cfg.build_trace(base)
    print(json.dumps({"ok": True, "nodes": cfg.node_ids, "duration_s": cfg.duration_s}))
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg, _ = _load(args)
    tuned = calibrate_trace(cfg.trace, node=cfg.node_ids[0], threshold=cfg.agent.threshold)
    cfg = replace(cfg, trace=tuned.config)
    trace = cfg.build_trace()
    rates = {str(i.seconds): round(trace_exceedance(trace, cfg.node_ids[0], i, cfg.agent.threshold), 6)
             for i in SamplingInterval.all()}
    sys.stderr.write(json.dumps({"exceedance": rates}) + "\n")
    text = dump_config(cfg)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _role_log(args: argparse.Namespace, name: str, cfg: RunConfig) -> Optional[EventLog]:
    from .virtual import log_run_start

    if not args.out:
        return None
    eventlog = EventLog(strict_order=False)
    log_run_start(eventlog, cfg, f"realtime-{name}")
    return eventlog


def _flush_role_log(args: argparse.Namespace, name: str, eventlog: Optional[EventLog]) -> None:
    if eventlog is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        eventlog.write(out / f"{name}.ndjson")


def _serve(args: argparse.Namespace, name: str, cfg: RunConfig, coro_factory) -> int:
    eventlog = _role_log(args, name, cfg)

    async def until_signalled() -> None:
        task = asyncio.ensure_future(coro_factory(eventlog))
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, task.cancel)
        with contextlib.suppress(asyncio.CancelledError):
            await task

    try:
        asyncio.run(until_signalled())
    except KeyboardInterrupt:
        pass
    except ConnectionError as exc:
        _flush_role_log(args, name, eventlog)
        return _fail("connection", str(exc), EXIT_RUNTIME)
    _flush_role_log(args, name, eventlog)
    return EXIT_OK


def cmd_serve_dashboard(args: argparse.Namespace) -> int:
    from .realtime import serve_dashboard

    cfg, _ = _load(args)
    return _serve(args, "dashboard", cfg, lambda ev: serve_dashboard(cfg, args.port, ev, epoch=args.epoch))


def cmd_serve_analytics(args: argparse.Namespace) -> int:
    from .realtime import serve_analytics

    cfg, _ = _load(args)
    checkpoint = args.checkpoint or cfg.realtime.checkpoint
    return _serve(args, "analytics", cfg,
                  lambda ev: serve_analytics(cfg, args.port, ev, checkpoint=checkpoint, epoch=args.epoch))


def cmd_serve_nodes(args: argparse.Namespace) -> int:
    from .realtime import serve_nodes

    cfg, base = _load(args)
    trace = cfg.build_trace(base)
    return _serve(args, "nodes", cfg, lambda ev: serve_nodes(cfg, trace, args.port, ev, epoch=args.epoch))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sna", description="Adaptive sensing loop: simulation, realtime roles and reports.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("config_pos", nargs="?", metavar="CONFIG", help="run config JSON")
        p.add_argument("--config", help="run config JSON (default: bundled flagship config)")
        p.add_argument("--seed", type=int, help="override the run seed")
        return p

    p = with_config(sub.add_parser("simulate", help="run the loop and write log and report"))
    p.add_argument("--out", help="output directory (default: config 'out' or ./out)")
    p.add_argument("--realtime", action="store_true", help="use realtime mode over loopback TCP")
    p.add_argument("--scale", type=float, help="realtime speed-up factor")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="recompute the report from an event log")
    p.add_argument("eventlog", nargs="+", help="event log; several per-role logs are merged by time")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="write here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("validate", help="check a config and exit"))
    p.set_defaults(func=cmd_validate)

    p = with_config(sub.add_parser("calibrate-trace", help="tune the synthetic trace to the exceedance targets"))
    p.add_argument("--out", help="write the tuned config here instead of stdout")
    p.set_defaults(func=cmd_calibrate)

    for name, func in (("serve-dashboard", cmd_serve_dashboard), ("serve-analytics", cmd_serve_analytics),
                       ("serve-nodes", cmd_serve_nodes)):
        p = with_config(sub.add_parser(name, help=f"run the {name[6:]} role"))
        p.add_argument("--port", type=int, required=True)
        p.add_argument("--scale", type=float, help="speed-up factor")
        p.add_argument("--epoch", type=float, help="shared run epoch as unix seconds")
        p.add_argument("--out", help="directory for this role's event log")
        if name == "serve-analytics":
            p.add_argument("--checkpoint", help="persist and resume agent state here")
        p.set_defaults(func=func)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except ContractViolation as exc:
        return _fail("contract", str(exc), EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
