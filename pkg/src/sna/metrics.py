"""Per-node savings, data-quality and delay metrics computed from a run's event log.

Everything here reads only the log records, so ``sna report`` on a saved log
reproduces the report of the run that wrote it. Only the scored window
(``window_start_s`` .. ``window_end_s`` from ``run-start``) is counted, which
keeps the calibration phase out of the numbers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .domain import BASE_INTERVAL, ContractViolation, baseline_transmissions, savings_fraction

Records = Sequence[Mapping[str, Any]]

CSV_COLUMNS = (
    "node", "tx_saved", "exceed_frac", "avg_delta", "drift_mean_ms", "drift_sigma_ms",
    "delay_mean_ms", "delay_sigma_ms", "measurements", "acks", "commands", "duplicates",
)


@dataclass(frozen=True)
class Window:
    start_ms: int
    end_ms: int

    @property
    def duration_s(self) -> float:
        return (self.end_ms - self.start_ms) / 1000

    def __contains__(self, t: int) -> bool:
        return self.start_ms <= t < self.end_ms


@dataclass
class NodeReport:
    node: int
    tx_saved: float
    exceed_frac: Optional[float]
    avg_delta: Optional[float]
    drift_mean_ms: Optional[float]
    drift_sigma_ms: Optional[float]
    delay_mean_ms: Optional[float]
    delay_sigma_ms: Optional[float]
    measurements: int
    acks: int
    commands: int
    duplicates: int
    measurement_tx: int = 0
    ack_tx: int = 0
    baseline_tx: int = 0
    lost_uplink: int = 0
    command_tx: int = 0
    gaps: int = 0
    acked_commands: int = 0
    delays_flagged: bool = False


@dataclass
class RunReport:
    duration_s: int
    window_start_s: float
    window_end_s: float
    threshold: float
    nodes: list[NodeReport] = field(default_factory=list)

    def node(self, node_id: int) -> NodeReport:
        for n in self.nodes:
            if n.node == node_id:
                return n
        raise KeyError(node_id)


def _records(log: Any) -> Records:
    return log.records if hasattr(log, "records") else log


def run_start(log: Any) -> Mapping[str, Any]:
    for rec in _records(log):
        if rec["ev"] == "run-start":
            return rec
    raise ContractViolation("event log has no run-start record")


def window_of(log: Any) -> Window:
    start = run_start(log)
    return Window(int(start["window_start_s"]) * 1000, int(start["window_end_s"]) * 1000)


def _ms(window: Optional[Window], log: Any) -> Window:
    return window if window is not None else window_of(log)


def transmissions(log: Any, node: int, window: Optional[Window] = None) -> tuple[int, int]:
    """(measurement frames, ack frames) the node transmitted inside the window."""
    window = _ms(window, log)
    meas = acks = 0
    for rec in _records(log):
        if rec["ev"] == "frame-sent" and rec["src"] == "node" and rec["node"] == node and rec["t"] in window:
            if rec["kind"] == "measurement":
                meas += 1
            else:
                acks += 1
    return meas, acks


def compute_savings(log: Any, node: int, duration_s: Optional[float] = None, window: Optional[Window] = None) -> float:
    """``1 - node transmissions / always-30s baseline`` over the scored window.

    Node acks count as transmissions; the dashboard's own command frames do not.
    """
    window = _ms(window, log)
    if duration_s is None:
        duration_s = window.duration_s
    if not duration_s > 0:
        raise ContractViolation("cannot compute savings over a zero-length run")
    meas, acks = transmissions(log, node, window)
    return savings_fraction(meas + acks, baseline_transmissions(duration_s, BASE_INTERVAL))


def received_measurements(log: Any, node: int, window: Optional[Window] = None) -> list[Mapping[str, Any]]:
    """Ingested measurement records sensed inside the window, ordered by seq."""
    window = _ms(window, log)
    rows = [r for r in _records(log)
            if r["ev"] == "ingested" and r["node"] == node and r["sensed_at"] in window]
    return sorted(rows, key=lambda r: r["seq"])


def received_deltas(log: Any, node: int, window: Optional[Window] = None) -> tuple[list[float], int]:
    """Absolute changes between seq-adjacent received measurements, and the gap count."""
    rows = received_measurements(log, node, window)
    deltas: list[float] = []
    gaps = 0
    for prev, curr in zip(rows, rows[1:]):
        if curr["seq"] == prev["seq"] + 1:
            deltas.append(abs(curr["value_c"] - prev["value_c"]))
        else:
            gaps += 1
    return deltas, gaps


def compute_quality(log: Any, node: int, threshold: Optional[float] = None,
                    window: Optional[Window] = None) -> tuple[float, float]:
    """(fraction of deltas above threshold, mean delta) over received measurements."""
    if threshold is None:
        threshold = float(run_start(log)["threshold"])
    deltas, _ = received_deltas(log, node, window)
    if not deltas:
        raise ContractViolation(f"node {node}: fewer than two consecutive received measurements")
    exceed = sum(1 for d in deltas if d > threshold)
    return exceed / len(deltas), math.fsum(deltas) / len(deltas)


def _mean_sigma(values: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    if not values:
        return None, None
    return statistics.fmean(values), statistics.pstdev(values)


@dataclass
class DelayStats:
    drift_mean_ms: Optional[float]
    drift_sigma_ms: Optional[float]
    delay_mean_ms: Optional[float]
    delay_sigma_ms: Optional[float]
    drifts: list[int]
    delays: list[int]

    @property
    def flagged(self) -> bool:
        return not self.delays


def command_delays(log: Any, node: int, window: Optional[Window] = None) -> list[int]:
    """Ack arrival minus trigger arrival for every acked command triggered inside the window."""
    window = _ms(window, log)
    sent: dict[int, Mapping[str, Any]] = {}
    delays: list[int] = []
    for rec in _records(log):
        if rec.get("node") != node:
            continue
        if rec["ev"] == "command-sent":
            sent[rec["cmd_id"]] = rec
        elif rec["ev"] == "ack":
            cmd = sent.get(rec["cmd_id"])
            trig = None if cmd is None else cmd.get("trigger_received_at")
            if trig is not None and trig in window:
                delays.append(rec["t"] - trig)
    return delays


def compute_delays(log: Any, node: int, window: Optional[Window] = None) -> DelayStats:
    """Clock drift of received measurements and introduced delay of acked commands.

    Drift is ``sensed_at - scheduled_at`` (negative: nodes sense early) and is
    kept out of the delay figure.
    """
    rows = received_measurements(log, node, window)
    drifts = [r["sensed_at"] - r["scheduled_at"] for r in rows]
    delays = command_delays(log, node, window)
    dm, ds = _mean_sigma(drifts)
    lm, ls = _mean_sigma(delays)
    return DelayStats(dm, ds, lm, ls, drifts, delays)


def build_report(log: Any) -> RunReport:
    records = _records(log)
    start = run_start(records)
    window = window_of(records)
    threshold = float(start["threshold"])
    report = RunReport(
        duration_s=int(start["duration_s"]),
        window_start_s=window.start_ms / 1000,
        window_end_s=window.end_ms / 1000,
        threshold=threshold,
    )
    per_node: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for rec in records:
        ev = rec["ev"]
        if ev == "frame-dropped" and rec["dir"] == "up" and rec["t"] in window:
            per_node[rec["node"]]["lost_uplink"] += 1
        elif ev == "frame-sent" and rec["src"] == "dashboard" and rec["t"] in window:
            per_node[rec["node"]]["command_tx"] += 1
        elif ev == "command-sent" and rec["t"] in window:
            per_node[rec["node"]]["commands"] += 1
        elif ev == "duplicate" and rec["t"] in window:
            per_node[rec["node"]]["duplicates"] += 1
        elif ev == "ack" and rec["t"] in window:
            per_node[rec["node"]]["acked"] += 1

    baseline = baseline_transmissions(window.duration_s, BASE_INTERVAL)
    for node in start["nodes"]:
        counts = per_node[node]
        meas_tx, ack_tx = transmissions(records, node, window)
        deltas, gaps = received_deltas(records, node, window)
        if deltas:
            exceed, avg = compute_quality(records, node, threshold, window)
        else:
            exceed = avg = None
        delays = compute_delays(records, node, window)
        report.nodes.append(NodeReport(
            node=node,
            tx_saved=savings_fraction(meas_tx + ack_tx, baseline),
            exceed_frac=exceed,
            avg_delta=avg,
            drift_mean_ms=delays.drift_mean_ms,
            drift_sigma_ms=delays.drift_sigma_ms,
            delay_mean_ms=delays.delay_mean_ms,
            delay_sigma_ms=delays.delay_sigma_ms,
            measurements=len(received_measurements(records, node, window)),
            acks=ack_tx,
            commands=counts["commands"],
            duplicates=counts["duplicates"],
            measurement_tx=meas_tx,
            ack_tx=ack_tx,
            baseline_tx=baseline,
            lost_uplink=counts["lost_uplink"],
            command_tx=counts["command_tx"],
            gaps=gaps,
            acked_commands=counts["acked"],
            delays_flagged=delays.flagged,
        ))
    return report


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_csv(report: Optional[RunReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for n in (report.nodes if report is not None else []):
        writer.writerow([_fmt(getattr(n, col)) for col in CSV_COLUMNS])
    return buf.getvalue()


def report_json(report: RunReport) -> str:
    return json.dumps(asdict(report), indent=2) + "\n"


def emit_report(report: Optional[RunReport], path: Union[str, Path], fmt: str = "csv") -> Path:
    """Write the report as ``csv`` or ``json``; identical reports give identical bytes."""
    if fmt == "csv":
        text = report_csv(report)
    elif fmt == "json":
        if report is None:
            raise ContractViolation("JSON rendering needs a computed report")
        text = report_json(report)
    else:
        raise ContractViolation(f"unknown report format {fmt!r}")
    path = Path(path)
    try:
        path.write_bytes(text.encode("utf-8"))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror}") from exc
    return path
