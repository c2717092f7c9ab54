"""Deterministic discrete-event execution of the full sensing/analysis/reprogram loop.

Events are ordered by ``(time, role, per-role sequence)``; nothing else
(hash order, wall clock, thread timing) can influence a run, so a config and
seed determine every byte of the event log.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from ..analytics import Analytics
from ..dashboard import CommandTracker, Dashboard, UnknownNode
from ..domain import BASE_INTERVAL, Measurement, Recommendation
from ..envsim import Trace
from ..nodes import (
    Ack,
    ErrorReply,
    NodeState,
    ReprogramCommand,
    deliver,
    emit_measurement,
    handle_reprogram,
    next_sample_time,
)
from .config import RunConfig
from .eventlog import EventLog
from .protocol import Subscribe

log = logging.getLogger(__name__)

ROLE_GATEWAY, ROLE_DASHBOARD, ROLE_ANALYTICS = 0, 1, 2
ANALYTICS_SUB = "analytics"


def log_run_start(eventlog: EventLog, cfg: RunConfig, mode: str) -> None:
    eventlog.append(0, "run-start", mode=mode, seed=cfg.seed, duration_s=cfg.duration_s,
                    threshold=cfg.agent.threshold, base_interval_s=BASE_INTERVAL.seconds,
                    window_start_s=cfg.metrics.window_start_s, window_end_s=cfg.window_end_s,
                    nodes=cfg.node_ids, config=cfg.to_dict())


class VirtualLoop:
    def __init__(self) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, int, Callable, tuple]] = []
        self._seq = {r: count() for r in (ROLE_GATEWAY, ROLE_DASHBOARD, ROLE_ANALYTICS)}
        self.processed = 0

    def at(self, t: int, role: int, fn: Callable, *args: Any) -> None:
        if t < self.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.now})")
        heapq.heappush(self._queue, (int(t), role, next(self._seq[role]), fn, args))

    def run(self) -> None:
        while self._queue:
            t, _, _, fn, args = heapq.heappop(self._queue)
            self.now = t
            fn(*args)
            self.processed += 1


def node_rng(seed: int, node: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0xD41F7, int(node)])


def link_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0x11E4])


@dataclass
class RunResult:
    config: RunConfig
    log: EventLog
    nodes: dict[int, NodeState]
    dashboard: Dashboard
    analytics: Analytics
    trace: Trace
    report: Any = None
    trackers: dict[int, CommandTracker] = field(default_factory=dict)


class VirtualRun:
    def __init__(self, cfg: RunConfig, trace: Trace, eventlog: Optional[EventLog] = None,
                 adaptive: bool = True) -> None:
        self.cfg = cfg
        # Without the analytics subscriber nodes keep their initial interval (open-loop baseline).
        self.adaptive = adaptive
        self.trace = trace
        self.loop = VirtualLoop()
        self.log = eventlog if eventlog is not None else EventLog()
        self.duration_ms = cfg.duration_s * 1000
        self.link = cfg.link
        self.pipeline = cfg.dashboard
        self.link_rng = link_rng(cfg.seed)
        self.node_rngs = {n.id: node_rng(cfg.seed, n.id) for n in cfg.nodes}
        self.nodes: dict[int, NodeState] = {
            n.id: NodeState(
                node=n.id,
                interval=n.interval,
                next_scheduled_at=0,
                drift_mean_ms=n.drift_mean_ms,
                drift_sigma_ms=n.drift_sigma_ms,
            )
            for n in cfg.nodes
        }
        self.dashboard = Dashboard(cfg.dashboard.retry, eventlog=self.log)
        self.analytics = Analytics(cfg.agent, seed=cfg.seed, eventlog=self.log)

    # -- gateway / nodes ---------------------------------------------------------------

    def _plan(self, node: int) -> None:
        sensed_at, state = next_sample_time(self.nodes[node], self.node_rngs[node])
        self.nodes[node] = state
        if sensed_at >= self.duration_ms or sensed_at >= self.trace.duration_ms:
            return
        self.log.append(self.loop.now, "sample-scheduled", node=node,
                        scheduled_at=state.pending_scheduled_at, sensed_at=sensed_at)
        self.loop.at(sensed_at, ROLE_GATEWAY, self._sense, node)

    def _sense(self, node: int) -> None:
        now = self.loop.now
        m, self.nodes[node] = emit_measurement(self.nodes[node], self.trace, now)
        self.log.append(now, "sensed", node=node, seq=m.seq, value_c=m.value,
                        scheduled_at=m.scheduled_at, sensed_at=m.sensed_at, interval_s=m.interval_s)
        self._uplink(now, m, kind="measurement", node=node, ref=("seq", m.seq))
        self._plan(node)

    def _uplink(self, now: int, frame: Any, kind: str, node: int, ref: tuple[str, int]) -> None:
        self.log.append(now, "frame-sent", src="node", kind=kind, node=node, **{ref[0]: ref[1]})
        arrival = deliver(self.link, now, self.link_rng)
        if arrival is None:
            self.log.append(now, "frame-dropped", dir="up", kind=kind, node=node, **{ref[0]: ref[1]})
            return
        self.loop.at(arrival, ROLE_DASHBOARD, self._dashboard_receive, frame, kind, node, ref)

    def _node_receive(self, cmd: ReprogramCommand) -> None:
        now = self.loop.now
        self.log.append(now, "frame-delivered", dir="down", kind="reprogram", node=cmd.node, cmd_id=cmd.cmd_id)
        reply, self.nodes[cmd.node] = handle_reprogram(self.nodes[cmd.node], cmd)
        state = self.nodes[cmd.node]
        self.log.append(now, "reprogrammed", node=cmd.node, cmd_id=cmd.cmd_id,
                        interval_s=state.interval.seconds, next_scheduled_at=state.next_scheduled_at,
                        ok=isinstance(reply, Ack))
        self._uplink(now, reply, kind="ack", node=cmd.node, ref=("cmd_id", cmd.cmd_id))

    # -- dashboard ------------------------------------------------------------------------

    def _dashboard_receive(self, frame: Any, kind: str, node: int, ref: tuple[str, int]) -> None:
        now = self.loop.now
        self.log.append(now, "frame-delivered", dir="up", kind=kind, node=node, **{ref[0]: ref[1]})
        if isinstance(frame, Measurement):
            result = self.dashboard.ingest(frame, now)
            for sub_id, m in result.deliveries:
                self.loop.at(now + self.pipeline.ingest_ms, ROLE_ANALYTICS, self._analytics_receive, sub_id, m)
        elif isinstance(frame, Ack):
            self.dashboard.on_ack(frame, now)
        elif isinstance(frame, ErrorReply):
            self.log.append(now, "error", node=frame.node, cmd_id=frame.cmd_id, reason=frame.reason)

    def _downlink(self, cmd: ReprogramCommand) -> None:
        now = self.loop.now
        self.log.append(now, "frame-sent", src="dashboard", kind="reprogram", node=cmd.node, cmd_id=cmd.cmd_id)
        arrival = deliver(self.link, now, self.link_rng)
        if arrival is None:
            self.log.append(now, "frame-dropped", dir="down", kind="reprogram", node=cmd.node, cmd_id=cmd.cmd_id)
        else:
            self.loop.at(arrival, ROLE_GATEWAY, self._node_receive, cmd)
        self.loop.at(now + self.pipeline.retry_delay_ms, ROLE_DASHBOARD, self._retry, cmd.cmd_id)

    def _retry(self, cmd_id: int) -> None:
        cmd = self.dashboard.retry_due(cmd_id, self.loop.now)
        if cmd is not None:
            self._downlink(cmd)

    def _recommendation(self, rec: Recommendation) -> None:
        now = self.loop.now
        try:
            tracker = self.dashboard.apply_recommendation(rec, now)
        except UnknownNode:
            self.log.append(now, "error", node=rec.node, reason="recommendation for unknown node")
            return
        if tracker is not None:
            self._downlink(tracker.cmd)

    # -- analytics ------------------------------------------------------------------------

    def _analytics_receive(self, sub_id: str, m: Measurement) -> None:
        now = self.loop.now
        self.log.append(now, "event-published", sub=sub_id, node=m.node, seq=m.seq)
        rec = self.analytics.on_event(m, now)
        if rec is not None:
            self.loop.at(now + self.pipeline.analytics_ms, ROLE_DASHBOARD, self._recommendation, rec)

    # -- driver ----------------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        log_run_start(self.log, cfg, "virtual")
        for n in cfg.nodes:
            self.dashboard.register_node(n.id, n.interval)
        if self.adaptive:
            self.dashboard.subscribe(ANALYTICS_SUB, Subscribe(), 0)
        for n in cfg.nodes:
            self._plan(n.id)
        self.loop.run()
        self.log.append(self.loop.now, "run-end", nodes=[
            {"node": s.node, "interval_s": s.interval.seconds, "seq": s.seq, "tx_count": s.tx_count}
            for s in (self.nodes[i] for i in cfg.node_ids)
        ])
        return RunResult(cfg, self.log, dict(self.nodes), self.dashboard, self.analytics, self.trace,
                         trackers=dict(self.dashboard.trackers))


def run_virtual(cfg: RunConfig, trace: Optional[Trace] = None, base_dir: Optional[Path] = None,
                adaptive: bool = True) -> RunResult:
    """Run the loop under simulated time and compute its report."""
    from ..metrics import build_report

    cfg = cfg.validate()
    if trace is None:
        trace = cfg.build_trace(base_dir)
    result = VirtualRun(cfg, trace, adaptive=adaptive).run()
    result.report = build_report(result.log)
    return result
