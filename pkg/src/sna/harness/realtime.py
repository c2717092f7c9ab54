"""Realtime mode: gateway, dashboard and analytics talking NDJSON over TCP.

Every role measures time as ``(source() - epoch) * scale`` milliseconds, so a
scale of 60 runs one virtual hour per real minute. Link latencies, processing
delays and retry timers are virtual durations and shrink with the scale.
The roles can share one asyncio loop (:func:`run_realtime`) or run as
separate processes (the ``serve-*`` CLI commands); either way they only
interact through the wire protocol.
"""

from __future__ import annotations

import asyncio
import contextlib
import itertools
import logging
import time
from pathlib import Path
from typing import Any, Callable, Optional

from ..analytics import Analytics
from ..dashboard import Dashboard, Store, UnknownNode
from ..domain import ContractViolation, Measurement, Recommendation
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
from .protocol import Event, Message, ProtocolError, Subscribe, decode, encode
from .virtual import RunResult, link_rng, log_run_start, node_rng

log = logging.getLogger(__name__)

MAX_LINE = 64 * 1024


class Clock:
    """Scaled run clock; reads 0 until started so setup time does not count."""

    def __init__(self, scale: float = 1.0, epoch: Optional[float] = None,
                 source: Callable[[], float] = time.monotonic, started: bool = True) -> None:
        self.scale = float(scale)
        self.source = source
        self.epoch: Optional[float] = None
        if epoch is not None:
            self.epoch = float(epoch)
        elif started:
            self.start()

    def start(self) -> None:
        self.epoch = self.source()

    def now(self) -> int:
        if self.epoch is None:
            return 0
        return max(0, int((self.source() - self.epoch) * 1000 * self.scale))

    def real_seconds(self, virtual_ms: float) -> float:
        return max(0.0, virtual_ms / 1000 / self.scale)

    async def sleep_until(self, t_ms: int) -> None:
        if self.epoch is None:
            self.start()
        delay = (t_ms / 1000 / self.scale) - (self.source() - self.epoch)
        if delay > 0:
            await asyncio.sleep(delay)


class _Logger:
    """Stamps records with the role clock; tolerant of a missing log."""

    def __init__(self, eventlog: Optional[EventLog], clock: Clock) -> None:
        self.eventlog = eventlog
        self.clock = clock

    def __call__(self, ev: str, **fields: Any) -> None:
        if self.eventlog is not None:
            self.eventlog.append(self.clock.now(), ev, **fields)


class _ClockedLog:
    """Adapter handing the role clock's time to components that log with ``t``."""

    def __init__(self, eventlog: Optional[EventLog], clock: Clock) -> None:
        self.eventlog = eventlog
        self.clock = clock

    def append(self, t: int, ev: str, **fields: Any) -> None:
        if self.eventlog is not None:
            # Components pass their notion of now; the shared log wants a monotone stamp.
            self.eventlog.append(max(t, self.clock.now()), ev, **fields)


async def _send(writer: asyncio.StreamWriter, msg: Message) -> None:
    writer.write(encode(msg))
    await writer.drain()


def _close(writer: Optional[asyncio.StreamWriter]) -> None:
    if writer is not None and not writer.is_closing():
        writer.close()


# -- dashboard --------------------------------------------------------------------------


class _Subscriber:
    """Ordered, delayed delivery queue for one subscriber connection."""

    def __init__(self, writer: asyncio.StreamWriter, clock: Clock, delay_ms: int) -> None:
        self.writer = writer
        self.clock = clock
        self.delay_ms = delay_ms
        self.queue: asyncio.Queue = asyncio.Queue()
        self.task = asyncio.ensure_future(self._pump())

    def push(self, m: Measurement, at_ms: int) -> None:
        self.queue.put_nowait((at_ms + self.delay_ms, m))

    async def _pump(self) -> None:
        try:
            while True:
                due, m = await self.queue.get()
                await self.clock.sleep_until(due)
                await _send(self.writer, Event(m))
        except (ConnectionError, asyncio.CancelledError):
            pass


class DashboardServer:
    def __init__(self, cfg: RunConfig, clock: Clock, eventlog: Optional[EventLog] = None,
                 store: Optional[Store] = None) -> None:
        self.cfg = cfg
        self.clock = clock
        self.eventlog = eventlog
        self.core = Dashboard(cfg.dashboard.retry, store=store, eventlog=_ClockedLog(eventlog, clock))
        self._log = _Logger(eventlog, clock)
        self._routes: dict[int, asyncio.StreamWriter] = {}
        self._subs: dict[str, _Subscriber] = {}
        self._conn_ids = itertools.count(1)
        self._server: Optional[asyncio.base_events.Server] = None
        self._timers: set[asyncio.TimerHandle] = set()
        self._connections: set[asyncio.StreamWriter] = set()
        self._handlers: set[asyncio.Task] = set()
        self.port: Optional[int] = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = await asyncio.start_server(self._handle, host, port, limit=MAX_LINE)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        for h in self._timers:
            h.cancel()
        for sub in self._subs.values():
            sub.task.cancel()
        for w in list(self._connections):
            _close(w)
        # Handlers log their unsubscribe on the way out; let them finish first.
        await asyncio.gather(*self._handlers, return_exceptions=True)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def open_commands(self) -> int:
        return sum(1 for t in self.core.trackers.values() if t.open)

    def subscriber_count(self) -> int:
        return len(self._subs)

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = f"conn-{next(self._conn_ids)}"
        self._connections.add(writer)
        task = asyncio.current_task()
        self._handlers.add(task)
        task.add_done_callback(self._handlers.discard)
        try:
            while True:
                try:
                    line = await reader.readline()
                except (ConnectionError, asyncio.LimitOverrunError, ValueError):
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = decode(line)
                except ProtocolError as exc:
                    await self._reply(writer, ErrorReply(str(exc)))
                    continue
                await self._dispatch(conn, msg, writer)
        finally:
            self._connections.discard(writer)
            sub = self._subs.pop(conn, None)
            if sub is not None:
                sub.task.cancel()
                self.core.unsubscribe(conn, self.clock.now())
            for node, w in list(self._routes.items()):
                if w is writer:
                    del self._routes[node]
            _close(writer)

    async def _reply(self, writer: asyncio.StreamWriter, msg: Message) -> None:
        with contextlib.suppress(ConnectionError):
            await _send(writer, msg)

    async def _dispatch(self, conn: str, msg: Message, writer: asyncio.StreamWriter) -> None:
        now = self.clock.now()
        if isinstance(msg, Measurement):
            self._routes[msg.node] = writer
            self._log("frame-delivered", dir="up", kind="measurement", node=msg.node, seq=msg.seq)
            try:
                result = self.core.ingest(msg, now)
            except ContractViolation as exc:
                await self._reply(writer, ErrorReply(str(exc), node=msg.node))
                return
            for sub_id, m in result.deliveries:
                self._subs[sub_id].push(m, now)
        elif isinstance(msg, Subscribe):
            self._subs[conn] = _Subscriber(writer, self.clock, self.cfg.dashboard.ingest_ms)
            self.core.subscribe(conn, msg, now)
        elif isinstance(msg, Recommendation):
            try:
                tracker = self.core.apply_recommendation(msg, now)
            except UnknownNode:
                self._log("error", node=msg.node, reason="recommendation for unknown node")
                await self._reply(writer, ErrorReply(f"unknown node {msg.node}", node=msg.node))
                return
            if tracker is not None:
                await self._send_command(tracker.cmd)
        elif isinstance(msg, Ack):
            self._log("frame-delivered", dir="up", kind="ack", node=msg.node, cmd_id=msg.cmd_id)
            self.core.on_ack(msg, now)
        elif isinstance(msg, ErrorReply):
            self._log("error", node=msg.node, cmd_id=msg.cmd_id, reason=msg.reason)
        else:
            await self._reply(writer, ErrorReply(f"unexpected {type(msg).__name__} from client"))

    async def _send_command(self, cmd: ReprogramCommand) -> None:
        self._log("frame-sent", src="dashboard", kind="reprogram", node=cmd.node, cmd_id=cmd.cmd_id)
        route = self._routes.get(cmd.node)
        if route is not None:
            await self._reply(route, cmd)
        loop = asyncio.get_running_loop()
        handle = loop.call_later(self.clock.real_seconds(self.cfg.dashboard.retry_delay_ms),
                                 self._retry_fired, cmd.cmd_id)
        self._timers.add(handle)

    def _retry_fired(self, cmd_id: int) -> None:
        cmd = self.core.retry_due(cmd_id, self.clock.now())
        if cmd is not None:
            asyncio.ensure_future(self._send_command(cmd))


# -- shared client plumbing -------------------------------------------------------------


class _Client:
    role = "client"

    def __init__(self, cfg: RunConfig, clock: Clock, host: str, port: int) -> None:
        self.cfg = cfg
        self.clock = clock
        self.host = host
        self.port = port
        self.writer: Optional[asyncio.StreamWriter] = None
        self.reader: Optional[asyncio.StreamReader] = None
        self.connected = asyncio.Event()
        self.stopping = False
        self.connections = 0

    async def connect(self) -> None:
        """Connect, retrying a bounded number of times before giving up."""
        attempts = self.cfg.realtime.reconnect_attempts
        delay = self.cfg.realtime.reconnect_delay_ms / 1000
        last: Optional[BaseException] = None
        for i in range(attempts + 1):
            try:
                self.reader, self.writer = await asyncio.open_connection(self.host, self.port, limit=MAX_LINE)
                self.connections += 1
                await self.on_connect()
                self.connected.set()
                return
            except OSError as exc:
                last = exc
                log.info("%s: connect attempt %d failed: %s", self.role, i + 1, exc)
                if i < attempts:
                    await asyncio.sleep(delay)
        raise ConnectionError(f"{self.role}: dashboard unreachable after {attempts + 1} attempts: {last}")

    async def on_connect(self) -> None:
        pass

    async def handle(self, msg: Message) -> None:
        pass

    async def send(self, msg: Message) -> bool:
        if self.writer is None or not self.connected.is_set():
            return False
        try:
            await _send(self.writer, msg)
            return True
        except ConnectionError:
            return False

    async def serve(self) -> None:
        """Read frames until told to stop; reconnect when the dashboard goes away."""
        await self.connect()
        while not self.stopping:
            try:
                line = await self.reader.readline()
            except (ConnectionError, ValueError):
                line = b""
            if not line:
                self.connected.clear()
                _close(self.writer)
                if self.stopping:
                    break
                await self.connect()
                continue
            try:
                msg = decode(line)
            except ProtocolError as exc:
                log.warning("%s: bad frame from dashboard: %s", self.role, exc)
                continue
            await self.handle(msg)

    def stop(self) -> None:
        self.stopping = True
        _close(self.writer)


# -- gateway ----------------------------------------------------------------------------


class GatewayClient(_Client):
    role = "gateway"

    def __init__(self, cfg: RunConfig, trace: Trace, clock: Clock, host: str, port: int,
                 eventlog: Optional[EventLog] = None) -> None:
        super().__init__(cfg, clock, host, port)
        self.trace = trace
        self._log = _Logger(eventlog, clock)
        self.link_rng = link_rng(cfg.seed)
        self.node_rngs = {n.id: node_rng(cfg.seed, n.id) for n in cfg.nodes}
        self.nodes: dict[int, NodeState] = {
            n.id: NodeState(node=n.id, interval=n.interval, next_scheduled_at=0,
                            drift_mean_ms=n.drift_mean_ms, drift_sigma_ms=n.drift_sigma_ms)
            for n in cfg.nodes
        }
        self._pending: set[asyncio.Task] = set()

    def _later(self, delay_ms: float, action, *args) -> None:
        async def run():
            await asyncio.sleep(self.clock.real_seconds(delay_ms))
            await action(*args)

        task = asyncio.ensure_future(run())
        self._pending.add(task)
        task.add_done_callback(self._pending.discard)

    async def _uplink(self, frame: Message, kind: str, node: int, ref: tuple[str, int]) -> None:
        now = self.clock.now()
        self._log("frame-sent", src="node", kind=kind, node=node, **{ref[0]: ref[1]})
        arrival = deliver(self.cfg.link, now, self.link_rng)
        if arrival is None:
            self._log("frame-dropped", dir="up", kind=kind, node=node, **{ref[0]: ref[1]})
            return

        async def transmit():
            if not await self.send(frame):
                self._log("frame-dropped", dir="up", kind=kind, node=node, reason="disconnected",
                          **{ref[0]: ref[1]})

        self._later(arrival - now, transmit)

    async def run_nodes(self, duration_ms: int) -> None:
        await asyncio.gather(*(self._node_loop(n, duration_ms) for n in self.nodes))

    async def _node_loop(self, node: int, duration_ms: int) -> None:
        limit = min(duration_ms, self.trace.duration_ms)
        while True:
            sensed_at, self.nodes[node] = next_sample_time(self.nodes[node], self.node_rngs[node])
            if sensed_at >= limit:
                return
            self._log("sample-scheduled", node=node, scheduled_at=self.nodes[node].pending_scheduled_at,
                      sensed_at=sensed_at)
            await self.clock.sleep_until(sensed_at)
            m, self.nodes[node] = emit_measurement(self.nodes[node], self.trace, sensed_at)
            self._log("sensed", node=node, seq=m.seq, value_c=m.value, scheduled_at=m.scheduled_at,
                      sensed_at=m.sensed_at, interval_s=m.interval_s)
            await self._uplink(m, "measurement", node, ("seq", m.seq))

    async def handle(self, msg: Message) -> None:
        if not isinstance(msg, ReprogramCommand):
            if isinstance(msg, ErrorReply):
                log.warning("gateway: dashboard error: %s", msg.reason)
            return
        if msg.node not in self.nodes:
            await self.send(ErrorReply(f"gateway has no node {msg.node}", node=msg.node, cmd_id=msg.cmd_id))
            return
        now = self.clock.now()
        arrival = deliver(self.cfg.link, now, self.link_rng)
        if arrival is None:
            self._log("frame-dropped", dir="down", kind="reprogram", node=msg.node, cmd_id=msg.cmd_id)
            return
        self._later(arrival - now, self._node_receive, msg)

    async def _node_receive(self, cmd: ReprogramCommand) -> None:
        self._log("frame-delivered", dir="down", kind="reprogram", node=cmd.node, cmd_id=cmd.cmd_id)
        reply, self.nodes[cmd.node] = handle_reprogram(self.nodes[cmd.node], cmd)
        state = self.nodes[cmd.node]
        self._log("reprogrammed", node=cmd.node, cmd_id=cmd.cmd_id, interval_s=state.interval.seconds,
                  next_scheduled_at=state.next_scheduled_at, ok=isinstance(reply, Ack))
        await self._uplink(reply, "ack", cmd.node, ("cmd_id", cmd.cmd_id))

    async def drain(self) -> None:
        while self._pending:
            await asyncio.gather(*list(self._pending), return_exceptions=True)


# -- analytics --------------------------------------------------------------------------


class AnalyticsClient(_Client):
    role = "analytics"

    def __init__(self, cfg: RunConfig, clock: Clock, host: str, port: int,
                 eventlog: Optional[EventLog] = None, checkpoint: Optional[str] = None) -> None:
        super().__init__(cfg, clock, host, port)
        self.engine = Analytics(cfg.agent, seed=cfg.seed, eventlog=_ClockedLog(eventlog, clock))
        self.checkpoint = Path(checkpoint) if checkpoint else None
        self.resumed = False
        if self.checkpoint is not None and self.checkpoint.exists():
            self.engine.load_checkpoint(self.checkpoint)
            self.resumed = True
        self._log = _Logger(eventlog, clock)
        self.events = 0
        self.errors: list[ErrorReply] = []
        self._outbox: Optional[asyncio.Queue] = None
        self._outbox_task: Optional[asyncio.Task] = None

    async def on_connect(self) -> None:
        await _send(self.writer, Subscribe())

    async def handle(self, msg: Message) -> None:
        if isinstance(msg, ErrorReply):
            self.errors.append(msg)
            self._log("error", node=msg.node, reason=msg.reason)
            return
        if not isinstance(msg, Event):
            return
        self.events += 1
        m = msg.measurement
        self._log("event-published", sub="analytics", node=m.node, seq=m.seq)
        before = self.engine.agents[m.node].epoch_no if m.node in self.engine.agents else None
        rec = self.engine.on_event(m, self.clock.now())
        if self.checkpoint is not None and self.engine.agents[m.node].epoch_no != before:
            self.engine.save_checkpoint(self.checkpoint)
        if rec is not None:
            # Processing delay is latency, not service time: keep reading events meanwhile.
            self._ensure_outbox()
            self._outbox.put_nowait((self.clock.now() + self.cfg.dashboard.analytics_ms, rec))

    def _ensure_outbox(self) -> None:
        if self._outbox_task is None:
            self._outbox = asyncio.Queue()
            self._outbox_task = asyncio.ensure_future(self._drain_outbox())

    async def _drain_outbox(self) -> None:
        with contextlib.suppress(asyncio.CancelledError):
            while True:
                due, rec = await self._outbox.get()
                await self.clock.sleep_until(due)
                await self.send(rec)

    def stop(self) -> None:
        super().stop()
        if self._outbox_task is not None:
            self._outbox_task.cancel()


# -- orchestration ----------------------------------------------------------------------


async def _run(cfg: RunConfig, trace: Trace, log_: EventLog) -> RunResult:
    rt = cfg.realtime
    clock = Clock(rt.scale, started=False)
    log_run_start(log_, cfg, "realtime")
    server = DashboardServer(cfg, clock, log_)
    for n in cfg.nodes:
        server.core.register_node(n.id, n.interval)
    port = await server.start(rt.host, rt.port)
    analytics = AnalyticsClient(cfg, clock, rt.host, port, log_, checkpoint=rt.checkpoint)
    gateway = GatewayClient(cfg, trace, clock, rt.host, port, log_)
    a_task = asyncio.ensure_future(analytics.serve())
    g_task = asyncio.ensure_future(gateway.serve())
    try:
        await asyncio.wait_for(asyncio.gather(analytics.connected.wait(), gateway.connected.wait()),
                               timeout=10 + rt.reconnect_attempts * rt.reconnect_delay_ms / 1000)
        clock.start()
        await gateway.run_nodes(cfg.duration_s * 1000)
        await gateway.drain()
        # Let outstanding commands finish their retry cycle.
        budget = clock.real_seconds(cfg.dashboard.retry_delay_ms * (cfg.dashboard.max_attempts + 1))
        deadline = time.monotonic() + budget + 1.0
        while server.open_commands() and time.monotonic() < deadline:
            await asyncio.sleep(0.01)
        await gateway.drain()
        await asyncio.sleep(0.05)
    finally:
        analytics.stop()
        gateway.stop()
        for task in (a_task, g_task):
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError, ConnectionError):
                await task
        await server.stop()
    log_.append(clock.now(), "run-end", nodes=[
        {"node": s.node, "interval_s": s.interval.seconds, "seq": s.seq, "tx_count": s.tx_count}
        for s in (gateway.nodes[i] for i in cfg.node_ids)
    ])
    return RunResult(cfg, log_, dict(gateway.nodes), server.core, analytics.engine, trace,
                     trackers=dict(server.core.trackers))


def run_realtime(cfg: RunConfig, trace: Optional[Trace] = None, base_dir: Optional[Path] = None) -> RunResult:
    """Run all three roles over loopback TCP in one process and compute the report."""
    from ..metrics import build_report

    cfg = cfg.validate()
    if trace is None:
        trace = cfg.build_trace(base_dir)
    result = asyncio.run(_run(cfg, trace, EventLog()))
    result.report = build_report(result.log)
    return result


async def serve_dashboard(cfg: RunConfig, port: int, eventlog: Optional[EventLog] = None,
                          store: Optional[Store] = None, epoch: Optional[float] = None,
                          stop: Optional[asyncio.Event] = None) -> None:
    clock = Clock(cfg.realtime.scale, epoch, source=time.time)
    server = DashboardServer(cfg, clock, eventlog, store=store)
    for n in cfg.nodes:
        server.core.register_node(n.id, n.interval)
    bound = await server.start(cfg.realtime.host, port)
    log.info("dashboard listening on %s:%d", cfg.realtime.host, bound)
    print(f"listening {cfg.realtime.host}:{bound}", flush=True)
    try:
        await (stop.wait() if stop is not None else asyncio.Event().wait())
    finally:
        await server.stop()


async def serve_analytics(cfg: RunConfig, port: int, eventlog: Optional[EventLog] = None,
                          checkpoint: Optional[str] = None, epoch: Optional[float] = None) -> None:
    clock = Clock(cfg.realtime.scale, epoch, source=time.time)
    client = AnalyticsClient(cfg, clock, cfg.realtime.host, port, eventlog, checkpoint)
    if client.resumed:
        print(f"resumed from {checkpoint}", flush=True)
    await client.serve()


async def serve_nodes(cfg: RunConfig, trace: Trace, port: int, eventlog: Optional[EventLog] = None,
                      epoch: Optional[float] = None) -> None:
    clock = Clock(cfg.realtime.scale, epoch, source=time.time)
    gateway = GatewayClient(cfg, trace, clock, cfg.realtime.host, port, eventlog)
    task = asyncio.ensure_future(gateway.serve())
    try:
        await gateway.connected.wait()
        await gateway.run_nodes(cfg.duration_s * 1000)
        await gateway.drain()
        await asyncio.sleep(clock.real_seconds(cfg.dashboard.retry_delay_ms * 2))
        await gateway.drain()
    finally:
        gateway.stop()
        task.cancel()
        with contextlib.suppress(asyncio.CancelledError, ConnectionError):
            await task
