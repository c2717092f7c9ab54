"""Measurement store, subscription fan-out and reprogram command tracking.

:class:`Dashboard` holds no sockets and no clock: callers hand it the
current time and carry out what it returns (deliver events, send commands,
arm retry timers). The virtual event loop and the TCP server both drive the
same object, so every state change goes through one ordered apply point.
"""

from __future__ import annotations

import bisect
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Hashable, Optional, Union

from .domain import ContractViolation, Measurement, Recommendation, SamplingInterval
from .harness.protocol import ProtocolError, Subscribe, from_wire, to_wire
from .nodes import Ack, ReprogramCommand

log = logging.getLogger(__name__)


class UnknownNode(LookupError):
    pass


class Store:
    """Append-only measurement log keyed by ``(node, seq)``."""

    def __init__(self, sink: Optional[IO[str]] = None) -> None:
        self._log: list[Measurement] = []
        self._keys: dict[tuple[int, int], Measurement] = {}
        self._by_node: dict[int, list[Measurement]] = defaultdict(list)
        self._received: dict[int, list[int]] = defaultdict(list)
        self._sink = sink

    def __len__(self) -> int:
        return len(self._log)

    def __iter__(self):
        return iter(self._log)

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._keys

    def append(self, m: Measurement) -> bool:
        if m.received_at is None:
            raise ContractViolation("store only accepts measurements stamped with received_at")
        key = (m.node, m.seq)
        if key in self._keys:
            return False
        self._keys[key] = m
        self._log.append(m)
        self._by_node[m.node].append(m)
        self._received[m.node].append(m.received_at)
        if self._sink is not None:
            self._sink.write(json.dumps(to_wire(m), separators=(",", ":")) + "\n")
            self._sink.flush()
        return True

    def get(self, node: int, seq: int) -> Optional[Measurement]:
        return self._keys.get((node, seq))

    def query(self, node: int, from_ms: int, to_ms: int) -> list[Measurement]:
        """Measurements of ``node`` received in ``[from_ms, to_ms)``, ordered by seq."""
        if from_ms > to_ms:
            raise ContractViolation("query range has from_ms > to_ms")
        stamps = self._received.get(node)
        if not stamps:
            return []
        # Arrival order is received_at order, so the per-node list is sorted.
        lo = bisect.bisect_left(stamps, from_ms)
        hi = bisect.bisect_left(stamps, to_ms)
        return sorted(self._by_node[node][lo:hi], key=lambda m: m.seq)

    def nodes(self) -> list[int]:
        return sorted(self._by_node)

    @classmethod
    def load(cls, path: Union[str, Path], sink: Optional[IO[str]] = None) -> "Store":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    msg = from_wire(json.loads(line))
                except (json.JSONDecodeError, ProtocolError) as exc:
                    raise ValueError(f"{path}:{n}: {exc}") from None
                if not isinstance(msg, Measurement):
                    raise ValueError(f"{path}:{n}: not a measurement record")
                store.append(msg)
        store._sink = sink
        return store


@dataclass(frozen=True)
class RetryPolicy:
    retry_delay_ms: int = 2000
    max_attempts: int = 10

    def __post_init__(self) -> None:
        if self.retry_delay_ms <= 0 or self.max_attempts < 1:
            raise ContractViolation("retry policy needs retry_delay_ms > 0 and max_attempts >= 1")


@dataclass
class CommandTracker:
    cmd: ReprogramCommand
    retry_delay_ms: int
    max_attempts: int
    trigger_seq: int
    trigger_received_at: Optional[int]
    attempts: int = 0
    acked: bool = False
    acked_at: Optional[int] = None
    status: str = "pending"  # pending | acked | exhausted | superseded
    attempt_times: list[int] = field(default_factory=list)

    @property
    def cmd_id(self) -> int:
        return self.cmd.cmd_id

    @property
    def open(self) -> bool:
        return self.status == "pending"


def introduced_delay(tracker: CommandTracker, trigger: Optional[Measurement] = None) -> Optional[int]:
    """Milliseconds from the triggering measurement's arrival to the node's ack.

    Unacknowledged commands have no defined delay and yield ``None``.
    """
    if not tracker.acked or tracker.acked_at is None:
        return None
    received = trigger.received_at if trigger is not None else tracker.trigger_received_at
    if received is None:
        return None
    return tracker.acked_at - received


@dataclass
class IngestResult:
    measurement: Measurement
    stored: bool
    deliveries: list[tuple[Hashable, Measurement]] = field(default_factory=list)


class Dashboard:
    def __init__(
        self,
        retry: RetryPolicy = RetryPolicy(),
        store: Optional[Store] = None,
        eventlog: Any = None,
    ) -> None:
        self.retry = retry
        self.store = store if store is not None else Store()
        self.eventlog = eventlog
        self.subscriptions: dict[Hashable, Subscribe] = {}
        self.trackers: dict[int, CommandTracker] = {}
        self.duplicates: dict[int, int] = defaultdict(int)
        self._commanded: dict[int, SamplingInterval] = {}
        self._confirmed: dict[int, SamplingInterval] = {}
        self._open_cmd: dict[int, int] = {}
        self._next_cmd_id = 1

    def _log(self, t: int, ev: str, **fields: Any) -> None:
        if self.eventlog is not None:
            self.eventlog.append(t, ev, **fields)

    # -- nodes and subscribers -------------------------------------------------

    def register_node(self, node: int, interval: SamplingInterval) -> None:
        self._commanded.setdefault(node, interval)
        self._confirmed.setdefault(node, interval)

    def known_nodes(self) -> list[int]:
        return sorted(self._commanded)

    def current_interval(self, node: int) -> SamplingInterval:
        try:
            return self._commanded[node]
        except KeyError:
            raise UnknownNode(node) from None

    def subscribe(self, sub_id: Hashable, sub: Subscribe, now: int = 0) -> None:
        self.subscriptions[sub_id] = sub
        self._log(now, "subscribed", sub=str(sub_id),
                  filter="all" if sub.nodes is None else sorted(sub.nodes))

    def unsubscribe(self, sub_id: Hashable, now: int = 0) -> None:
        if self.subscriptions.pop(sub_id, None) is not None:
            self._log(now, "unsubscribed", sub=str(sub_id))

    # -- measurements --------------------------------------------------------------

    def ingest(self, m: Measurement, now: int) -> IngestResult:
        """Stamp, store and fan out one measurement; duplicates are dropped and counted."""
        stamped = m.received(now)
        if m.interval_s is not None and m.node not in self._commanded:
            try:
                self.register_node(m.node, SamplingInterval.from_seconds(m.interval_s))
            except ContractViolation:
                log.warning("node %s reported unknown interval %s", m.node, m.interval_s)
        if not self.store.append(stamped):
            self.duplicates[m.node] += 1
            self._log(now, "duplicate", node=m.node, seq=m.seq)
            return IngestResult(stamped, stored=False)
        self._log(now, "ingested", node=m.node, seq=m.seq, value_c=m.value,
                  scheduled_at=m.scheduled_at, sensed_at=m.sensed_at, received_at=now)
        deliveries = [(sid, stamped) for sid, sub in self.subscriptions.items() if sub.matches(m.node)]
        return IngestResult(stamped, stored=True, deliveries=deliveries)

    def query(self, node: int, from_ms: int, to_ms: int) -> list[Measurement]:
        return self.store.query(node, from_ms, to_ms)

    # -- commands ------------------------------------------------------------------

    def apply_recommendation(self, rec: Recommendation, now: int) -> Optional[CommandTracker]:
        """Turn a recommendation into a tracked command; ``None`` when it is a no-op.

        A still-open command for the same node is superseded: it gets no more
        retries and the node ignores it if it arrives late.
        """
        if rec.node not in self._commanded:
            raise UnknownNode(rec.node)
        if rec.new_interval == self._commanded[rec.node]:
            self._log(now, "recommendation-noop", node=rec.node,
                      interval_s=rec.new_interval.seconds, seq=rec.basis_seq)
            return None
        prev = self._open_cmd.pop(rec.node, None)
        if prev is not None:
            self.trackers[prev].status = "superseded"
            self._log(now, "command-superseded", cmd_id=prev, node=rec.node)
        trigger = self.store.get(rec.node, rec.basis_seq)
        cmd = ReprogramCommand(self._next_cmd_id, rec.node, rec.new_interval.seconds, issued_at=now)
        self._next_cmd_id += 1
        tracker = CommandTracker(
            cmd=cmd,
            retry_delay_ms=self.retry.retry_delay_ms,
            max_attempts=self.retry.max_attempts,
            trigger_seq=rec.basis_seq,
            trigger_received_at=trigger.received_at if trigger is not None else None,
            attempts=1,
            attempt_times=[now],
        )
        self.trackers[cmd.cmd_id] = tracker
        self._open_cmd[rec.node] = cmd.cmd_id
        self._commanded[rec.node] = rec.new_interval
        self._log(now, "command-sent", cmd_id=cmd.cmd_id, node=rec.node,
                  interval_s=cmd.interval_s, trigger_seq=rec.basis_seq,
                  trigger_received_at=tracker.trigger_received_at, attempt=1)
        return tracker

    def retry_due(self, cmd_id: int, now: int) -> Optional[ReprogramCommand]:
        """Retry timer callback: the command to resend, or ``None`` if done."""
        tracker = self.trackers[cmd_id]
        if not tracker.open:
            return None
        if tracker.attempts >= tracker.max_attempts:
            tracker.status = "exhausted"
            self._open_cmd.pop(tracker.cmd.node, None)
            # The node kept its last confirmed interval.
            self._commanded[tracker.cmd.node] = self._confirmed[tracker.cmd.node]
            self._log(now, "command-exhausted", cmd_id=cmd_id, node=tracker.cmd.node,
                      attempts=tracker.attempts)
            return None
        tracker.attempts += 1
        tracker.attempt_times.append(now)
        self._log(now, "command-retry", cmd_id=cmd_id, node=tracker.cmd.node, attempt=tracker.attempts)
        return tracker.cmd

    def on_ack(self, ack: Ack, now: int) -> Optional[CommandTracker]:
        tracker = self.trackers.get(ack.cmd_id)
        if tracker is None:
            self._log(now, "error", reason="ack for unknown command", cmd_id=ack.cmd_id, node=ack.node)
            return None
        if tracker.acked:
            # Re-ack of a retransmission that crossed the first ack.
            return None
        tracker.acked = True
        tracker.acked_at = now
        if tracker.status == "pending":
            tracker.status = "acked"
            self._open_cmd.pop(ack.node, None)
            self._confirmed[ack.node] = SamplingInterval.from_seconds(tracker.cmd.interval_s)
        self._log(now, "ack", cmd_id=ack.cmd_id, node=ack.node, interval_s=tracker.cmd.interval_s,
                  attempts=tracker.attempts, trigger_seq=tracker.trigger_seq,
                  delay_ms=introduced_delay(tracker))
        return tracker
