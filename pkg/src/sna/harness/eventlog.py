"""Append-only run log: one JSON record per line, UTF-8, LF.

Each record carries ``t`` (ms on the logging clock) and ``ev`` (the record
kind) followed by kind-specific fields in insertion order. The serialized
bytes are a pure function of the appended records, which is what makes
virtual runs byte-reproducible.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Optional, Union

EVENT_KINDS = frozenset({
    "run-start",
    "run-end",
    "sample-scheduled",
    "sensed",
    "frame-sent",
    "frame-dropped",
    "frame-delivered",
    "reprogrammed",
    "ingested",
    "duplicate",
    "event-published",
    "epoch-closed",
    "q-updated",
    "recommendation",
    "recommendation-noop",
    "command-sent",
    "command-retry",
    "command-superseded",
    "command-exhausted",
    "ack",
    "subscribed",
    "unsubscribed",
    "agent-resync",
    "dropped-out-of-order",
    "error",
})


class EventLog:
    """In-memory record list, optionally streamed to a file as it grows."""

    def __init__(self, sink: Optional[IO[str]] = None, strict_order: bool = True) -> None:
        self.records: list[dict[str, Any]] = []
        self._sink = sink
        self._strict = strict_order

    def append(self, t: int, ev: str, **fields: Any) -> dict[str, Any]:
        if ev not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {ev!r}")
        t = int(t)
        if self._strict and self.records and t < self.records[-1]["t"]:
            raise ValueError(f"event log time went backwards: {t} < {self.records[-1]['t']}")
        rec = {"t": t, "ev": ev, **fields}
        self.records.append(rec)
        if self._sink is not None:
            self._sink.write(dumps(rec))
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.records)

    def of(self, *kinds: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["ev"] in kinds]

    def to_bytes(self) -> bytes:
        return "".join(dumps(r) for r in self.records).encode("utf-8")

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read(cls, path: Union[str, Path]) -> "EventLog":
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())

    @classmethod
    def merge(cls, logs: Iterable["EventLog"]) -> "EventLog":
        """Interleave per-role logs by timestamp; ties keep the input order."""
        merged = cls(strict_order=False)
        merged.records = sorted((r for log in logs for r in log.records), key=lambda r: r["t"])
        return merged

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "EventLog":
        log = cls(strict_order=False)
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"event log line {n}: {exc.msg}") from None
            if not isinstance(rec, dict) or "t" not in rec or "ev" not in rec:
                raise ValueError(f"event log line {n}: not an event record")
            log.records.append(rec)
        return log


def dumps(rec: dict[str, Any]) -> str:
    return json.dumps(rec, separators=(",", ":")) + "\n"
