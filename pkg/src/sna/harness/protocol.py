"""Newline-delimited JSON wire protocol.

Every frame is one JSON object terminated by ``\\n`` (UTF-8, no length
prefix) with a mandatory ``type``. Times are integer milliseconds and
temperatures are JSON numbers. Unknown fields are ignored on decode; an
unknown ``type`` or a malformed frame raises :class:`ProtocolError`, which
servers turn into an ``error`` reply.

==================  ===========================================================
type                fields
==================  ===========================================================
``measurement``     node, seq, value_c, scheduled_at, sensed_at, [received_at],
                    [interval_s]
``event``           same as measurement, received_at mandatory
``subscribe``       filter (``"all"`` or a list of node ids)
``recommendation``  node, interval_s, seq (the triggering measurement)
``reprogram``       cmd_id, node, interval_s
``ack``             cmd_id, node, interval_s
``error``           reason, [node], [cmd_id]
==================  ===========================================================
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, FrozenSet, Optional, Union

from ..domain import ContractViolation, Measurement, Recommendation, SamplingInterval
from ..nodes import Ack, ErrorReply, ReprogramCommand

MESSAGE_TYPES = ("measurement", "subscribe", "event", "recommendation", "reprogram", "ack", "error")


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    """A stored measurement published to a subscriber."""

    measurement: Measurement


@dataclass(frozen=True)
class Subscribe:
    # None subscribes to every node.
    nodes: Optional[FrozenSet[int]] = None

    def matches(self, node: int) -> bool:
        return self.nodes is None or node in self.nodes


Message = Union[Measurement, Event, Subscribe, Recommendation, ReprogramCommand, Ack, ErrorReply]


def _measurement_fields(m: Measurement) -> dict[str, Any]:
    out: dict[str, Any] = {
        "node": m.node,
        "seq": m.seq,
        "value_c": m.value,
        "scheduled_at": m.scheduled_at,
        "sensed_at": m.sensed_at,
    }
    if m.received_at is not None:
        out["received_at"] = m.received_at
    if m.interval_s is not None:
        out["interval_s"] = m.interval_s
    return out


def to_wire(msg: Message) -> dict[str, Any]:
    if isinstance(msg, Measurement):
        return {"type": "measurement", **_measurement_fields(msg)}
    if isinstance(msg, Event):
        if msg.measurement.received_at is None:
            raise ProtocolError("event without received_at")
        return {"type": "event", **_measurement_fields(msg.measurement)}
    if isinstance(msg, Subscribe):
        return {"type": "subscribe", "filter": "all" if msg.nodes is None else sorted(msg.nodes)}
    if isinstance(msg, Recommendation):
        return {"type": "recommendation", "node": msg.node,
                "interval_s": msg.new_interval.seconds, "seq": msg.basis_seq}
    if isinstance(msg, ReprogramCommand):
        return {"type": "reprogram", "cmd_id": msg.cmd_id, "node": msg.node, "interval_s": msg.interval_s}
    if isinstance(msg, Ack):
        return {"type": "ack", "cmd_id": msg.cmd_id, "node": msg.node, "interval_s": msg.interval_s}
    if isinstance(msg, ErrorReply):
        out: dict[str, Any] = {"type": "error", "reason": msg.reason}
        if msg.node is not None:
            out["node"] = msg.node
        if msg.cmd_id is not None:
            out["cmd_id"] = msg.cmd_id
        return out
    raise TypeError(f"not a wire message: {msg!r}")


def _int(obj: dict, key: str, optional: bool = False) -> Optional[int]:
    if key not in obj or obj[key] is None:
        if optional:
            return None
        raise ProtocolError(f"missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ProtocolError(f"field {key!r} must be an integer, got {value!r}")
    return value


def _number(obj: dict, key: str) -> float:
    value = obj.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ProtocolError(f"field {key!r} must be a finite number, got {value!r}")
    return float(value)


def _measurement(obj: dict) -> Measurement:
    try:
        return Measurement(
            node=_int(obj, "node"),
            seq=_int(obj, "seq"),
            value=_number(obj, "value_c"),
            scheduled_at=_int(obj, "scheduled_at"),
            sensed_at=_int(obj, "sensed_at"),
            received_at=_int(obj, "received_at", optional=True),
            interval_s=_int(obj, "interval_s", optional=True),
        )
    except ContractViolation as exc:
        raise ProtocolError(str(exc)) from None


def from_wire(obj: Any) -> Message:
    if not isinstance(obj, dict):
        raise ProtocolError("frame is not a JSON object")
    kind = obj.get("type")
    if kind == "measurement":
        return _measurement(obj)
    if kind == "event":
        m = _measurement(obj)
        if m.received_at is None:
            raise ProtocolError("event without received_at")
        return Event(m)
    if kind == "subscribe":
        flt = obj.get("filter", "all")
        if flt == "all" or flt is None:
            return Subscribe()
        if not isinstance(flt, list) or not all(isinstance(n, int) and not isinstance(n, bool) for n in flt):
            raise ProtocolError(f"bad subscribe filter {flt!r}")
        return Subscribe(frozenset(flt))
    if kind == "recommendation":
        try:
            interval = SamplingInterval.from_seconds(_int(obj, "interval_s"))
        except ContractViolation as exc:
            raise ProtocolError(str(exc)) from None
        return Recommendation(node=_int(obj, "node"), new_interval=interval, basis_seq=_int(obj, "seq"))
    if kind == "reprogram":
        # The interval is validated by the node, which answers with an error frame.
        return ReprogramCommand(cmd_id=_int(obj, "cmd_id"), node=_int(obj, "node"),
                                interval_s=_int(obj, "interval_s"))
    if kind == "ack":
        return Ack(cmd_id=_int(obj, "cmd_id"), node=_int(obj, "node"), interval_s=_int(obj, "interval_s"))
    if kind == "error":
        reason = obj.get("reason", "")
        if not isinstance(reason, str):
            raise ProtocolError("error reason must be a string")
        return ErrorReply(reason=reason, node=_int(obj, "node", optional=True),
                          cmd_id=_int(obj, "cmd_id", optional=True))
    raise ProtocolError(f"unknown message type {kind!r}")


def encode(msg: Message) -> bytes:
    return (json.dumps(to_wire(msg), separators=(",", ":")) + "\n").encode("utf-8")


def decode(line: Union[bytes, str]) -> Message:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"frame is not UTF-8: {exc}") from None
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON: {exc.msg}") from None
    return from_wire(obj)
