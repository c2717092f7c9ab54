"""Core value types and the transmission/quality arithmetic shared by every module.

All times are integer milliseconds since the run epoch. Temperatures are
plain floats in degrees Celsius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

INTERVALS_S: tuple[int, ...] = (30, 60, 120, 240, 480)
BASE_INTERVAL_S = INTERVALS_S[0]
DEFAULT_THRESHOLD_C = 0.5


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


@dataclass(frozen=True, order=True)
class SamplingInterval:
    """One of the five allowed sampling periods, addressed by its index."""

    index: int

    def __post_init__(self) -> None:
        if not isinstance(self.index, int) or not 0 <= self.index < len(INTERVALS_S):
            raise ContractViolation(f"interval index out of range: {self.index!r}")

    @property
    def seconds(self) -> int:
        return INTERVALS_S[self.index]

    @property
    def ms(self) -> int:
        return self.seconds * 1000

    @classmethod
    def from_seconds(cls, seconds: int) -> "SamplingInterval":
        try:
            return cls(INTERVALS_S.index(int(seconds)))
        except (ValueError, TypeError):
            raise ContractViolation(
                f"{seconds!r} s is not an allowed sampling interval {INTERVALS_S}"
            ) from None

    @classmethod
    def all(cls) -> list["SamplingInterval"]:
        return [cls(i) for i in range(len(INTERVALS_S))]

    def __str__(self) -> str:
        return f"{self.seconds}s"


BASE_INTERVAL = SamplingInterval(0)


@dataclass(frozen=True)
class Measurement:
    """One temperature report from a node.

    ``received_at`` stays ``None`` until the dashboard stamps it.
    ``interval_s`` is the node's configured interval when it sensed.
    """

    node: int
    seq: int
    value: float
    scheduled_at: int
    sensed_at: int
    received_at: Optional[int] = None
    interval_s: Optional[int] = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ContractViolation(f"non-finite temperature {self.value!r}")
        if self.received_at is not None and self.received_at < self.sensed_at:
            raise ContractViolation("received_at precedes sensed_at")

    def received(self, at_ms: int) -> "Measurement":
        return replace(self, received_at=at_ms)


def validate_threshold(celsius: float) -> float:
    celsius = float(celsius)
    if not celsius > 0 or not math.isfinite(celsius):
        raise ContractViolation(f"acceptance threshold must be positive, got {celsius}")
    return celsius


def consecutive_delta(prev: Measurement, curr: Measurement) -> float:
    """Absolute temperature change between two consecutive reports of one node."""
    if prev.node != curr.node:
        raise ContractViolation(f"delta across nodes {prev.node} and {curr.node}")
    if curr.seq != prev.seq + 1:
        raise ContractViolation(f"seq {prev.seq} -> {curr.seq} is not consecutive")
    return abs(curr.value - prev.value)


def baseline_transmissions(duration_s: float, base_interval: SamplingInterval = BASE_INTERVAL) -> int:
    if not duration_s > 0:
        raise ContractViolation(f"duration must be positive, got {duration_s}")
    return int(duration_s // base_interval.seconds)


def savings_fraction(actual_tx: int, baseline_tx: int) -> float:
    """``1 - actual/baseline``; negative when overhead exceeds the baseline."""
    if baseline_tx <= 0:
        raise ContractViolation("baseline transmission count must be positive")
    return 1.0 - actual_tx / baseline_tx


@dataclass(frozen=True)
class Recommendation:
    """A sampling-interval change proposed by the analytics engine."""

    node: int
    new_interval: SamplingInterval
    basis_seq: int
