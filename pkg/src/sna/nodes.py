"""Sensor node and radio link models.

A node alternates between two steps driven by its executor (the virtual event
loop or a realtime task): :func:`next_sample_time` plans the upcoming schedule
point and draws its clock drift, then :func:`emit_measurement` reads the room
temperature at the planned instant. Reprogram commands can land between the
two; they never move the already planned point, only the one after it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Union

import numpy as np

from .domain import ContractViolation, Measurement, SamplingInterval
from .envsim import Trace, sample_at

# Table-style per-node clock drift (mean ms early, sigma ms) from the office deployment.
OFFICE_DRIFT_MS: dict[int, tuple[float, float]] = {
    2: (993.0, 824.0),
    5: (979.0, 832.0),
    6: (938.0, 862.0),
    7: (850.0, 787.0),
}


@dataclass(frozen=True)
class ReprogramCommand:
    cmd_id: int
    node: int
    interval_s: int
    issued_at: int = 0

    @property
    def new_interval(self) -> SamplingInterval:
        return SamplingInterval.from_seconds(self.interval_s)


@dataclass(frozen=True)
class Ack:
    cmd_id: int
    node: int
    interval_s: int


@dataclass(frozen=True)
class ErrorReply:
    reason: str
    node: Optional[int] = None
    cmd_id: Optional[int] = None


@dataclass(frozen=True)
class NodeState:
    node: int
    interval: SamplingInterval
    next_scheduled_at: int
    seq: int = 0
    tx_count: int = 0
    drift_mean_ms: float = 0.0
    drift_sigma_ms: float = 0.0
    last_cmd_id: int = -1
    # Schedule point planned by next_sample_time and not yet sensed.
    pending_scheduled_at: Optional[int] = None
    pending_sensed_at: Optional[int] = None

    def __post_init__(self) -> None:
        if self.drift_sigma_ms < 0 or self.drift_mean_ms < 0:
            raise ContractViolation("drift parameters must be >= 0 (nodes sense early)")


@dataclass(frozen=True)
class LinkConfig:
    loss_prob: float = 0.0
    latency_ms_mean: float = 0.0
    latency_ms_jitter: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.loss_prob < 1:
            raise ContractViolation(f"loss_prob must be in [0, 1), got {self.loss_prob}")
        if self.latency_ms_mean < 0 or self.latency_ms_jitter < 0:
            raise ContractViolation("latency parameters must be >= 0")


def _normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@lru_cache(maxsize=256)
def drift_location(mean_ms: float, sigma_ms: float) -> float:
    """Location ``mu`` with ``E[max(N(mu, sigma), 0)] == mean_ms``.

    Clamping negative draws to zero lifts the mean, so the Normal is shifted
    left until the clamped mean equals the configured one.
    """
    if sigma_ms == 0 or mean_ms == 0:
        return mean_ms

    def clamped_mean(mu: float) -> float:
        z = mu / sigma_ms
        return mu * _normal_cdf(z) + sigma_ms * _normal_pdf(z)

    lo, hi = mean_ms - 10 * sigma_ms, mean_ms
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if clamped_mean(mid) < mean_ms:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def draw_drift(state: NodeState, rng: np.random.Generator, scheduled_at: int) -> int:
    upper = min(state.interval.ms // 2, scheduled_at)
    if state.drift_sigma_ms == 0:
        drift = state.drift_mean_ms
    else:
        mu = drift_location(state.drift_mean_ms, state.drift_sigma_ms)
        drift = rng.normal(mu, state.drift_sigma_ms)
    return int(round(min(max(drift, 0.0), upper)))


def next_sample_time(state: NodeState, rng: np.random.Generator) -> tuple[int, NodeState]:
    """Plan the next schedule point; returns the (early) sensing instant."""
    scheduled = state.next_scheduled_at
    sensed_at = scheduled - draw_drift(state, rng, scheduled)
    return sensed_at, replace(
        state,
        next_scheduled_at=scheduled + state.interval.ms,
        pending_scheduled_at=scheduled,
        pending_sensed_at=sensed_at,
    )


def emit_measurement(state: NodeState, trace: Trace, t: int) -> tuple[Measurement, NodeState]:
    if state.pending_sensed_at is None or t != state.pending_sensed_at:
        raise ContractViolation(f"node {state.node}: no sample planned at t={t}")
    m = Measurement(
        node=state.node,
        seq=state.seq + 1,
        value=sample_at(trace, state.node, t),
        scheduled_at=state.pending_scheduled_at,
        sensed_at=t,
        interval_s=state.interval.seconds,
    )
    # The radio transmitted whether or not the frame survives the link.
    return m, replace(
        state,
        seq=state.seq + 1,
        tx_count=state.tx_count + 1,
        pending_scheduled_at=None,
        pending_sensed_at=None,
    )


def deliver(link: LinkConfig, now: int, rng: np.random.Generator) -> Optional[int]:
    """Arrival time of a frame sent at ``now``, or ``None`` if the link drops it."""
    lost = rng.random() < link.loss_prob
    jitter = rng.uniform(-link.latency_ms_jitter, link.latency_ms_jitter) if link.latency_ms_jitter else 0.0
    if lost:
        return None
    return now + max(0, int(round(link.latency_ms_mean + jitter)))


def handle_reprogram(
    state: NodeState, cmd: ReprogramCommand
) -> tuple[Union[Ack, ErrorReply], NodeState]:
    """Apply a reprogram command and answer it.

    Commands whose id is not newer than the last one applied are re-acked
    without touching the schedule, which makes retransmissions idempotent and
    stops a delayed older command from overriding a newer one. Every answer
    is a transmission.
    """
    if cmd.node != state.node:
        raise ContractViolation(f"command for node {cmd.node} delivered to node {state.node}")
    sent = replace(state, tx_count=state.tx_count + 1)
    if cmd.cmd_id <= state.last_cmd_id:
        return Ack(cmd.cmd_id, state.node, state.interval.seconds), sent
    try:
        interval = cmd.new_interval
    except ContractViolation as exc:
        return ErrorReply(str(exc), node=state.node, cmd_id=cmd.cmd_id), replace(sent, last_cmd_id=cmd.cmd_id)
    next_at = sent.next_scheduled_at
    if sent.pending_scheduled_at is not None:
        next_at = sent.pending_scheduled_at + interval.ms
    return Ack(cmd.cmd_id, state.node, interval.seconds), replace(
        sent, interval=interval, next_scheduled_at=next_at, last_cmd_id=cmd.cmd_id
    )
