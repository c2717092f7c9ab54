"""Tabular Q-learning agents that pick each node's sampling interval.

State is the node's interval index (5 states); actions step that index down,
keep it, or step it up, clamped at both ends. An epoch spans consecutive
measurements taken at the agent's current interval and closes once it holds
``epoch_deltas`` changes. Closing an epoch scores it, picks the next action,
updates ``Q(state, action)`` and, if the interval changes, yields a
:class:`~sna.domain.Recommendation`.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from .domain import (
    DEFAULT_THRESHOLD_C,
    INTERVALS_S,
    ContractViolation,
    Measurement,
    Recommendation,
    SamplingInterval,
    validate_threshold,
)

N_STATES = len(INTERVALS_S)


class Action(IntEnum):
    DECREASE = 0
    KEEP = 1
    INCREASE = 2

    @property
    def step(self) -> int:
        return self.value - 1

    def apply(self, state: int) -> int:
        return min(max(state + self.step, 0), N_STATES - 1)


N_ACTIONS = len(Action)
# Tie-break order after calibration: prefer the longer interval.
PREFERENCE = (Action.INCREASE, Action.KEEP, Action.DECREASE)


@dataclass(frozen=True)
class AgentConfig:
    alpha: float = 0.9
    gamma: float = 0.1
    threshold: float = DEFAULT_THRESHOLD_C
    calibration_epochs: int = 150
    penalty: float = -10.0
    epsilon_post: float = 0.0
    epoch_deltas: int = 1
    # Consecutive deltas at an unexpected interval before the agent trusts the node.
    resync_after: int = 3

    def __post_init__(self) -> None:
        if not 0 < self.alpha <= 1:
            raise ContractViolation("alpha must be in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ContractViolation("gamma must be in [0, 1)")
        if not 0 <= self.epsilon_post < 1:
            raise ContractViolation("epsilon_post must be in [0, 1)")
        if self.calibration_epochs < 0 or self.epoch_deltas < 1 or self.resync_after < 1:
            raise ContractViolation("calibration_epochs >= 0, epoch_deltas >= 1, resync_after >= 1")
        if not math.isfinite(self.penalty):
            raise ContractViolation("penalty must be finite")
        validate_threshold(self.threshold)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown agent fields: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass
class QTable:
    values: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS)))
    visits: np.ndarray = field(default_factory=lambda: np.zeros((N_STATES, N_ACTIONS), dtype=np.int64))

    def copy(self) -> "QTable":
        return QTable(self.values.copy(), self.visits.copy())

    def best_value(self, state: int) -> float:
        return float(self.values[state].max())


@dataclass
class EpochStats:
    node: int
    interval: SamplingInterval
    max_delta: float = 0.0
    sample_count: int = 0

    def add(self, delta: float) -> None:
        self.max_delta = max(self.max_delta, delta)
        self.sample_count += 1


def reward(stats: EpochStats, cfg: AgentConfig) -> float:
    """Interval index + 1 when the epoch stayed within threshold, else the penalty."""
    if stats.sample_count < 1:
        raise ContractViolation("epoch has no delta to score")
    if stats.max_delta <= cfg.threshold:
        return float(stats.interval.index + 1)
    return float(cfg.penalty)


def q_update(q: QTable, s: int, a: Action, r: float, s_next: int, cfg: AgentConfig) -> QTable:
    """One Q-learning step on ``Q(s, a)`` in place; returns ``q``."""
    if not math.isfinite(r):
        raise ContractViolation(f"non-finite reward {r!r}")
    if not (0 <= s < N_STATES and 0 <= s_next < N_STATES):
        raise ContractViolation(f"state out of range: {s}, {s_next}")
    old = q.values[s, a]
    q.values[s, a] = old + cfg.alpha * (r + cfg.gamma * q.best_value(s_next) - old)
    q.visits[s, a] += 1
    return q


def greedy_action(q: QTable, s: int) -> Action:
    best = PREFERENCE[0]
    for a in PREFERENCE[1:]:
        if q.values[s, a] > q.values[s, best]:
            best = a
    return best


def _calibration_action(q: QTable, s: int, rng: np.random.Generator) -> Action:
    unvisited = [a for a in Action if q.visits[s, a] == 0]
    if unvisited:
        return unvisited[int(rng.integers(len(unvisited)))]
    pending = [st for st in range(N_STATES) if (q.visits[st] == 0).any()]
    if pending:
        target = min(pending, key=lambda st: (abs(st - s), st))
        return Action.INCREASE if target > s else Action.DECREASE
    counts = q.visits[s]
    least = [a for a in Action if counts[a] == counts.min()]
    return least[int(rng.integers(len(least)))]


def select_action(q: QTable, s: int, epoch_no: int, cfg: AgentConfig, rng: np.random.Generator) -> Action:
    """Calibration sweep first, then epsilon-greedy on the learned values.

    During calibration an unvisited action of the current state is taken if
    one exists; otherwise the agent walks toward the nearest state that still
    has unvisited actions, and once everything has been visited it takes the
    least-visited action. That covers all 15 pairs within a few dozen epochs.
    """
    if not 0 <= s < N_STATES:
        raise ContractViolation(f"state out of range: {s}")
    if epoch_no < cfg.calibration_epochs:
        return _calibration_action(q, s, rng)
    if cfg.epsilon_post > 0 and rng.random() < cfg.epsilon_post:
        return Action(int(rng.integers(N_ACTIONS)))
    return greedy_action(q, s)


class Agent:
    """Q-learning controller for a single node."""

    def __init__(
        self,
        node: int,
        interval: SamplingInterval,
        cfg: AgentConfig = AgentConfig(),
        rng: Optional[np.random.Generator] = None,
        eventlog: Any = None,
    ) -> None:
        self.node = node
        self.cfg = cfg
        self.interval = interval
        self.q = QTable()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.eventlog = eventlog
        self.epoch_no = 0
        self.stats = EpochStats(node, interval)
        self.last: Optional[Measurement] = None
        self.mismatches = 0
        self.out_of_order = 0

    def _log(self, t: Optional[int], ev: str, **fields: Any) -> None:
        if self.eventlog is not None and t is not None:
            self.eventlog.append(t, ev, **fields)

    @property
    def calibrating(self) -> bool:
        return self.epoch_no < self.cfg.calibration_epochs

    def on_measurement(self, m: Measurement, now: Optional[int] = None) -> Optional[Recommendation]:
        if m.node != self.node:
            raise ContractViolation(f"agent for node {self.node} got node {m.node}")
        prev = self.last
        if prev is not None and m.seq <= prev.seq:
            self.out_of_order += 1
            self._log(now, "dropped-out-of-order", node=m.node, seq=m.seq, last_seq=prev.seq)
            return None
        self.last = m
        if prev is None or m.seq != prev.seq + 1:
            return None

        delta = abs(m.value - prev.value)
        gap_s, rem = divmod(m.scheduled_at - prev.scheduled_at, 1000)
        if rem or gap_s not in INTERVALS_S:
            return None
        observed = SamplingInterval.from_seconds(gap_s)
        if observed != self.interval:
            # The first sample after a reprogram still follows the old schedule.
            self.mismatches += 1
            if self.mismatches >= self.cfg.resync_after:
                self._log(now, "agent-resync", node=self.node, expected_s=self.interval.seconds,
                          observed_s=observed.seconds)
                self.interval = observed
                self.stats = EpochStats(self.node, observed)
                self.mismatches = 0
            return None
        self.mismatches = 0

        self.stats.add(delta)
        if self.stats.sample_count < self.cfg.epoch_deltas:
            return None
        return self._close_epoch(m, now)

    def _close_epoch(self, m: Measurement, now: Optional[int]) -> Optional[Recommendation]:
        stats = self.stats
        r = reward(stats, self.cfg)
        s = stats.interval.index
        a = select_action(self.q, s, self.epoch_no, self.cfg, self.rng)
        s_next = a.apply(s)
        self._log(now, "epoch-closed", node=self.node, epoch=self.epoch_no, interval_s=stats.interval.seconds,
                  max_delta=stats.max_delta, samples=stats.sample_count, reward=r,
                  calibrating=self.calibrating)
        q_update(self.q, s, a, r, s_next, self.cfg)
        self._log(now, "q-updated", node=self.node, s=s, a=int(a), r=r, s_next=s_next,
                  q=float(self.q.values[s, a]))
        self.epoch_no += 1
        new_interval = SamplingInterval(s_next)
        self.stats = EpochStats(self.node, new_interval)
        if s_next == s:
            return None
        self.interval = new_interval
        rec = Recommendation(self.node, new_interval, basis_seq=m.seq)
        self._log(now, "recommendation", node=self.node, interval_s=new_interval.seconds, seq=m.seq)
        return rec

    # -- checkpointing ---------------------------------------------------------------

    def checkpoint_records(self) -> list[dict[str, Any]]:
        recs: list[dict[str, Any]] = [{
            "rec": "agent",
            "node": self.node,
            "epoch_no": self.epoch_no,
            "interval_s": self.interval.seconds,
            "rng": self.rng.bit_generator.state,
        }]
        for s in range(N_STATES):
            for a in Action:
                recs.append({"rec": "q", "node": self.node, "s": s, "a": int(a),
                             "q": float(self.q.values[s, a]), "visits": int(self.q.visits[s, a])})
        return recs


def agent_rng(seed: int, node: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 0xA6E7, int(node)])


class Analytics:
    """One independent agent per node, created on the node's first event."""

    def __init__(self, cfg: AgentConfig = AgentConfig(), seed: int = 0, eventlog: Any = None) -> None:
        self.cfg = cfg
        self.seed = seed
        self.eventlog = eventlog
        self.agents: dict[int, Agent] = {}

    def agent_for(self, node: int, interval: SamplingInterval) -> Agent:
        agent = self.agents.get(node)
        if agent is None:
            agent = Agent(node, interval, self.cfg, agent_rng(self.seed, node), self.eventlog)
            self.agents[node] = agent
        return agent

    def on_event(self, m: Measurement, now: Optional[int] = None) -> Optional[Recommendation]:
        interval = SamplingInterval.from_seconds(m.interval_s) if m.interval_s else SamplingInterval(0)
        return self.agent_for(m.node, interval).on_measurement(m, now)

    def save_checkpoint(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for node in sorted(self.agents):
                for rec in self.agents[node].checkpoint_records():
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        os.replace(tmp, path)

    def load_checkpoint(self, path: Union[str, Path]) -> None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                node = int(rec["node"])
                if rec["rec"] == "agent":
                    agent = self.agent_for(node, SamplingInterval.from_seconds(rec["interval_s"]))
                    agent.interval = SamplingInterval.from_seconds(rec["interval_s"])
                    agent.stats = EpochStats(node, agent.interval)
                    agent.epoch_no = int(rec["epoch_no"])
                    if "rng" in rec:
                        agent.rng.bit_generator.state = rec["rng"]
                elif rec["rec"] == "q":
                    agent = self.agents[node]
                    agent.q.values[rec["s"], rec["a"]] = float(rec["q"])
                    agent.q.visits[rec["s"], rec["a"]] = int(rec["visits"])
                else:
                    raise ValueError(f"unknown checkpoint record {rec['rec']!r}")
