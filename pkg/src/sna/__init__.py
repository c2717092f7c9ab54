"""Adaptive sampling for battery-powered sensor nodes driven by a per-node Q-learning agent."""

from .domain import (
    BASE_INTERVAL,
    INTERVALS_S,
    ContractViolation,
    Measurement,
    Recommendation,
    SamplingInterval,
)

__all__ = [
    "BASE_INTERVAL",
    "INTERVALS_S",
    "ContractViolation",
    "Measurement",
    "Recommendation",
    "SamplingInterval",
]
__version__ = "0.1.0"
