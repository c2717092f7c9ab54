"""Run configuration: one JSON document with a versioned ``schema`` field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from ..analytics import AgentConfig
from ..dashboard import RetryPolicy
from ..domain import ContractViolation, SamplingInterval
from ..envsim import Trace, TraceConfig, generate_trace, read_trace_csv
from ..nodes import LinkConfig

SCHEMA = "sna.run/1"


class ConfigError(ValueError):
    pass


def _build(cls, data: Any, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown fields {unknown}")
    try:
        return cls(**dict(data))
    except (TypeError, ContractViolation) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class NodeConfig:
    id: int
    drift_mean_ms: float = 0.0
    drift_sigma_ms: float = 0.0
    interval_s: int = 30

    def __post_init__(self) -> None:
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 1:
            raise ContractViolation(f"node id must be a positive integer, got {self.id!r}")
        if self.drift_mean_ms < 0 or self.drift_sigma_ms < 0:
            raise ContractViolation("drift parameters must be >= 0")
        SamplingInterval.from_seconds(self.interval_s)

    @property
    def interval(self) -> SamplingInterval:
        return SamplingInterval.from_seconds(self.interval_s)


@dataclass(frozen=True)
class PipelineConfig:
    """Dashboard retry policy plus fixed processing delays along the loop."""

    retry_delay_ms: int = 2000
    max_attempts: int = 10
    ingest_ms: int = 20
    analytics_ms: int = 250

    def __post_init__(self) -> None:
        if self.ingest_ms < 0 or self.analytics_ms < 0:
            raise ContractViolation("processing delays must be >= 0")
        RetryPolicy(self.retry_delay_ms, self.max_attempts)

    @property
    def retry(self) -> RetryPolicy:
        return RetryPolicy(self.retry_delay_ms, self.max_attempts)


@dataclass(frozen=True)
class MetricsConfig:
    # Start of the scored window; the first 12 h are the calibration phase.
    window_start_s: int = 43_200
    window_end_s: Optional[int] = None


@dataclass(frozen=True)
class RealtimeConfig:
    scale: float = 1.0
    host: str = "127.0.0.1"
    port: int = 0
    reconnect_attempts: int = 5
    reconnect_delay_ms: int = 200
    checkpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise ContractViolation("scale must be positive")
        if self.reconnect_attempts < 0 or self.reconnect_delay_ms < 0:
            raise ContractViolation("reconnect settings must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "virtual"
    seed: int = 1
    duration_s: int = 108_000
    trace: TraceConfig = field(default_factory=TraceConfig)
    trace_csv: Optional[str] = None
    nodes: tuple[NodeConfig, ...] = (NodeConfig(1),)
    link: LinkConfig = field(default_factory=LinkConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    dashboard: PipelineConfig = field(default_factory=PipelineConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    realtime: RealtimeConfig = field(default_factory=RealtimeConfig)
    out: Optional[str] = None

    def validate(self) -> "RunConfig":
        if self.mode not in ("virtual", "realtime"):
            raise ConfigError(f"mode must be 'virtual' or 'realtime', got {self.mode!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if isinstance(self.duration_s, bool) or not isinstance(self.duration_s, int) or self.duration_s <= 0:
            raise ConfigError("duration_s must be a positive integer")
        if not self.nodes:
            raise ConfigError("at least one node is required")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"node ids must be unique, got {ids}")
        if self.trace_csv is None and self.trace.duration_s < self.duration_s:
            raise ConfigError("trace is shorter than the run")
        try:
            self.trace.validate()
        except ContractViolation as exc:
            raise ConfigError(f"trace: {exc}") from None
        m = self.metrics
        end = self.window_end_s
        if not 0 <= m.window_start_s < end:
            raise ConfigError("metrics window must satisfy 0 <= window_start_s < window_end_s <= duration_s")
        if end > self.duration_s:
            raise ConfigError("metrics window ends after the run")
        return self

    @property
    def window_end_s(self) -> int:
        return self.metrics.window_end_s if self.metrics.window_end_s is not None else self.duration_s

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def build_trace(self, base_dir: Optional[Path] = None) -> Trace:
        if self.trace_csv is not None:
            path = Path(self.trace_csv)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            trace = read_trace_csv(path)
            missing = [n for n in self.node_ids if n not in trace.offsets]
            if missing:
                raise ConfigError(f"trace CSV lacks nodes {missing}")
            if trace.duration_s < self.duration_s:
                raise ConfigError("trace CSV is shorter than the run")
            return trace
        return generate_trace(self.trace, self.node_ids)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "schema": SCHEMA,
            "mode": self.mode,
            "seed": self.seed,
            "duration_s": self.duration_s,
            "trace": self.trace.to_dict(),
            "trace_csv": self.trace_csv,
            "nodes": [asdict(n) for n in self.nodes],
            "link": asdict(self.link),
            "agent": self.agent.to_dict(),
            "dashboard": asdict(self.dashboard),
            "metrics": asdict(self.metrics),
            "realtime": asdict(self.realtime),
            "out": self.out,
        }
        return d

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        if data.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported schema {data.get('schema')!r}, expected {SCHEMA!r}")
        known = {f.name for f in fields(cls)} | {"schema"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level fields {unknown}")
        kwargs: dict[str, Any] = {k: data[k] for k in ("mode", "seed", "duration_s", "trace_csv", "out") if k in data}
        if "trace" in data:
            kwargs["trace"] = _build(TraceConfig, data["trace"], "trace")
        if "nodes" in data:
            if not isinstance(data["nodes"], list):
                raise ConfigError("nodes must be a list")
            kwargs["nodes"] = tuple(_build(NodeConfig, n, f"nodes[{i}]") for i, n in enumerate(data["nodes"]))
        for key, cls_ in (("link", LinkConfig), ("agent", AgentConfig), ("dashboard", PipelineConfig),
                          ("metrics", MetricsConfig), ("realtime", RealtimeConfig)):
            if key in data:
                kwargs[key] = _build(cls_, data[key], key)
        try:
            cfg = cls(**kwargs)
        except (TypeError, ContractViolation) as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    def with_overrides(self, **changes: Any) -> "RunConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None}).validate()


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from None
    return RunConfig.from_dict(data)


def default_config_path() -> Path:
    return Path(str(resources.files("sna") / "data" / "default_config.json"))


def default_config() -> RunConfig:
    return load_config(default_config_path())


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"
