import json
from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sna.envsim import constant_trace, write_trace_csv, generate_trace, TraceConfig
from sna.harness.config import (
    ConfigError,
    RunConfig,
    default_config,
    default_config_path,
    dump_config,
    load_config,
)
from sna.harness.eventlog import EventLog
from sna.harness.virtual import ROLE_ANALYTICS, ROLE_DASHBOARD, ROLE_GATEWAY, VirtualLoop, run_virtual
from sna.nodes import OFFICE_DRIFT_MS, LinkConfig

from conftest import small_config


class TestConfig:
    def test_default_is_the_flagship(self):
        cfg = default_config()
        assert cfg.duration_s == 108_000 and cfg.node_ids == [2, 5, 6, 7]
        assert {n.id: (n.drift_mean_ms, n.drift_sigma_ms) for n in cfg.nodes} == OFFICE_DRIFT_MS
        assert cfg.trace == TraceConfig() and cfg.metrics.window_start_s == 43_200

    def test_dump_load_roundtrip(self, tmp_path):
        cfg = default_config()
        path = tmp_path / "c.json"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg
        assert dump_config(load_config(default_config_path())) == default_config_path().read_text()

    @pytest.mark.parametrize("mutate,match", [
        (lambda d: d.update(schema="sna.run/0"), "schema"),
        (lambda d: d.update(colour="red"), "unknown"),
        (lambda d: d["link"].update(loss_prob=1.0), "loss_prob"),
        (lambda d: d["nodes"].append(dict(d["nodes"][0])), "unique"),
        (lambda d: d.update(nodes=[]), "node"),
        (lambda d: d.update(duration_s=0), "duration"),
        (lambda d: d.update(duration_s=200_000), "trace"),
        (lambda d: d["agent"].update(alpha=2), "alpha"),
        (lambda d: d["nodes"][0].update(interval_s=45), "interval"),
        (lambda d: d["metrics"].update(window_start_s=200_000), "window"),
        (lambda d: d.update(mode="batch"), "mode"),
        (lambda d: d["dashboard"].update(retries=3), "unknown"),
    ])
    def test_invalid(self, mutate, match):
        data = default_config().to_dict()
        mutate(data)
        with pytest.raises(ConfigError, match=match):
            RunConfig.from_dict(data)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="malformed"):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_trace_csv(self, tmp_path):
        write_trace_csv(constant_trace(21.0, 4000, [1, 2]), [1, 2], tmp_path / "t.csv")
        cfg = replace(small_config(nodes=[1, 2], duration_s=3600), trace_csv="t.csv")
        trace = cfg.build_trace(tmp_path)
        assert trace.duration_s == 4000
        with pytest.raises(ConfigError):
            replace(small_config(nodes=[1, 3], duration_s=3600), trace_csv="t.csv").build_trace(tmp_path)


class TestEventLog:
    def test_time_must_not_go_back(self):
        log = EventLog()
        log.append(5, "sensed")
        with pytest.raises(ValueError):
            log.append(4, "sensed")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            EventLog().append(0, "teleported")

    def test_bytes_and_reload(self, tmp_path):
        log = EventLog()
        log.append(0, "run-start", seed=1)
        log.append(7, "sensed", node=2, value_c=21.25)
        data = log.to_bytes()
        assert data == b'{"t":0,"ev":"run-start","seed":1}\n{"t":7,"ev":"sensed","node":2,"value_c":21.25}\n'
        log.write(tmp_path / "e.ndjson")
        assert EventLog.read(tmp_path / "e.ndjson").to_bytes() == data

    def test_streaming_sink(self, tmp_path):
        path = tmp_path / "s.ndjson"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            log = EventLog(sink=fh)
            log.append(1, "sensed", node=1)
        assert path.read_bytes() == log.to_bytes()

    def test_rejects_garbage(self):
        with pytest.raises(ValueError):
            EventLog.from_lines(['{"t":1}'])
        with pytest.raises(ValueError):
            EventLog.from_lines(["{"])


class TestVirtualLoop:
    @given(st.lists(st.tuples(st.integers(0, 50), st.sampled_from([ROLE_GATEWAY, ROLE_DASHBOARD, ROLE_ANALYTICS])),
                    max_size=60))
    def test_order(self, items):
        loop, seen = VirtualLoop(), []
        for i, (t, role) in enumerate(items):
            loop.at(t, role, lambda k=(t, role, i): seen.append(k))
        loop.run()
        assert seen == sorted(seen)
        assert loop.processed == len(items)

    def test_no_scheduling_in_the_past(self):
        loop = VirtualLoop()
        loop.at(10, ROLE_GATEWAY, lambda: loop.at(5, ROLE_GATEWAY, lambda: None))
        with pytest.raises(ValueError):
            loop.run()


class TestVirtualRun:
    def test_determinism(self):
        cfg = small_config(nodes=[2, 5], duration_s=6 * 3600, link=LinkConfig(0.2, 40, 20), seed=3)
        trace = generate_trace(TraceConfig(duration_s=6 * 3600), [2, 5])
        a, b = run_virtual(cfg, trace), run_virtual(cfg, trace)
        assert a.log.to_bytes() == b.log.to_bytes()
        c = run_virtual(replace(cfg, seed=4), trace)
        assert c.log.to_bytes() != a.log.to_bytes()

    def test_timestamps_non_decreasing_and_bounded(self):
        cfg = small_config(nodes=[1, 2], duration_s=3600, link=LinkConfig(0.3, 40, 20))
        res = run_virtual(cfg, constant_trace(22.0, 3600, [1, 2]))
        ts = [r["t"] for r in res.log.records]
        assert ts == sorted(ts)
        assert all(r["t"] < 3600 * 1000 for r in res.log.of("sensed"))

    def test_quarter_hour_constant_trace(self):
        from sna.analytics import AgentConfig
        cfg = small_config(duration_s=900, agent=AgentConfig(calibration_epochs=0))
        res = run_virtual(cfg, constant_trace(22.0, 900, [1]))
        # Greedy from an empty table climbs one step per scored epoch: 60 s at 30 s, 120 at 120,
        # 240 at 300 and 480 at 660 (each change skips one transition sample).
        assert res.nodes[1].interval.seconds == 480
        assert [r["interval_s"] for r in res.log.of("command-sent")] == [60, 120, 240, 480]

    def test_run_start_record(self):
        res = run_virtual(small_config(duration_s=600), constant_trace(22.0, 600, [1]))
        start = res.log.records[0]
        assert start["ev"] == "run-start" and start["mode"] == "virtual"
        assert RunConfig.from_dict(start["config"]) == res.config
        assert list(start)[:2] == ["t", "ev"]

    def test_invalid_config_before_any_event(self):
        with pytest.raises(ConfigError):
            run_virtual(replace(small_config(), duration_s=-5))

    def test_unknown_node_recommendation_logged(self):
        from sna.domain import Recommendation, SamplingInterval
        from sna.harness.virtual import VirtualRun
        run = VirtualRun(small_config(duration_s=600), constant_trace(22.0, 600, [1]))
        run._recommendation(Recommendation(9, SamplingInterval(1), 1))
        assert run.log.of("error")[0]["node"] == 9
