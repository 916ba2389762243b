import json
import math

import numpy as np
import pytest

from fedseq.checkpoint import load_checkpoint
from fedseq.experiment import (ConfigError, ExperimentConfig, Runner, compare_pretraining, preset_config,
                               read_metrics, read_summary, replay_cell, run_experiment, run_id, summarize)
from fedseq.model import init_params
from oracles import sample_sd

TINY_HYPER = {"hidden": 16, "layers": 1, "heads": 2, "ffn_dim": 32, "max_len": 24, "learning_rate": 0.01,
              "batch_size": 16}


def tiny_config(**kw):
    d = {"data": {"synthetic": {"num_patients": 120, "num_centers": 3, "num_groups": 12, "seed": 7}},
         "thresholds": [1], "seeds": [0], "hyper": TINY_HYPER, "client_fraction": 0.67,
         "mlm_rounds": 2, "nextvisit_rounds": 2, "mlm_epochs": 2, "nextvisit_epochs": 2,
         "local_mlm_epochs": 1, "local_nextvisit_epochs": 2, "name": "tiny"}
    d.update(kw)
    return ExperimentConfig.from_dict(d)


def row(regime, value, seed=0, t=1, status="ok"):
    return {"regime": regime, "pretraining": "NONE", "min_visits": t, "seed": seed,
            "metric_name": "average_precision", "value": value, "status": status}


def test_summarize_examples():
    (one,) = summarize([row("FL", 0.5)])
    assert one["mean"] == 0.5 and one["ci95_low"] is None and one["ci95_high"] is None
    (two,) = summarize([row("FL", 0.4), row("FL", 0.6, seed=1)])
    half = 1.96 * sample_sd([0.4, 0.6]) / math.sqrt(2)
    assert two["mean"] == pytest.approx(0.5, abs=1e-15)
    assert two["ci95_high"] - two["mean"] == pytest.approx(half, abs=1e-12)
    assert half == pytest.approx(0.196, abs=5e-4)
    (flat,) = summarize([row("FL", 0.3, seed=s) for s in range(4)])
    assert flat["ci95_low"] == flat["ci95_high"] == flat["mean"]


def test_summarize_ignores_failed_rows():
    (s,) = summarize([row("FL", 0.5), row("FL", float("nan"), seed=1, status="failed")])
    assert s["n"] == 1


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"seedz": [1]})
    with pytest.raises(ConfigError):
        ExperimentConfig(thresholds=[5, 3])
    with pytest.raises(ConfigError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigError):
        ExperimentConfig(regimes=["FEDPROX"])
    with pytest.raises(ConfigError):
        ExperimentConfig(hyper={"hidden": 10, "heads": 4})
    with pytest.raises(ConfigError):
        preset_config("nope")


def test_defaults_are_documented_values():
    cfg = ExperimentConfig()
    assert cfg.thresholds == [1, 3, 5, 15] and len(cfg.seeds) == 5
    assert cfg.client_fraction == 0.1


def test_cell_list_local_collapses_pretraining():
    cfg = ExperimentConfig(regimes=["LOCAL"], pretraining=["FL_MLM", "CENTRAL_MLM", "NONE"])
    assert cfg.cell_list() == [("LOCAL", "LOCAL_MLM"), ("LOCAL", "NONE")]


def test_single_cell_counts_and_outputs(tmp_path):
    cfg = tiny_config(regimes=["CENTRALIZED"], pretraining=["NONE"])
    report = run_experiment(cfg, tmp_path)
    assert len(report.rows) == 1 and len(report.summary) == 1
    assert {p.name for p in tmp_path.iterdir()} >= {"run.json", "metrics.csv", "summary.csv", "cells"}
    rid = run_id("CENTRALIZED", "NONE", 1, 0)
    assert (tmp_path / "cells" / rid / "model.fseq").exists()
    assert json.loads((tmp_path / "run.json").read_text()) == cfg.to_dict()


def test_rerun_is_identical(tmp_path):
    cfg = tiny_config(cells=[["FL", "FL_MLM"], ["LOCAL", "NONE"]])
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    assert a.rows == b.rows and a.summary == b.summary
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_stored_summary_recomputes_exactly(tmp_path):
    cfg = tiny_config(cells=[["CENTRALIZED", "NONE"]], seeds=[0, 1], thresholds=[1, 3])
    run_experiment(cfg, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert read_summary(tmp_path / "summary.csv") == summarize(rows)
    assert all(s["n"] == 2 for s in summarize(rows))


def test_failure_isolation(tmp_path):
    # threshold 40 leaves no test patient; that cell fails, the other runs
    cfg = tiny_config(cells=[["CENTRALIZED", "NONE"]], thresholds=[1, 40])
    report = run_experiment(cfg, tmp_path)
    status = {r["min_visits"]: r["status"] for r in report.rows}
    assert status == {1: "ok", 40: "failed"}
    assert len(report.failed) == 1 and report.failed[0]["error"]


def test_none_condition_skips_mlm_and_pretrained_differs(tmp_path):
    cfg = tiny_config(pretraining=["NONE", "CENTRAL_MLM"])
    report = compare_pretraining(cfg, tmp_path)
    assert {r["pretraining"] for r in report.rows} == {"NONE", "CENTRAL_MLM"}
    assert {r["regime"] for r in report.rows} == {"FL"}
    mlm = list((tmp_path / "mlm").glob("*.fseq"))
    assert [p.name for p in mlm] == ["s0-t1-CENTRAL_MLM.fseq"]
    runner = Runner(cfg)
    assert runner.pretrained(0, "NONE", 1) is None
    ctx = runner.context(0)
    pre = load_checkpoint(mlm[0], ctx.hyper)
    fresh = init_params(ctx.hyper, 0)
    assert not np.array_equal(pre["layer0.wq"], fresh["layer0.wq"])


def test_compare_pretraining_requires_none():
    with pytest.raises(ConfigError):
        compare_pretraining(tiny_config(pretraining=["FL_MLM"]))


def test_replay_matches(tmp_path):
    cfg = tiny_config(cells=[["LOCAL", "LOCAL_MLM"], ["FL", "FL_MLM"]], thresholds=[1, 3])
    report = run_experiment(cfg, tmp_path)
    for r in report.rows:
        assert replay_cell(tmp_path, r["run_id"]) == r


def test_threshold_monotone_cohort(tmp_path):
    runner = Runner(tiny_config(thresholds=[1, 2, 3, 5]))
    ctx = runner.context(0)
    sizes = [len(ctx.shards(t).pooled_train()) + len(ctx.shards(t).pooled_test()) for t in (1, 2, 3, 5)]
    assert sizes == sorted(sizes, reverse=True)
