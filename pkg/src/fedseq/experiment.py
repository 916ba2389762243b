"""Experiment grid: regime x pretraining x min-visit threshold over seeds."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from .centers import ClientDataset, partition_cohort, read_transfers_csv
from .checkpoint import save_checkpoint
from .data import Vocabulary, build_eval_examples, build_vocabulary, filter_min_visits, load_cohort, split_cohort
from .federation import (FederationConfig, pool, run_centralized, run_fedavg, run_local_baseline,
                         write_round_log)
from .model import Head, HyperParams, ModelParams
from .synth import SynthConfig, generate_cohort
from .tasks import nextvisit_ap, split_validation

log = logging.getLogger(__name__)

REGIMES = ("FL", "CENTRALIZED", "LOCAL")
PRETRAINING = ("FL_MLM", "CENTRAL_MLM", "NONE")
LOCAL_MLM = "LOCAL_MLM"
METRIC = "average_precision"
Z95 = 1.96
RUN_DIR_ENV = "FEDSEQ_RUN_DIR"

METRIC_COLUMNS = ("run_id", "regime", "pretraining", "min_visits", "seed", "split", "metric_name",
                  "value", "n_examples", "status", "error")
SUMMARY_COLUMNS = ("regime", "pretraining", "min_visits", "metric_name", "n", "mean", "ci95_low", "ci95_high")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to replay a run; serialized verbatim as run.json.

    ``data`` is either ``{"synthetic": {...SynthConfig fields}}`` or
    ``{"visits": path, "groups": path, "transfers": path}``. ``cells``, when
    given, replaces the regime x pretraining product with explicit pairs.
    ``mlm_min_visits`` trains one MLM per seed on that threshold and reuses it
    for every cell; null trains it at each cell's threshold.
    """

    data: dict = field(default_factory=lambda: {"synthetic": {}})
    thresholds: list = field(default_factory=lambda: [1, 3, 5, 15])
    regimes: list = field(default_factory=lambda: list(REGIMES))
    pretraining: list = field(default_factory=lambda: list(PRETRAINING))
    cells: Optional[list] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    hyper: dict = field(default_factory=dict)
    client_fraction: float = 0.1
    local_epochs: int = 1
    persist_client_optimizer: bool = False
    mlm_rounds: int = 40
    nextvisit_rounds: int = 40
    mlm_epochs: int = 10
    nextvisit_epochs: int = 10
    local_mlm_epochs: int = 10
    local_nextvisit_epochs: int = 20
    mlm_min_visits: Optional[int] = None
    train_fraction: float = 0.8
    name: str = "experiment"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.thresholds or any(int(t) < 1 for t in self.thresholds):
            raise ConfigError("thresholds must be positive integers")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("thresholds must be sorted ascending")
        bad = set(self.regimes) - set(REGIMES)
        if bad:
            raise ConfigError(f"unknown regime(s) {sorted(bad)}")
        bad = set(self.pretraining) - set(PRETRAINING)
        if bad:
            raise ConfigError(f"unknown pretraining condition(s) {sorted(bad)}")
        if self.cells is not None:
            for cell in self.cells:
                if len(cell) != 2 or cell[0] not in REGIMES:
                    raise ConfigError(f"bad cell {cell!r}")
                allowed = (LOCAL_MLM, "NONE") if cell[0] == "LOCAL" else PRETRAINING
                if cell[1] not in allowed:
                    raise ConfigError(f"cell {cell!r}: pretraining must be one of {allowed}")
        if "synthetic" in self.data:
            if set(self.data) != {"synthetic"}:
                raise ConfigError("data.synthetic cannot be combined with CSV paths")
            try:
                SynthConfig(**self.data["synthetic"]).validate()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"data.synthetic: {exc}") from exc
        elif set(self.data) != {"visits", "groups", "transfers"}:
            raise ConfigError("data must be {'synthetic': {...}} or {'visits', 'groups', 'transfers'} paths")
        try:
            self.base_hyper()
            self.federation(0, Head.MLM, self.base_hyper())
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        for name in ("mlm_rounds", "nextvisit_rounds", "mlm_epochs", "nextvisit_epochs",
                     "local_mlm_epochs", "local_nextvisit_epochs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def base_hyper(self) -> HyperParams:
        return HyperParams.from_dict(self.hyper)

    def federation(self, seed: int, task: Head, hyper: HyperParams) -> FederationConfig:
        rounds = self.mlm_rounds if task is Head.MLM else self.nextvisit_rounds
        return FederationConfig(hyper=hyper, client_fraction=self.client_fraction, rounds=rounds,
                                local_epochs=self.local_epochs, task=task, seed=seed,
                                persist_client_optimizer=self.persist_client_optimizer)

    def cell_list(self) -> list[tuple[str, str]]:
        if self.cells is not None:
            return [tuple(c) for c in self.cells]
        out = []
        for r in self.regimes:
            for p in self.pretraining:
                if r == "LOCAL":
                    p = "NONE" if p == "NONE" else LOCAL_MLM
                if (r, p) not in out:
                    out.append((r, p))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


def run_id(regime: str, pretraining: str, min_visits: int, seed: int) -> str:
    return f"{regime}-{pretraining}-t{min_visits}-s{seed}"


# --- data preparation --------------------------------------------------------

def load_data(config: ExperimentConfig):
    """Cohort and transfer records from the configured source."""
    if "synthetic" in config.data:
        return generate_cohort(SynthConfig(**config.data["synthetic"]))
    return (load_cohort(config.data["visits"], config.data["groups"]),
            read_transfers_csv(config.data["transfers"]))


@dataclass
class Shards:
    """Per-client train/val shards and pooled test patients at one threshold."""

    train: list
    val: dict
    test: dict

    def pooled_train(self):
        return pool(self.train)

    def pooled_val(self):
        return [p for cid in sorted(self.val) for p in self.val[cid]]

    def pooled_test(self):
        return [p for cid in sorted(self.test) for p in self.test[cid]]


class SeedContext:
    """Data shared by all cells of one seed: vocabulary, partition, split."""

    def __init__(self, config: ExperimentConfig, seed: int, cohort, transfers):
        self.config, self.seed = config, seed
        self.vocab: Vocabulary = build_vocabulary(cohort)
        self.hyper = config.base_hyper().for_vocab(self.vocab)
        self.partition = partition_cohort(cohort, transfers)
        kept = [p for c in self.partition.clients for p in c.patients]
        train, test = split_cohort(kept, config.train_fraction, seed)
        self.train_ids = {p.patient_id for p in train}
        self._shards: dict[int, Shards] = {}

    def shards(self, threshold: int) -> Shards:
        if threshold not in self._shards:
            train, val, test = [], {}, {}
            for c in self.partition.clients:
                pts = filter_min_visits(c.patients, threshold)
                tr = [p for p in pts if p.patient_id in self.train_ids]
                te = [p for p in pts if p.patient_id not in self.train_ids]
                if len(tr) >= 2:
                    tr, va = split_validation(tr, self.seed, "val:" + c.center_id)
                else:
                    va = []
                train.append(ClientDataset(c.center_id, tr))
                val[c.center_id] = va
                test[c.center_id] = te
            self._shards[threshold] = Shards(train, val, test)
        return self._shards[threshold]

    def test_examples(self, threshold: int) -> dict:
        """Frozen next-visit test examples keyed by patient id."""
        pts = [p for p in self.shards(threshold).pooled_test() if p.num_visits >= 2]
        examples = build_eval_examples(pts, self.vocab, self.hyper.max_len, self.seed)
        return {p.patient_id: e for p, e in zip(pts, examples)}


# --- cells -------------------------------------------------------------------

class Runner:
    def __init__(self, config: ExperimentConfig, out_dir: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._data = None
        self._contexts: dict[int, SeedContext] = {}
        self._mlm: dict[tuple, ModelParams] = {}

    def _path(self, *parts) -> Optional[Path]:
        if self.out_dir is None:
            return None
        path = self.out_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def context(self, seed: int) -> SeedContext:
        if self._data is None:
            self._data = load_data(self.config)
        if seed not in self._contexts:
            self._contexts[seed] = SeedContext(self.config, seed, *self._data)
        return self._contexts[seed]

    def mlm_threshold(self, cell_threshold: int) -> int:
        m = self.config.mlm_min_visits
        return cell_threshold if m is None else int(m)

    def pretrained(self, seed: int, condition: str, threshold: int) -> Optional[ModelParams]:
        """MLM parameters for FL_MLM / CENTRAL_MLM, trained once and cached."""
        if condition == "NONE":
            return None
        tm = self.mlm_threshold(threshold)
        key = (seed, condition, tm)
        if key in self._mlm:
            return self._mlm[key]
        ctx = self.context(seed)
        shards = ctx.shards(tm)
        fed = self.config.federation(seed, Head.MLM, ctx.hyper)
        stem = f"s{seed}-t{tm}-{condition}"
        if condition == "FL_MLM":
            params, rounds = run_fedavg(shards.train, fed, shards.pooled_val(), ctx.vocab)
            if self.out_dir is not None:
                write_round_log(rounds, self._path("mlm", stem + "-rounds.csv"))
        elif condition == "CENTRAL_MLM":
            params, tlog = run_centralized(shards.pooled_train(), shards.pooled_val(), fed, ctx.vocab,
                                           epochs=self.config.mlm_epochs)
            if self.out_dir is not None:
                tlog.to_csv(self._path("mlm", stem + "-trainlog.csv"))
        else:
            raise ValueError(f"unknown pretraining condition {condition!r}")
        if self.out_dir is not None:
            save_checkpoint(params, self._path("mlm", stem + ".fseq"), ctx.hyper)
        self._mlm[key] = params
        return params

    def run_cell(self, regime: str, pretraining: str, threshold: int, seed: int) -> dict:
        """Train and evaluate one cell; returns its measurement row."""
        rid = run_id(regime, pretraining, threshold, seed)
        ctx = self.context(seed)
        shards = ctx.shards(threshold)
        tests = ctx.test_examples(threshold)
        hyper = ctx.hyper
        fed = self.config.federation(seed, Head.NEXT_VISIT, hyper)
        cell_dir = ("cells", rid)
        info = {"run_id": rid, "regime": regime, "pretraining": pretraining, "min_visits": threshold,
                "seed": seed, "mlm_min_visits": self.mlm_threshold(threshold)}
        if not tests:
            raise ValueError(f"no test patient with >= 2 visits at threshold {threshold}")
        examples = [tests[k] for k in tests]
        if regime == "LOCAL":
            test_sets = {cid: [tests[p.patient_id] for p in pts if p.patient_id in tests]
                         for cid, pts in shards.test.items()}
            mlm_shards = self.context(seed).shards(self.mlm_threshold(threshold))
            res = run_local_baseline(
                shards.train, fed, test_sets, ctx.vocab, self.config.local_mlm_epochs,
                self.config.local_nextvisit_epochs, pretrain=pretraining == LOCAL_MLM,
                val_sets=shards.val, mlm_clients=mlm_shards.train, mlm_val_sets=mlm_shards.val)
            value = res.weighted_ap
            n_examples = sum(len(test_sets[c]) for c in res.ap)
            info.update({"client_ap": res.ap, "client_train_examples": res.num_examples,
                         "skipped": res.skipped})
            if self.out_dir is not None:
                for cid, params in res.params.items():
                    save_checkpoint(params, self._path(*cell_dir, f"{cid}.fseq"), hyper)
                for key, tlog in res.logs.items():
                    tlog.to_csv(self._path(*cell_dir, key.replace(":", "-") + "-trainlog.csv"))
        else:
            init = self.pretrained(seed, pretraining, threshold)
            if regime == "FL":
                params, rounds = run_fedavg(shards.train, fed, shards.pooled_val(), ctx.vocab, init=init)
                if self.out_dir is not None:
                    write_round_log(rounds, self._path(*cell_dir, "rounds.csv"))
            else:
                params, tlog = run_centralized(shards.pooled_train(), shards.pooled_val(), fed, ctx.vocab,
                                               init=init, epochs=self.config.nextvisit_epochs)
                if self.out_dir is not None:
                    tlog.to_csv(self._path(*cell_dir, "trainlog.csv"))
            value = nextvisit_ap(params, examples, hyper)
            n_examples = len(examples)
            if self.out_dir is not None:
                save_checkpoint(params, self._path(*cell_dir, "model.fseq"), hyper)
        row = measurement_row(rid, regime, pretraining, threshold, seed, value, n_examples)
        if self.out_dir is not None:
            info.update({"metric": METRIC, "value": value, "n_examples": n_examples, "averaging": "micro"})
            with open(self._path(*cell_dir, "result.json"), "w") as fh:
                json.dump(info, fh, indent=2, sort_keys=True)
        return row


def measurement_row(rid, regime, pretraining, threshold, seed, value, n_examples, status="ok", error=""):
    return {"run_id": rid, "regime": regime, "pretraining": pretraining, "min_visits": int(threshold),
            "seed": int(seed), "split": "test", "metric_name": METRIC, "value": value,
            "n_examples": n_examples, "status": status, "error": error}


# --- reports -----------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list
    summary: list

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        write_rows(self.rows, out_dir / "metrics.csv", METRIC_COLUMNS)
        write_rows(self.summary, out_dir / "summary.csv", SUMMARY_COLUMNS)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            r["min_visits"] = int(r["min_visits"])
            r["seed"] = int(r["seed"])
            r["value"] = float(r["value"]) if r["value"] not in ("", "nan") else float("nan")
            r["n_examples"] = int(r["n_examples"]) if r["n_examples"] else 0
            rows.append(r)
    return rows


def read_summary(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({"regime": r["regime"], "pretraining": r["pretraining"],
                        "min_visits": int(r["min_visits"]), "metric_name": r["metric_name"],
                        "n": int(r["n"]), "mean": float(r["mean"]),
                        "ci95_low": float(r["ci95_low"]) if r["ci95_low"] else None,
                        "ci95_high": float(r["ci95_high"]) if r["ci95_high"] else None})
    return out


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Mean and normal-approximation 95% CI per (regime, pretraining, min_visits, metric).

    Failed rows are ignored; single-value cells get null CI bounds.
    """
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        key = (r["regime"], r["pretraining"], int(r["min_visits"]), r["metric_name"])
        cells.setdefault(key, []).append(float(r["value"]))
    out = []
    for key in sorted(cells, key=lambda k: (k[0], k[1], k[2], k[3])):
        vals = cells[key]
        n = len(vals)
        mean = math.fsum(vals) / n
        if n > 1:
            sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1))
            half = Z95 * sd / math.sqrt(n)
            lo, hi = mean - half, mean + half
        else:
            lo = hi = None
        out.append({"regime": key[0], "pretraining": key[1], "min_visits": key[2], "metric_name": key[3],
                    "n": n, "mean": mean, "ci95_low": lo, "ci95_high": hi})
    return out


# --- driver ------------------------------------------------------------------

def default_out_root() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def run_experiment(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Run every (cell, threshold, seed); a failing cell yields a failure row and the grid goes on."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "run.json", "w") as fh:
            json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    runner = Runner(config, out_dir)
    rows = []
    for seed in config.seeds:
        for threshold in config.thresholds:
            for regime, pretraining in config.cell_list():
                rid = run_id(regime, pretraining, threshold, seed)
                t0 = time.perf_counter()
                try:
                    rows.append(runner.run_cell(regime, pretraining, threshold, seed))
                    log.info("%s: AP=%.4f (%.1fs)", rid, rows[-1]["value"], time.perf_counter() - t0)
                except (ValueError, FloatingPointError) as exc:
                    log.error("%s failed: %s", rid, exc)
                    rows.append(measurement_row(rid, regime, pretraining, threshold, seed, float("nan"), 0,
                                                status="failed", error=str(exc)))
    report = MetricsReport(rows, summarize(rows))
    if out_dir is not None:
        report.write(out_dir)
    return report


def compare_pretraining(config: ExperimentConfig, out_dir=None) -> MetricsReport:
    """FL next-visit fine-tuning from each configured pretraining condition."""
    if "NONE" not in config.pretraining or len(set(config.pretraining) - {"NONE"}) == 0:
        raise ConfigError("pretraining must include NONE and at least one pretrained condition")
    cfg = replace(config, regimes=["FL"], cells=[["FL", p] for p in config.pretraining])
    return run_experiment(cfg, out_dir)


def replay_cell(run_dir, rid: str) -> dict:
    """Recompute one cell from the run directory's run.json."""
    with open(Path(run_dir) / "run.json") as fh:
        config = ExperimentConfig.from_dict(json.load(fh))
    regime, rest = rid.split("-", 1)
    pretraining, t, s = rest.rsplit("-", 2)
    return Runner(config).run_cell(regime, pretraining, int(t[1:]), int(s[1:]))


# Desk-scale benchmark: 2,000 synthetic patients over 8 centers with strong
# label skew. Four of eight clients train per round, matching the roughly
# four-client rounds of a 39-center, 10% selection.
DESK_BENCHMARK = {
    "data": {"synthetic": {"num_patients": 2000, "num_centers": 8, "heterogeneity_alpha": 0.1}},
    "thresholds": [3, 5],
    "cells": [["FL", "FL_MLM"], ["CENTRALIZED", "CENTRAL_MLM"], ["LOCAL", "LOCAL_MLM"], ["FL", "NONE"]],
    "seeds": [0, 1, 2, 3, 4],
    "hyper": {"hidden": 32, "layers": 1, "heads": 4, "ffn_dim": 64, "max_len": 32,
              "learning_rate": 1e-2, "batch_size": 16},
    "client_fraction": 0.5,
    "mlm_rounds": 60,
    "nextvisit_rounds": 60,
    "mlm_epochs": 20,
    "nextvisit_epochs": 20,
    "local_mlm_epochs": 10,
    "local_nextvisit_epochs": 20,
    "mlm_min_visits": 1,
    "name": "desk-benchmark",
}

PRESETS = {"desk": DESK_BENCHMARK}


def preset_config(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    d.update(overrides)
    return ExperimentConfig.from_dict(d)
