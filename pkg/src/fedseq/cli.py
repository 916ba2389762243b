"""Command line entry point: ``fedseq <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .centers import partition_cohort, read_transfers_csv, write_partition_summary
from .checkpoint import CheckpointError, load_checkpoint, load_hyper, read_manifest, save_checkpoint
from .data import IngestError, Vocabulary, load_cohort
from .experiment import (SUMMARY_COLUMNS, ConfigError, ExperimentConfig, SeedContext, compare_pretraining,
                         default_out_root, preset_config, read_metrics, read_summary, replay_cell,
                         run_experiment, summarize, write_rows)
from .federation import run_centralized, run_fedavg, write_round_log
from .model import Head
from .synth import SynthConfig, heterogeneity_report, write_synth
from .tasks import nextvisit_ap

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def _data_paths(args) -> dict:
    d = Path(args.data_dir)
    return {"visits": str(d / "visits.csv"), "groups": str(d / "groups.csv"),
            "transfers": str(d / "transfers.csv")}


def _read_json(path) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else default_out_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = _read_json(args.config)
    for key in ("num_patients", "num_centers", "num_groups", "heterogeneity_alpha", "seed"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    try:
        synth = SynthConfig(**cfg)
        synth.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    paths = write_synth(synth, args.out)
    with open(Path(args.out) / "synth.json", "w") as fh:
        json.dump(synth.to_dict(), fh, indent=2)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_partition(args) -> int:
    paths = _data_paths(args)
    cohort = load_cohort(paths["visits"], paths["groups"])
    result = partition_cohort(cohort, read_transfers_csv(paths["transfers"]))
    out = Path(args.out) if args.out else Path(args.data_dir) / "partition.json"
    write_partition_summary(result, out)
    print(json.dumps(result.summary(), indent=2, sort_keys=True))
    if result.missing:
        print(f"excluded {len(result.missing)} patient(s) without transfers", file=sys.stderr)
    if args.heterogeneity and len(result.clients) >= 2:
        print(f"mean pairwise TV distance: {heterogeneity_report(result.clients)['mean_tv']:.4f}")
    return EXIT_OK


def _train_config(args, task: Head) -> ExperimentConfig:
    d = {"data": _data_paths(args), "seeds": [args.seed], "thresholds": [args.min_visits],
         "hyper": _read_json(args.hyper), "client_fraction": args.client_fraction,
         "local_epochs": args.local_epochs}
    if task is Head.MLM:
        d.update(mlm_rounds=args.rounds, mlm_epochs=args.epochs)
    else:
        d.update(nextvisit_rounds=args.rounds, nextvisit_epochs=args.epochs)
    return ExperimentConfig.from_dict(d)


def _train(args, task: Head) -> int:
    config = _train_config(args, task)
    ctx = SeedContext(config, args.seed, load_cohort(config.data["visits"], config.data["groups"]),
                      read_transfers_csv(config.data["transfers"]))
    shards = ctx.shards(args.min_visits)
    fed = config.federation(args.seed, task, ctx.hyper)
    init = None
    if getattr(args, "init", None):
        init = load_checkpoint(args.init, ctx.hyper)
    out = _out_dir(args, f"train-{task.value.lower()}-s{args.seed}")
    if args.regime == "fl":
        params, rounds = run_fedavg(shards.train, fed, shards.pooled_val(), ctx.vocab, init=init)
        write_round_log(rounds, out / "rounds.csv")
    else:
        params, tlog = run_centralized(shards.pooled_train(), shards.pooled_val(), fed, ctx.vocab, init=init,
                                       epochs=args.epochs)
        tlog.to_csv(out / "trainlog.csv")
    save_checkpoint(params, out / "model.fseq", ctx.hyper, extra={"vocab": ctx.vocab.to_dict()})
    print(out / "model.fseq")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = read_manifest(args.checkpoint)
    hyper = load_hyper(args.checkpoint)
    params = load_checkpoint(args.checkpoint, hyper)
    config = ExperimentConfig.from_dict({"data": _data_paths(args), "seeds": [args.seed],
                                         "thresholds": [args.min_visits], "hyper": hyper.to_dict()})
    ctx = SeedContext(config, args.seed, load_cohort(config.data["visits"], config.data["groups"]),
                      read_transfers_csv(config.data["transfers"]))
    stored = manifest.get("extra", {}).get("vocab")
    if stored is not None and Vocabulary.from_dict(stored) != ctx.vocab:
        raise ConfigError("checkpoint vocabulary differs from the vocabulary of this dataset")
    examples = list(ctx.test_examples(args.min_visits).values())
    result = {"metric": "average_precision", "averaging": "micro",
              "value": nextvisit_ap(params, examples, ctx.hyper), "n_examples": len(examples)}
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.replay:
        if not args.run_dir:
            raise ConfigError("--replay needs --run-dir")
        row = replay_cell(args.run_dir, args.replay)
        stored = [r for r in read_metrics(Path(args.run_dir) / "metrics.csv") if r["run_id"] == args.replay]
        print(json.dumps(row, indent=2, default=str))
        if stored and stored[0]["value"] != row["value"]:
            print("replayed value differs from stored metrics.csv", file=sys.stderr)
            return EXIT_PARTIAL
        return EXIT_OK
    if args.preset:
        config = preset_config(args.preset)
        if args.seeds:
            config = preset_config(args.preset, seeds=args.seeds)
    elif args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        raise ConfigError("give --config or --preset")
    out = _out_dir(args, config.name)
    runner = compare_pretraining if args.ablation else run_experiment
    report = runner(config, out)
    _print_summary(report.summary)
    print(f"run directory: {out}")
    return EXIT_PARTIAL if report.failed else EXIT_OK


def _print_summary(summary) -> None:
    print(f"{'regime':<12} {'pretraining':<12} {'t':>3} {'n':>2} {'mean':>8} {'ci95':>19}")
    for r in summary:
        ci = "" if r["ci95_low"] is None else f"[{r['ci95_low']:.4f}, {r['ci95_high']:.4f}]"
        print(f"{r['regime']:<12} {r['pretraining']:<12} {r['min_visits']:>3} {r['n']:>2} {r['mean']:>8.4f} {ci:>19}")


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    summary = summarize(rows)
    stored_path = run_dir / "summary.csv"
    if stored_path.exists() and read_summary(stored_path) != summary:
        print("warning: stored summary.csv differs from recomputed summary; rewriting", file=sys.stderr)
    write_rows(summary, stored_path, SUMMARY_COLUMNS)
    _print_summary(summary)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"FAILED {r['run_id']}: {r['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def _add_data(p) -> None:
    p.add_argument("--data-dir", required=True, help="directory holding visits.csv, groups.csv, transfers.csv")


def _add_training(p, default_epochs: int) -> None:
    _add_data(p)
    p.add_argument("--regime", choices=("central", "fl"), default="central")
    p.add_argument("--hyper", help="JSON file with HyperParams overrides")
    p.add_argument("--epochs", type=int, default=default_epochs, help="centralized epochs")
    p.add_argument("--rounds", type=int, default=40, help="FedAvg rounds")
    p.add_argument("--client-fraction", type=float, default=0.1)
    p.add_argument("--local-epochs", type=int, default=1)
    p.add_argument("--min-visits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedseq", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort as CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with SynthConfig fields")
    p.add_argument("--num-patients", type=int)
    p.add_argument("--num-centers", type=int)
    p.add_argument("--num-groups", type=int)
    p.add_argument("--heterogeneity-alpha", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="assign patients to centers by longest stay")
    _add_data(p)
    p.add_argument("--out", help="summary JSON path (default DATA_DIR/partition.json)")
    p.add_argument("--heterogeneity", action="store_true", help="also print mean pairwise TV distance")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train-mlm", help="masked-language-model pretraining")
    _add_training(p, 10)
    p.set_defaults(func=lambda a: _train(a, Head.MLM))

    p = sub.add_parser("train-next", help="next-visit fine-tuning")
    _add_training(p, 10)
    p.add_argument("--init", help="pretrained checkpoint")
    p.set_defaults(func=lambda a: _train(a, Head.NEXT_VISIT))

    p = sub.add_parser("eval", help="test-set average precision of a next-visit checkpoint")
    _add_data(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--min-visits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0, help="seed of the train/test split")
    p.add_argument("--out", help="write the JSON result here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run the regime x pretraining x threshold grid")
    p.add_argument("--config", help="ExperimentConfig JSON")
    p.add_argument("--preset", help="built-in configuration, e.g. 'desk'")
    p.add_argument("--seeds", type=int, nargs="+", help="override the preset's seeds")
    p.add_argument("--ablation", action="store_true", help="FL fine-tuning per pretraining condition only")
    p.add_argument("--out", help="run directory (default $FEDSEQ_RUN_DIR/<name>)")
    p.add_argument("--replay", metavar="RUN_ID", help="recompute one cell of --run-dir")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="recompute summary.csv from metrics.csv")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
