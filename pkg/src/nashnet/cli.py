"""Command-line entry point: ``nashnet {gen,sample,train,run,sweep,verify,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import exact_eval as ee
from .batch import load_dataset, sample_batch, save_dataset
from .experiment import (ExperimentConfig, MetricsRow, plot_curves, run_experiment, summarize,
                         sweep_samples, verify, write_csv)
from .game import GarnetSpec, TurnBasedGarnet, generate_garnet
from .learner import TrainConfig, load_model, train

log = logging.getLogger("nashnet")

_OWN_FIELDS = ("n_garnets", "n_resamples", "alpha", "test_alpha", "workers")


def _flag_type(default):
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes", "on")
    if isinstance(default, (int, float, str)):
        return type(default)
    return json.loads  # lists / None-able fields take JSON


def _add_config_flags(parser: argparse.ArgumentParser, groups=("game", "train", "experiment")) -> None:
    """One ``--flag`` per config field; unset flags leave the config untouched."""
    parser.add_argument("--config", type=Path, help="JSON config document (flat keys)")
    sources = {"game": GarnetSpec(), "train": TrainConfig(), "experiment": ExperimentConfig()}
    for group in groups:
        obj = sources[group]
        names = _OWN_FIELDS if group == "experiment" else [f.name for f in fields(obj) if f.name != "seed"]
        g = parser.add_argument_group(f"{group} options")
        for name in names:
            default = getattr(obj, name)
            g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_flag_type(default),
                           default=None, help=f"default {default!r}")


def _config_dict(args, extra_defaults: dict | None = None) -> dict:
    d = dict(extra_defaults or {})
    if getattr(args, "config", None):
        d.update(json.loads(args.config.read_text()))
    known = ({f.name for f in fields(GarnetSpec)} | {f.name for f in fields(TrainConfig)}
             | set(_OWN_FIELDS)) - {"seed"}
    d.update({k: v for k, v in vars(args).items() if k in known and v is not None})
    d["seed"] = args.seed
    d["out_dir"] = str(args.out_dir)
    return d


def _train_config(args) -> TrainConfig:
    d = _config_dict(args)
    keys = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in keys})


def cmd_gen(args) -> int:
    d = _config_dict(args)
    spec = GarnetSpec(**{k: v for k, v in d.items() if k in {f.name for f in fields(GarnetSpec)}})
    game = generate_garnet(spec)
    out = args.out or Path(args.out_dir) / "game.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    game.save(out)
    print(f"{out} fingerprint={game.fingerprint()}")
    return 0


def cmd_sample(args) -> int:
    game = TurnBasedGarnet.load(args.game)
    k = args.k if args.k is not None else max(1, round(args.alpha * game.n_states * game.n_actions))
    ds = sample_batch(game, k, args.seed, args.split)
    out = args.out or Path(args.out_dir) / f"{args.split}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"{out} samples={len(ds)}")
    return 0


def cmd_train(args) -> int:
    game = TurnBasedGarnet.load(args.game)
    tr = load_dataset(args.train)
    te = load_dataset(args.test) if args.test else None
    cfg = _train_config(args)
    model, report = train(game, tr, te, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [MetricsRow.make(0, 0, cp.epoch, cp.step, cp.train_residual, cp.test_residual, cp.errors)
            for cp in report.checkpoints]
    write_csv(out / "metrics.csv", [r.to_record() for r in rows])
    write_csv(out / "summary.csv", [summarize(rows)])
    plot_curves(rows, out / "curves.svg", f"{game.n_players} player(s)")
    model.save(out / "model.npz")
    (out / "strategy.json").write_text(json.dumps({"fingerprint": game.fingerprint(),
                                                    "pi": model.extract_strategy(game).tolist()}) + "\n")
    final = report.final
    print(f"epoch {final.epoch}: train residual {final.train_residual:.4g}, "
          f"mean error {final.mean_error:.4f}")
    return 0


def _print_summary(summary: dict) -> None:
    print(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_dict(_config_dict(args))
    result = run_experiment(cfg)
    _print_summary(result.summary())
    for run in result.failed:
        print(f"FAILED garnet={run.garnet} resample={run.resample}: {run.error}", file=sys.stderr)
    return 1 if result.failed else 0


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_dict(_config_dict(args, {"n_garnets": 3, "n_resamples": 3}))
    records, results = sweep_samples(cfg, args.alphas)
    for rec in records:
        _print_summary(rec)
    return 1 if any(r.failed for r in results) else 0


def cmd_verify(args) -> int:
    report = verify(args.seed, quick=args.quick, corrupt=args.corrupt)
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"{status} {check.name}: {check.n_cases - len(check.failures)}/{check.n_cases} "
              f"({check.seconds:.2f}s)")
    out = Path(args.out_dir)
    failures = {c.name: c.failures for c in report.checks if c.failures}
    if failures:
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify_failures.json").write_text(json.dumps(failures, indent=1) + "\n")
        print(f"instance dumps in {out / 'verify_failures.json'}", file=sys.stderr)
    return 0 if report.passed else 1


def cmd_eval(args) -> int:
    game = TurnBasedGarnet.load(args.game)
    if args.strategy.suffix == ".npz":
        pi = load_model(args.strategy).extract_strategy(game)
    else:
        doc = json.loads(args.strategy.read_text())
        if doc.get("fingerprint", game.fingerprint()) != game.fingerprint():
            print("strategy was computed for a different game", file=sys.stderr)
            return 1
        pi = np.asarray(doc["pi"], dtype=np.float64)
    errors = ee.error_vs_best_response(game, pi)
    print(json.dumps({"errors": errors.tolist(), "mean_error": float(np.mean(errors)),
                      "std_error": float(np.std(errors))}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nashnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", type=Path, default=Path("results"))
        p.set_defaults(func=func)
        return p

    p = add("gen", cmd_gen, "generate a Garnet and write it as JSON")
    _add_config_flags(p, ("game",))
    p.add_argument("--out", type=Path)

    p = add("sample", cmd_sample, "sample a batch dataset from a saved game")
    p.add_argument("--game", type=Path, required=True)
    size = p.add_mutually_exclusive_group()
    size.add_argument("--k", type=int)
    size.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--out", type=Path)

    p = add("train", cmd_train, "train on saved datasets")
    p.add_argument("--game", type=Path, required=True)
    p.add_argument("--train", type=Path, required=True)
    p.add_argument("--test", type=Path)
    _add_config_flags(p, ("train",))

    p = add("run", cmd_run, "full experiment over Garnets and resamples")
    _add_config_flags(p)

    p = add("sweep", cmd_sweep, "sample-size sweep")
    _add_config_flags(p)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 2.0, 5.0])

    p = add("verify", cmd_verify, "oracle self-checks")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--corrupt", choices=("gamma-sign",), help="deliberately break the operators")

    p = add("eval", cmd_eval, "score a saved strategy against a saved game")
    p.add_argument("--game", type=Path, required=True)
    p.add_argument("--strategy", type=Path, required=True, help="strategy.json or model.npz")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
