"""Command-line entry point: ``lcnn {train,eval,gradcheck,ablation,synth-bench}``.

Exit codes: 0 success, 1 check failed, 2 bad config or usage, 3 data
error, 4 numeric error, 5 model file version error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import datasets, experiments
from .config import ExperimentConfig, load_config
from .ensemble import ensemble_scores, evaluate, load_ensemble, save_ensemble
from .errors import ConfigError, LatentCnnError
from .metrics import MetricsWriter
from .svm import SELECTION_MODES


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.mode:
        cfg.svm.selection = args.mode
    if args.out:
        cfg.run.out = args.out
    if args.seed is not None:
        cfg.run.seeds = [args.seed]
    return cfg.validate()


def _out_dir(cfg):
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    seed = cfg.run.seeds[0]
    log = MetricsWriter(out / "metrics.jsonl")
    train, test = experiments.load_data(cfg.data, seed)
    model = experiments.train_ensemble(cfg, seed, train, log_fn=lambda r: log(dict(r, seed=seed)))
    save_ensemble(model, out / "model.lme")
    res = evaluate(lambda X: ensemble_scores(model, X).argmax(1), test)
    log({"epoch": cfg.svm.epochs, "split": "test", "error_rate": res.error_rate, "stage": "ensemble",
         "seed": seed})
    print(f"test error {100 * res.error_rate:.2f}%  ({res.n} samples)")
    print(f"model written to {out / 'model.lme'}")
    return 0


def cmd_eval(args):
    if not args.model:
        raise ConfigError("eval needs --model")
    cfg = _config(args)
    model = load_ensemble(args.model)
    train, test = experiments.load_data(cfg.data, cfg.run.seeds[0])
    ds = train if args.split == "train" else test
    res = evaluate(lambda X: ensemble_scores(model, X).argmax(1), ds)
    if args.out:
        MetricsWriter(_out_dir(cfg) / "metrics.jsonl")(
            {"epoch": 0, "split": args.split, "error_rate": res.error_rate, "stage": "eval"})
    print(f"{args.split} error {100 * res.error_rate:.2f}%  ({res.n} samples)")
    print("confusion (rows true, columns predicted):")
    for row in res.confusion:
        print(" ".join(f"{v:5d}" for v in row))
    return 0


def cmd_gradcheck(args):
    rep = experiments.gradient_suite(seeds=args.seeds, fault=args.inject_fault)
    print("\n".join(rep.lines()))
    print(f"{args.seeds} seeds, {rep.seconds:.1f}s: {'PASS' if rep.passed else 'FAIL'}")
    if not rep.passed:
        worst = sorted(rep.failures.items(), key=lambda kv: -kv[1])
        print("worst offenders: " + ", ".join(f"{k} ({e:.2e})" for k, e in worst), file=sys.stderr)
        return 1
    return 0


def cmd_ablation(args):
    cfg = _config(args)
    out = _out_dir(cfg)
    (out / "config.txt").write_text(cfg.to_text())
    log = MetricsWriter(out / "metrics.jsonl")
    results = []
    for seed in cfg.run.seeds:
        r = experiments.run_ablation(cfg, seed, log_fn=lambda rec, s=seed: log(dict(rec, seed=s)))
        for name, e in r["errors"].items():
            log({"epoch": 0, "split": "test", "error_rate": e, "stage": name, "seed": seed})
        print(f"seed {seed}: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in r["errors"].items())
              + f"  [{r['seconds']:.0f}s]", flush=True)
        results.append(r)
    text, csv_text = experiments.ablation_table(results, cfg.data.source)
    (out / "ablation.csv").write_text(csv_text)
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_synth_bench(args):
    spec = datasets.SyntheticSpec() if args.seed is None else datasets.SyntheticSpec(seed=args.seed)
    res = experiments.synth_benchmark(spec)
    print(f"latent SVM accuracy      {100 * res['latent_acc']:.1f}%  (C, lr) = {tuple(res['latent_hp'])}")
    print(f"whole-image SVM accuracy {100 * res['whole_acc']:.1f}%  (C, lr) = {tuple(res['whole_hp'])}")
    print(f"gap {100 * res['gap']:.1f} points, {res['seconds']:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "synth_bench.json").write_text(json.dumps(res, indent=2))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablation": cmd_ablation, "synth-bench": cmd_synth_bench}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser():
    p = _Parser(prog="lcnn", description="Latent SVM / latent CNN experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat section.key = value config file")
    p.add_argument("--seed", type=int, help="overrides run.seeds with a single seed")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--mode", choices=SELECTION_MODES, help="latent selection rule")
    p.add_argument("--model", help="ensemble model file for eval")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--seeds", type=int, default=10, help="gradcheck seeds")
    p.add_argument("--inject-fault", choices=("conv-sign",), help=argparse.SUPPRESS)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except LatentCnnError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error (DataError): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
