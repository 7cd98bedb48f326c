"""``petbench`` command line.

Verbs::

    simulate  generate a phantom dataset under --out
    train     train every configured model; checkpoints under --out/<run_id>
    evaluate  2D similarity metrics for baselines and trained runs
    suv       lesion SUVmax/SUVpeak agreement for baselines and trained runs
    report    full pipeline (or re-render an existing report.json)
    tune      random search of one model's hyperparameters on validation SSIM

Exit status is 0 only when every requested model completed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from petbench import experiment as E
from petbench import training as T
from petbench.ingest import save_dataset

logger = logging.getLogger("petbench")


def _config(args) -> E.ExperimentConfig:
    if args.config:
        cfg = E.ExperimentConfig.load(args.config)
    else:
        cfg = E.smoke_config()
    if args.seed is not None:
        cfg = E.ExperimentConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    return cfg


def _print_report(report: E.BenchReport) -> int:
    print(report.table())
    failed = [r for r in report.rows if r.kind == "model" and not r.completed]
    for r in failed:
        print(f"FAILED {r.name} (fraction {r.fraction:.3f}): {r.error.splitlines()[0]}", file=sys.stderr)
    return 0 if not failed else 1


def cmd_simulate(args) -> int:
    cfg = _config(args)
    if args.spec:
        ds = E.dataset_from_spec(args.spec, cfg.seed)
    elif cfg.phantoms is None:
        print("simulate needs --spec or a config with a phantoms section", file=sys.stderr)
        return 2
    else:
        ds = cfg.phantoms.build(cfg.seed)
    out = Path(args.out or "data")
    manifest = save_dataset(ds, out)
    print(f"wrote {manifest['n_pairs']} pairs to {out} (splits {manifest['counts']})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not cfg.models:
        print("no models configured", file=sys.stderr)
        return 1
    status = E.train_all(cfg, args.data, args.out or "runs")
    for run_id, err in status.items():
        print(f"{run_id}: {'ok' if err is None else 'FAILED ' + err.splitlines()[0]}")
    return 0 if all(err is None for err in status.values()) else 1


def _evaluate(args, evaluate_2d: bool, suv: bool) -> int:
    cfg = _config(args)
    runs = args.runs or (Path(args.out) / "runs" if args.out else "runs")
    report = E.run_experiment(cfg, args.data, args.out, runs_dir=runs, evaluate_2d=evaluate_2d, suv=suv,
                              run_dirs=args.run, masks=getattr(args, "masks", None))
    return _print_report(report)


def cmd_evaluate(args) -> int:
    return _evaluate(args, True, False)


def cmd_suv(args) -> int:
    return _evaluate(args, False, True)


def cmd_report(args) -> int:
    if args.report:
        report = E.BenchReport.load(args.report)
        if args.out:
            E.write_report(report, args.out)
        return _print_report(report)
    report = E.run_experiment(_config(args), args.data, args.out or "report", runs_dir=args.runs)
    return _print_report(report)


def cmd_tune(args) -> int:
    cfg = _config(args)
    if not cfg.models:
        print("no models configured", file=sys.stderr)
        return 1
    spec = cfg.models[0]
    arch, tcfg, lcfg = spec.resolve(cfg.seed)
    ds = E.load_or_simulate(cfg, args.data)
    if args.space_json:
        space = json.loads(args.space_json)
        space = {k: tuple(v) if isinstance(v, list) and len(v) in (2, 3) and not isinstance(v[0], bool) else v
                 for k, v in space.items()}
    else:
        space = T.SEARCH_SPACES[args.space]
    frac = (cfg.fractions or ds.fractions())[0]
    tcfg = T.TrainConfig.from_dict({**tcfg.to_dict(), "fraction": frac})
    result = T.tune_training(arch, ds, tcfg, lcfg, space, args.budget, seed=cfg.seed)
    text = json.dumps(result.to_dict(), indent=1)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "tune.json").write_text(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petbench", description="PET denoising benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="experiment JSON (default: built-in smoke config)")
        p.add_argument("--data", default=None, help="dataset root (default: simulate phantoms)")
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "generate a phantom dataset")
    p.add_argument("--spec", default=None, help="JSON list of phantom specs (or {phantoms, fractions, splits})")
    add("train", cmd_train, "train configured models")
    for name, func, h in (("evaluate", cmd_evaluate, "2D similarity metrics"),
                          ("suv", cmd_suv, "lesion SUV agreement")):
        p = add(name, func, h)
        p.add_argument("--runs", default=None, help="directory of trained runs (default: OUT/runs)")
        p.add_argument("--run", action="append", default=None,
                       help="evaluate this run directory instead of the configured models (repeatable)")
    p.add_argument("--masks", default=None, help="'auto' to threshold-segment, or a directory of <study>.bin masks")
    p = add("report", cmd_report, "full pipeline and plot data")
    p.add_argument("--runs", default=None, help="reuse trained runs instead of training")
    p.add_argument("--report", default=None, help="re-render an existing report.json")
    p = add("tune", cmd_tune, "hyperparameter search")
    p.add_argument("--space", choices=sorted(T.SEARCH_SPACES), default="identity")
    p.add_argument("--space-json", default=None, help='custom space, e.g. \'{"train.max_lr": [1e-4, 1e-3]}\'')
    p.add_argument("--budget", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (E.ExperimentConfigError, T.TrainConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
