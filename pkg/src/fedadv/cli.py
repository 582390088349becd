"""Command-line entry point: ``fedadv {train,sweep-mu,matrix,gen-data,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import generate, load_csv, write_csv
from .errors import ConfigError, DataError, DivergedError
from .fed import evaluate
from .harness import (
    DEFAULT_MUS,
    MATRIX_METHODS,
    ExperimentConfig,
    baseline_matrix,
    model_spec,
    mu_sweep,
    run_suite,
    write_json,
)
from .nn import ParamSet
from .objective import AlgoConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def parse_seeds(text: str) -> list[int]:
    """``"0-9"``, ``"1,4,7"`` or a mix of both."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else (part, part)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; missing keys take defaults")
    p.add_argument("--out", default="runs/latest", help="output directory")
    p.add_argument("--seeds", type=parse_seeds, default=[0], help="e.g. 0-9 or 0,3,5")
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-epochs", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--data", help="training CSV (id,site,y,f1..fd[,split])")
    p.add_argument("--ood-data", help="OOD CSV, if not flagged inside --data")
    p.add_argument("--workers", type=int, default=1, help="parallel seed processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedadv", description="Federated domain-adversarial training simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one algorithm over several seeds")
    _common(t)
    t.add_argument("--algo", choices=["erm", "dann", "fedavg", "fedprox", "naive_feddann", "feddapl"])
    t.add_argument("--mu", type=float)
    t.add_argument("--optimizer", choices=["adam", "sgd"])

    s = sub.add_parser("sweep-mu", help="proximal-weight sweep (table3.csv)")
    _common(s)
    s.add_argument("--mus", default=",".join(str(int(m)) for m in DEFAULT_MUS))
    s.add_argument("--algo", choices=["feddapl", "fedprox"], action="append", help="rows; repeatable")
    s.add_argument("--optimizer", choices=["adam", "sgd"], action="append", help="optimizers; repeatable")

    m = sub.add_parser("matrix", help="baseline comparison (table2.csv)")
    _common(m)

    g = sub.add_parser("gen-data", help="write a synthetic split as CSV")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data/synthetic.csv")

    e = sub.add_parser("eval", help="OOD MAE of a saved parameter set")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0, help="seed of the synthetic split to evaluate on")
    e.add_argument("--data")
    e.add_argument("--ood-data")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    fed = cfg.fed
    for flag, key in (("rounds", "rounds"), ("local_epochs", "local_epochs"), ("clients", "clients")):
        value = getattr(args, flag, None)
        if value is not None:
            fed = replace(fed, **{key: value})
    cfg = replace(cfg, fed=fed)
    if getattr(args, "data", None):
        cfg = replace(cfg, csv_path=args.data, ood_csv_path=getattr(args, "ood_data", None))
    if getattr(args, "command", None) == "train":
        a = cfg.algo
        algorithm = args.algo or a.algorithm
        mu = args.mu if args.mu is not None else (a.mu if algorithm in ("feddapl", "fedprox") else 0.0)
        cfg = replace(cfg, algo=AlgoConfig(algorithm, mu=mu, optimizer=args.optimizer or a.optimizer))
    return cfg


def _cmd_train(args, cfg: ExperimentConfig) -> int:
    report = run_suite(cfg, args.seeds, out_dir=args.out, workers=args.workers)
    print(f"{report.label}: OOD MAE {report.mae_mean:.3f} +/- {report.mae_std:.3f} over {len(report.per_seed)} seed(s)")
    return EXIT_DIVERGED if report.diverged else EXIT_OK


def _cmd_sweep(args, cfg: ExperimentConfig) -> int:
    mus = [float(m) for m in args.mus.split(",") if m.strip()]
    algos = args.algo or ["feddapl"]
    opts = args.optimizer or ["adam"]
    rows = [(a, o) for a in algos for o in opts]
    table, reports = mu_sweep(cfg, mus, args.seeds, rows=rows, out_dir=args.out, workers=args.workers)
    print((Path(args.out) / "table3.csv").read_text(), end="")
    return EXIT_DIVERGED if any(r.diverged for r in reports) else EXIT_OK


def _cmd_matrix(args, cfg: ExperimentConfig) -> int:
    rows, reports = baseline_matrix(cfg, args.seeds, MATRIX_METHODS, out_dir=args.out, workers=args.workers)
    print((Path(args.out) / "table2.csv").read_text(), end="")
    return EXIT_DIVERGED if any(r.diverged for r in reports) else EXIT_OK


def _cmd_gen(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    split = generate(cfg.data, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(split, out)
    write_json(out.with_suffix(".gen.json"), {"seed": args.seed, "data": cfg.data.to_dict()})
    print(f"wrote {split.n_train()} training rows and {len(split.ood)} OOD rows to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    params = ParamSet.from_json(Path(args.checkpoint).read_text(), requires_grad=False)
    data = load_csv(args.data, args.ood_data) if args.data else generate(cfg.data, args.seed)
    spec = model_spec(cfg, data)
    print(f"OOD MAE {evaluate(params, data.ood, spec):.4f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            return _cmd_gen(args)
        if args.command == "eval":
            return _cmd_eval(args)
        cfg = resolve_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return {"train": _cmd_train, "sweep-mu": _cmd_sweep, "matrix": _cmd_matrix}[args.command](args, cfg)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
