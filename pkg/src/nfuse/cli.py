"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from nfuse.checks import SCOPES, run_gradcheck
from nfuse.config import ConfigError
from nfuse.harness.model import FUSERS
from nfuse.harness.train import TrainingAborted
from nfuse.invariants import run_invariants

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
FUSER_ALIASES = {"no_ce": "tfusion_no_ce", "no_ma": "tfusion_no_ma"}


def cmd_gradcheck(args) -> int:
    scopes = list(SCOPES) if args.scope == "all" else [args.scope]
    t0 = time.perf_counter()
    results = run_gradcheck(scopes, seed=args.seed or 0, precision_name=args.precision or "f64")
    families = []
    for r in results:
        key = (r.scope, r.name)
        if key not in families:
            families.append(key)
    failed = []
    for scope, name in families:
        group = [r for r in results if (r.scope, r.name) == (scope, name)]
        worst = max(group, key=lambda r: r.error)
        ok = all(r.passed for r in group)
        print(f"{'PASS' if ok else 'FAIL'} {scope:<10} {name:<20} max_rel_err={worst.error:.3e} "
              f"tol={worst.tol:.0e} groups={len(group)}")
        for r in group:
            if not r.passed:
                failed.append(r)
                print(f"     offending: {scope}/{name} parameter {r.group} rel_err={r.error:.3e}")
            elif len(group) > 1:
                print(f"     {r.group:<40} rel_err={r.error:.3e}")
    print(f"checked {len(families)} families in {time.perf_counter() - t0:.1f}s: "
          f"{'all within tolerance' if not failed else f'{len(failed)} failures'}")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_invariants(args) -> int:
    results = run_invariants(trials=args.trials, seed=args.seed or 0, precision_name=args.precision or "f32")
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name:<26} trials={r.trials} worst={r.worst:.3e}"
        if not r.passed:
            line += f" failures={r.failures} repro={json.dumps(r.repro)}"
        print(line)
        for note in r.notes[:3]:
            print(f"     {note}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def _overrides(args) -> dict:
    return {"seed": args.seed, "out": args.out, "precision": args.precision,
            "fuser": _fuser_name(args.fuser) if args.fuser else None}


def _fuser_name(name: str) -> str:
    name = FUSER_ALIASES.get(name, name)
    if name not in FUSERS:
        raise ConfigError("fuser", f"unknown fuser {name!r}; expected one of {list(FUSERS)}")
    return name


def cmd_train(args) -> int:
    from nfuse.experiment import artifact_config, config_from_args, run_train

    cfg = config_from_args(args.config, _overrides(args))
    print(json.dumps(dict(artifact_config(cfg), out=cfg.out), sort_keys=True))
    metrics = run_train(cfg)
    print(f"mean accuracy {metrics.mean_accuracy:.4f} over {len(metrics.accuracy)} subsets -> {cfg.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from nfuse.experiment import config_from_args, run_evaluate

    if args.checkpoint:
        checkpoint = Path(args.checkpoint)
    else:
        checkpoint = Path(config_from_args(args.config, _overrides(args)).out) / "checkpoint.tfm"
    if not checkpoint.exists():
        raise ConfigError("checkpoint", f"{checkpoint} does not exist")
    metrics = run_evaluate(checkpoint, args.out)
    for subset, acc in metrics.accuracy.items():
        print(f"{'+'.join(map(str, subset)):<10} {acc:.4f}")
    print(f"{'Average':<10} {metrics.mean_accuracy:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from nfuse.experiment import config_from_args, run_compare

    fusers = [_fuser_name(f.strip()) for f in args.fusers.split(",") if f.strip()]
    if len(fusers) < 2:
        raise ConfigError("fusers", "a comparison needs at least two fusers")
    cfg = config_from_args(args.config, _overrides(args))
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    else:
        seeds = list(range(cfg.seed, cfg.seed + args.num_seeds))
    report = run_compare(cfg, fusers, seeds)
    for fuser, per_seed in report["mean_accuracy"].items():
        values = " ".join(f"{v:.4f}" for v in per_seed.values())
        print(f"{fuser:<15} {values}")
    for pair in report["pairs"]:
        p = pair["p_value_subsets"]
        print(f"{pair['a']} - {pair['b']}: mean {pair['mean_a_minus_b']:+.4f}, "
              f"Wilcoxon p={'n/a' if p is None else f'{p:.4g}'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="top-level seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--fuser", help=f"one of {', '.join(FUSERS)}")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="nfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--scope", choices=[*SCOPES, "all"], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("invariants", parents=[common], help="randomised fusion invariants")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_invariants)

    p = sub.add_parser("train", parents=[common], help="train one fuser and evaluate all subsets")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on all subsets")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.tfm)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[common], help="train several fusers and compare per subset")
    p.add_argument("--fusers", required=True, help="comma-separated fuser names")
    p.add_argument("--seeds", help="comma-separated seeds (overrides --num-seeds)")
    p.add_argument("--num-seeds", type=int, default=1)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
