"""Command-line entry point: train, eval, ablate, check, describe."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .checks import ALL_CHECKS, run_checks
from .teammates import load_pools

EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2
EXIT_MISSING_CKPT = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="naht-mat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="INI experiment config")
        sp.add_argument("--seed", type=int, action="append", help="override seed list (repeatable)")
        sp.add_argument("--variant", choices=harness.VARIANTS)
        sp.add_argument("--out", help="output directory (defaults to output_dir from the config)")

    common(sub.add_parser("train", help="train one variant on every seed"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on a teammate pool")
    common(ev)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--pool", choices=("train", "test"), default="test")
    ev.add_argument("--episodes", type=int, default=None, help="episodes per seed (default: eval_episodes x families)")
    ev.add_argument("--pools-file", help="pools.json of the run (default: rebuilt from the config)")
    ev.add_argument("--sample", action="store_true", help="sample actions instead of greedy decoding")
    ab = sub.add_parser("ablate", help="all three variants with shared pools and seeds")
    common(ab)
    ab.add_argument("--parallel", action="store_true", help="run variants in parallel processes (NAHT_MAT_THREADS)")
    ck = sub.add_parser("check", help="run the property suite")
    ck.add_argument("--only", action="append", choices=sorted(ALL_CHECKS))
    ck.add_argument("--quick", action="store_true", help="smaller sample counts")
    ds = sub.add_parser("describe", help="print resolved config and model summary")
    common(ds)
    return p


def _load(args):
    cfg = harness.load_config(args.config)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.variant:
        cfg.variant = args.variant
    return cfg.validate()


def _cmd_train(args, cfg) -> int:
    out = Path(args.out or cfg.output_dir) / cfg.variant
    summary = harness.run_variant(cfg, cfg.variant, out)
    print(json.dumps({"out": str(out), "train": summary["train"]["overall"], "test": summary["test"]["overall"]}, indent=1))
    return 0


def _cmd_eval(args, cfg) -> int:
    try:
        policy, env = harness.load_policy(cfg, args.ckpt, args.variant)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CKPT
    if args.pools_file:
        pools = load_pools(args.pools_file)
    else:
        tr, te = cfg.pools.build()
        pools = {"train": tr, "test": te}
    pool = pools[args.pool]
    n = args.episodes or cfg.eval_episodes * len(pool.family_ids)
    report = harness.evaluate(policy, pool, env, n, cfg.seeds, greedy=not args.sample)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / f"eval_{args.pool}.json").write_text(text)
    print(text)
    return 0


def _cmd_ablate(args, cfg) -> int:
    out = Path(args.out or cfg.output_dir)
    results = harness.ablate(cfg, out, parallel=args.parallel)
    for v, s in results.items():
        print(f"{v:24s} train {s['train']['overall']['mean']:.3f}  test {s['test']['overall']['mean']:.3f}")
    print(f"plot table: {out / 'plot_data.csv'}")
    return 0


def _cmd_describe(args, cfg) -> int:
    env = cfg.env.build()
    policy = harness.make_policy(cfg, env.spec, cfg.variant, cfg.seeds[0])
    print(cfg.to_ini())
    print(f"env: {dataclasses.asdict(env.spec)}")
    print(f"variant: {cfg.variant}  model: {dataclasses.asdict(policy.config)}")
    rows = policy.describe()
    for name, shape, size in rows:
        print(f"  {name:28s} {str(shape):16s} {size}")
    print(f"total parameters: {sum(r[2] for r in rows)}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "check":
        results = run_checks(args.only, quick=args.quick)
        for r in results:
            print(r.line())
        return 0 if all(r.passed for r in results) else EXIT_FAILURE
    try:
        cfg = _load(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    np.seterr(all="ignore")
    handler = {"train": _cmd_train, "eval": _cmd_eval, "ablate": _cmd_ablate, "describe": _cmd_describe}
    return handler[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
