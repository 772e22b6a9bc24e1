"""Command-line entry point.

    rosfl run --config exp.toml [--method rosfl] [--transport tcp]
              [--seed 3] [--out runs/exp1]
    rosfl validate-config --config exp.toml
    rosfl sweep-mu --config exp.toml --mus 1e-6,1e-4,1,100 --seeds 0,1,2
    rosfl sweep-re --config exp.toml --pairs 10x1,5x2 --seeds 0

The output root is --out, else $ROSFL_OUT_ROOT, else ./runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import parse_config, with_overrides
from .errors import RosflError
from .runners import run, validate_run_dir
from .sweeps import run_mu_sweep, run_round_epoch_tradeoff

OUT_ROOT_ENV = "ROSFL_OUT_ROOT"


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _load_config(args):
    cfg = parse_config(args.config)
    overrides = {}
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "transport", None):
        overrides["transport"] = args.transport
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = with_overrides(cfg, **overrides)
    return cfg


def _parse_floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for chunk in text.split(","):
        if not chunk:
            continue
        r, _, e = chunk.partition("x")
        pairs.append((int(r), int(e)))
    return pairs


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out_dir = _out_root(args) / f"{cfg.method}_{cfg.task}_seed{cfg.seed}_{int(time.time())}"
    result = run(cfg, out_dir)
    validate_run_dir(result.out_dir)
    print(json.dumps(result.summary, indent=2, sort_keys=True))
    print(f"run dir: {result.out_dir}")
    return 0


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    print(f"ok: {cfg.method} / {cfg.task}, N={cfg.topology.clients}, "
          f"R={cfg.topology.rounds}, E={cfg.topology.local_epochs}")
    return 0


def cmd_sweep_mu(args) -> int:
    cfg = _load_config(args)
    rows, summary = run_mu_sweep(cfg, _parse_floats(args.mus), _parse_ints(args.seeds),
                                 _out_root(args) / "sweep_mu")
    for line in summary:
        print(f"mu={line['mu']:g}  mean={line['mean_metric']:.4f}  "
              f"ok={line['n_ok']}/{line['n_total']}")
    return 0 if all(row["status"] == "ok" for row in rows) else 1


def cmd_sweep_re(args) -> int:
    cfg = _load_config(args)
    rows, summary = run_round_epoch_tradeoff(cfg, _parse_pairs(args.pairs),
                                             _parse_ints(args.seeds),
                                             _out_root(args) / "sweep_re")
    for line in summary:
        print(f"R/E={line['re']}  mean={line['mean_metric']:.4f}  "
              f"ok={line['n_ok']}/{line['n_total']}")
    return 0 if all(row["status"] == "ok" for row in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rosfl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--method", choices=("rosfl", "fedavg", "sl", "central"))
    p_run.add_argument("--transport", choices=("inproc", "tcp"))
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate-config", help="parse and validate a config file")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(fn=cmd_validate)

    p_mu = sub.add_parser("sweep-mu", help="correction-strength ablation")
    p_mu.add_argument("--config", required=True)
    p_mu.add_argument("--mus", required=True, help="comma-separated values")
    p_mu.add_argument("--seeds", default="0")
    p_mu.add_argument("--out")
    p_mu.set_defaults(fn=cmd_sweep_mu)

    p_re = sub.add_parser("sweep-re", help="rounds/epochs trade-off at fixed budget")
    p_re.add_argument("--config", required=True)
    p_re.add_argument("--pairs", required=True, help="comma-separated RxE, e.g. 10x1,5x2")
    p_re.add_argument("--seeds", default="0")
    p_re.add_argument("--out")
    p_re.set_defaults(fn=cmd_sweep_re)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except RosflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
