"""Command-line entry point: ``esce run | compare | chart | oracle``.

Settings are resolved in this order, later wins: built-in defaults, the
``--config`` INI file, the ESCE_OUTPUT_DIR / ESCE_SEED environment
variables, then per-field flags such as ``--mode semi`` or
``--env.chain_length 30``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import nn
from .agent import PolicyNet
from .config import SECTIONS, ConfigError, ExperimentConfig, apply_override, env_overrides, load_config
from .envs import make_env, success_probabilities
from .extractor import EsceClassifier
from .harness import METRIC_FIELDS, ExitStatus, compare, emit_chart, oracle_agreement, policy_fn, read_run, run


def _field_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("settings (override the config file)")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in SECTIONS:
            continue
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"set:{f.name}", metavar="VALUE",
                           default=argparse.SUPPRESS)
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            group.add_argument(f"--{section}.{f.name}", dest=f"set:{section}.{f.name}", metavar="VALUE",
                               default=argparse.SUPPRESS)


def resolve_config(args, environ=os.environ) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    env_overrides(cfg, environ)
    for key, raw in vars(args).items():
        if key.startswith("set:"):
            apply_override(cfg, key[4:], raw)
    return cfg.validate()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the alternating collect / extract loop for every seed")
    p.add_argument("--config", help="INI file with [experiment], [env], [esce] and [agent] sections")
    _field_flags(p)

    p = sub.add_parser("compare", help="align several runs by outer iteration")
    p.add_argument("runs", nargs="+", help="run directories (each holding config.ini and seed_*/)")
    p.add_argument("--metric", default="window_mean_return", choices=METRIC_FIELDS)
    p.add_argument("--table", default="comparison.tsv", help="tab-separated output table")
    p.add_argument("--chart", default="comparison.svg", help="overlaid SVG chart ('' to skip)")

    p = sub.add_parser("chart", help="chart logged metrics of one run")
    p.add_argument("run", help="run directory")
    p.add_argument("--metric", action="append", help=f"repeatable; one of {', '.join(METRIC_FIELDS)}")
    p.add_argument("--out", help="SVG path (default: <run>/<metric>.svg)")

    p = sub.add_parser("oracle", help="dump the exact sufficient-state set for a config and checkpoint")
    p.add_argument("--config", help="INI file; defaults to <checkpoint dir>/../config.ini when present")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json written by 'run'")
    p.add_argument("--eps", type=float, default=1e-6, help="tolerance on the success probability")
    p.add_argument("--greedy", action="store_true", help="score the argmax policy instead of the stochastic one")
    p.add_argument("--out", help="JSON-lines output (default: stdout)")
    _field_flags(p)
    return parser


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    result = run(cfg)
    if result.status == ExitStatus.CONFIG_ERROR:
        print(f"configuration error: {result.message}", file=sys.stderr)
    else:
        for s in result.seeds:
            last = s.history[-1]["window_mean_return"] if s.history else None
            print(f"seed {s.seed}: {s.status.name.lower()}, {len(s.history)} iterations, final window mean {last}")
        print(f"artefacts in {result.directory}")
    return int(result.status)


def cmd_compare(args) -> int:
    compare(args.runs, args.table, metric=args.metric, chart_path=args.chart or None)
    print(f"table written to {args.table}" + (f", chart to {args.chart}" if args.chart else ""))
    return int(ExitStatus.SUCCESS)


def cmd_chart(args) -> int:
    metrics = args.metric or ["window_mean_return"]
    out = args.out or str(Path(args.run) / f"{'_'.join(metrics)}.svg")
    emit_chart(read_run(args.run), metrics if len(metrics) > 1 else metrics[0], out)
    print(out)
    return int(ExitStatus.SUCCESS)


def cmd_oracle(args) -> int:
    ck = Path(args.checkpoint)
    if not args.config and (ck.parent.parent / "config.ini").exists():
        args.config = str(ck.parent.parent / "config.ini")
    cfg = resolve_config(args)
    nets, meta = nn.load_checkpoint(ck)
    policy = PolicyNet.from_nets(nets["trunk"], nets["policy_head"], nets["value_head"])
    env = make_env(dataclasses.replace(cfg.env, hindsight=False))
    if policy.obs_dim != env.obs_dim:
        raise ConfigError(f"checkpoint expects {policy.obs_dim} inputs but the environment emits {env.obs_dim}")
    fn = policy_fn(policy, greedy=args.greedy)
    value = success_probabilities(env, fn)
    esce = None
    if "esce" in nets:
        esce = EsceClassifier(threshold=meta.get("threshold", cfg.esce.threshold))
        esce.load_network(nets["esce"], meta.get("esce_updates", 1))
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        for (core, t), p in value.items():
            if p < 1.0 - args.eps:
                continue
            rec = {"state": core, "t": t, "success_probability": p}
            if esce is not None:
                rec["flagged"] = bool(esce.is_sufficient(env.observe(core, t)))
            fh.write(json.dumps(rec, default=_jsonable) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    if esce is not None:
        agree = oracle_agreement(esce, cfg.env, fn, eps=args.eps)
        print(json.dumps({k: agree[k] for k in ("precision", "recall", "n_flagged", "n_sufficient")}),
              file=sys.stderr)
    return int(ExitStatus.SUCCESS)


def _jsonable(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "chart": cmd_chart, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return int(ExitStatus.CONFIG_ERROR)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return int(ExitStatus.CONFIG_ERROR)


if __name__ == "__main__":
    sys.exit(main())
