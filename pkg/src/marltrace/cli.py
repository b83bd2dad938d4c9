"""Operator commands.

``marltrace`` exposes five subcommands: ``train``, ``eval``,
``oracle-verify``, ``ablate`` and ``bench-scaling``.  Runs are configured
by an INI-style file (sections ``[env]``, ``[train]``, ``[run]``) with any
key overridable from the command line via ``--set section.key=value``;
flags win over the file.  Every run directory receives a
``resolved_config.ini`` echo sufficient to reproduce the run.

Exit codes: 0 success, 1 verification/assertion failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import os
import sys
from dataclasses import replace

import numpy as np

from . import nn, oracle, runtime
from .env import DecPomdpSpec, make_env
from .learner import (METRICS_COLUMNS, TrainConfig, Trainer, ablation_mode,
                      actor_from_checkpoint, evaluate)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _coerce(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        lowered = text.strip().lower()
        if lowered in ("true", "yes", "on"):
            return True
        if lowered in ("false", "no", "off"):
            return False
        return text.strip()


def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section.strip(), name.strip(), value.strip())
    return cp


def build_env(cp: configparser.ConfigParser) -> DecPomdpSpec:
    if not cp.has_option("env", "name"):
        raise ConfigError("missing required key env.name")
    params = {k: _coerce(v) for k, v in cp.items("env") if k != "name"}
    return make_env(cp.get("env", "name"), **params)


def build_train_config(cp: configparser.ConfigParser) -> TrainConfig:
    known = {f.name: f for f in dataclasses.fields(TrainConfig)}
    kwargs = {}
    if cp.has_section("train"):
        for key, raw in cp.items("train"):
            if key not in known:
                raise ConfigError(f"unknown key train.{key}")
            value = _coerce(raw)
            if key == "hidden":
                value = tuple(int(x) for x in (value if isinstance(value, (list, tuple)) else [value]))
            kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] section: {exc}") from exc


def parse_seeds(cp: configparser.ConfigParser, flag: str | None) -> list[int]:
    text = flag if flag is not None else (cp.get("run", "seeds", fallback="0"))
    seeds = [int(s) for s in str(text).replace(",", " ").split()]
    if not seeds:
        raise ConfigError("seed list must not be empty")
    return seeds


def echo_config(path: str, spec: DecPomdpSpec, config: TrainConfig, seeds: list[int]) -> None:
    cp = configparser.ConfigParser()
    cp.add_section("env")
    cp.set("env", "name", spec.name)
    for k, v in spec.params.items():
        cp.set("env", k, repr(v))
    cp.add_section("train")
    for k, v in config.to_dict().items():
        cp.set("train", k, repr(v) if not isinstance(v, str) else v)
    cp.add_section("run")
    cp.set("run", "seeds", " ".join(str(s) for s in seeds))
    with open(path, "w") as fh:
        cp.write(fh)


def _run_one_seed(spec: DecPomdpSpec, config: TrainConfig, out_dir: str,
                  dump_vtrace: bool = False, quiet: bool = False) -> list[dict]:
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(spec, config, out_dir=out_dir)
    source = runtime.make_source(spec, config, trainer.collector_seed)
    rows = []
    metrics_path = os.path.join(out_dir, "metrics.csv")
    debug_path = os.path.join(out_dir, "vtrace_debug.csv")
    try:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_COLUMNS)
            dbg_fh = dbg_writer = None
            if dump_vtrace:
                dbg_fh = open(debug_path, "w", newline="")
                dbg_writer = csv.writer(dbg_fh)
                dbg_writer.writerow(["epoch", "t", "c_t", "rho_t", "delta_t", "v_t"])
            try:
                for m in trainer.train(source, log_debug_targets=dump_vtrace):
                    writer.writerow(m.to_row())
                    rows.append(m)
                    if dump_vtrace and trainer.debug_rows:
                        for row in trainer.debug_rows:
                            dbg_writer.writerow([m.epoch, *row])
                    if not quiet and m.epoch % 50 == 0:
                        print(f"  seed {config.seed} epoch {m.epoch}: steps={m.env_steps} "
                              f"success={m.success_rate:.3f} return={m.mean_return:.3f}", flush=True)
            finally:
                if dbg_fh is not None:
                    dbg_fh.close()
    finally:
        source.close()
    return rows


def cmd_train(args) -> int:
    cp = load_config(args.config, args.set or [])
    spec = build_env(cp)
    base = build_train_config(cp)
    if args.total_steps is not None:
        base = replace(base, total_steps=args.total_steps)
    if args.workers is not None:
        base = replace(base, n_workers=args.workers)
    if args.staleness is not None:
        base = replace(base, staleness=args.staleness)
    seeds = parse_seeds(cp, args.seeds)
    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(os.path.join(args.out_dir, "resolved_config.ini"), spec, base, seeds)
    for seed in seeds:
        config = replace(base, seed=seed)
        out_dir = os.path.join(args.out_dir, f"seed_{seed}")
        rows = _run_one_seed(spec, config, out_dir, dump_vtrace=args.dump_vtrace, quiet=args.quiet)
        final = rows[-1].success_rate if rows else float("nan")
        print(f"seed {seed}: {len(rows)} epochs, final success_rate={final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = nn.load_checkpoint(args.checkpoint)
    env_meta = ck.meta["env"]
    spec = make_env(env_meta["name"], **env_meta["params"])
    try:
        actor, config = actor_from_checkpoint(ck)
    except (KeyError, ValueError) as exc:
        print(f"checkpoint/environment mismatch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    summary = evaluate(spec, actor, episodes=args.episodes, seed=args.seed,
                       greedy=args.greedy, framestack_k=config.framestack_k)
    print(f"episodes={summary.episodes} mean_return={summary.mean_return} "
          f"median_return={summary.median_return} success_rate={summary.success_rate}")
    return EXIT_OK


def cmd_oracle_verify(args) -> int:
    def progress(done, total, row):
        if not args.quiet and done % 25 == 0:
            print(f"  verified {done}/{total} specs", flush=True)

    rows, ok = oracle.verify_battery(n_specs=args.specs, seed=args.seed,
                                     pairs_per_spec=args.pairs,
                                     inject_unclipped_rho=args.inject_unclipped_rho,
                                     progress=progress)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=oracle.BATTERY_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    bad = [r for r in rows if not r["ok"]]
    if bad:
        first = bad[0]
        print(f"verification FAILED on {len(bad)}/{len(rows)} specs; "
              f"first offender seed={first['seed']}: {first['violations']}", file=sys.stderr)
        return EXIT_FAIL
    print(f"verification passed on {len(rows)} specs")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cp = load_config(args.config, args.set or [])
    spec = build_env(cp)
    base = build_train_config(cp)
    if args.workers is not None:
        base = replace(base, n_workers=args.workers)
    if args.staleness is not None:
        base = replace(base, staleness=args.staleness)
    seeds = parse_seeds(cp, args.seeds)
    names = args.ablations or []
    try:
        variants = [("baseline", base)] + [(name, ablation_mode(base, name)) for name in names]
    except ValueError as exc:
        print(f"invalid ablation: {exc}", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out_dir, exist_ok=True)
    echo_config(os.path.join(args.out_dir, "resolved_config.ini"), spec, base, seeds)
    comparison = []
    for label, variant in variants:
        for seed in seeds:
            config = replace(variant, seed=seed)
            safe = label.replace("(", "_").replace(")", "").replace(":", "_")
            out_dir = os.path.join(args.out_dir, f"{safe}_seed_{seed}")
            rows = _run_one_seed(spec, config, out_dir, quiet=args.quiet)
            cadence = max(1, config.checkpoint_every)
            for m in rows:
                if m.epoch % cadence == 0 or m is rows[-1]:
                    comparison.append({
                        "ablation": label, "seed": seed, "checkpoint_step": m.env_steps,
                        "epoch": m.epoch, "success_rate": m.success_rate,
                        "mean_return": m.mean_return, "entropy": m.entropy,
                        "mean_rho": m.mean_rho,
                    })
            print(f"{label} seed {seed}: final success={rows[-1].success_rate if rows else float('nan')}")
    path = os.path.join(args.out_dir, "comparison.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["ablation", "seed", "checkpoint_step", "epoch",
                                                "success_rate", "mean_return", "entropy", "mean_rho"])
        writer.writeheader()
        for row in comparison:
            writer.writerow(row)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    cp = load_config(args.config, args.set or [])
    if cp.has_option("env", "name"):
        name = cp.get("env", "name")
        params = {k: _coerce(v) for k, v in cp.items("env") if k != "name"}
    else:
        name, params = "gridworld", {"width": 4, "height": 4, "n_agents": 2,
                                     "sight_radius": 1, "episode_limit": 30}
    counts = [int(c) for c in args.workers.replace(",", " ").split()]
    if not counts:
        print("worker counts must not be empty", file=sys.stderr)
        return EXIT_USAGE
    rows = runtime.bench_scaling(name, params, counts, duration=args.duration,
                                 repetitions=args.reps, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    path = os.path.join(args.out_dir, "scaling.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["workers", "steps_per_sec_mean",
                                                "steps_per_sec_std", "repetitions"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
            print(f"workers={row['workers']}: {row['steps_per_sec_mean']:.1f} +- "
                  f"{row['steps_per_sec_std']:.1f} steps/s")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marltrace",
                                     description="importance-corrected multi-agent actor-critic engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="INI config file (sections [env], [train], [run])")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config key; repeatable, wins over the file")
        p.add_argument("--out-dir", default="runs", help="output directory")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--quiet", action="store_true")

    p_train = sub.add_parser("train", help="run training, write metrics and checkpoints")
    add_common(p_train)
    p_train.add_argument("--total-steps", type=int)
    p_train.add_argument("--workers", type=int)
    p_train.add_argument("--staleness", help="fresh | natural | fixed_lag(k)")
    p_train.add_argument("--dump-vtrace", action="store_true",
                         help="dump per-step (c, rho, delta, v) of one unroll per epoch")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with decentralized execution")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--greedy", action="store_true", help="argmax actions instead of sampling")
    p_eval.set_defaults(func=cmd_eval)

    p_ver = sub.add_parser("oracle-verify", help="run the randomized operator verification battery")
    p_ver.add_argument("--specs", type=int, default=200)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--pairs", type=int, default=100, help="value pairs per spec for contraction")
    p_ver.add_argument("--out", help="CSV report path")
    p_ver.add_argument("--inject-unclipped-rho", action="store_true",
                       help="negative control: run the operator on raw ratios, must fail")
    p_ver.add_argument("--quiet", action="store_true")
    p_ver.set_defaults(func=cmd_oracle_verify)

    p_abl = sub.add_parser("ablate", help="baseline plus named ablations over shared seeds")
    add_common(p_abl)
    p_abl.add_argument("--ablations", nargs="*", default=[],
                       help="e.g. no_is decentralized separate_actors agent_id framestack:4 critic:full")
    p_abl.add_argument("--workers", type=int)
    p_abl.add_argument("--staleness")
    p_abl.set_defaults(func=cmd_ablate)

    p_bench = sub.add_parser("bench-scaling", help="multiprocess throughput per worker count")
    add_common(p_bench)
    p_bench.add_argument("--workers", default="1,2,4,8", help="comma-separated worker counts")
    p_bench.add_argument("--duration", type=float, default=3.0)
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.set_defaults(func=cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
