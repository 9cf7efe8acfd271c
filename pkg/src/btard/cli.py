"""Command-line experiment runner.

    btard run    --config exp.toml --out results/ [--seed S] [--reps R] [--hash-mode M] [--figures]
    btard sweep  --config exp.toml --out results/ --param swarm.b=0,3,7 [--param clip.tau=1,10]
    btard verify results/events.jsonl [--resimulate]

Exit codes: 0 success, 1 audit divergence, 2 configuration error, 3 every
honest peer banned (partial outputs are still written), 4 unreadable or
truncated trace. ``BTARD_WORKERS`` sets the number of worker threads used
for repetitions and sweep points.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .audit import TraceError, verify_trace
from .config import ExperimentConfig, load_config
from .simnet import CSV_COLUMNS, ConfigError, run

log = logging.getLogger("btard")

EXIT_OK, EXIT_DIVERGENCE, EXIT_CONFIG, EXIT_ALL_BANNED, EXIT_TRACE = 0, 1, 2, 3, 4


def workers() -> int:
    try:
        return max(1, int(os.environ.get("BTARD_WORKERS", "1")))
    except ValueError:
        return 1


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (float(v) if k in ("loss_gap", "grad_norm") else int(v)) for k, v in r.items()})
    return out


def write_run(result, out: Path, figures: bool = False):
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result.rows, out / "metrics.csv")
    result.trace.write(out / "events.jsonl")
    with open(out / "summary.json", "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
    if figures and result.rows:
        from .plotting import plot_loss, plot_traffic
        plot_loss(result.rows, out / "loss.png", result.summary["bans"])
        plot_traffic(result.rows, out / "traffic.png")


def _run_reps(config: ExperimentConfig, out: Path, reps: int, figures: bool) -> tuple:
    seeds = [config.seed + i for i in range(reps)]
    configs = [config.with_seed(s, repetitions=1) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers()) as pool:
        results = list(pool.map(run, configs))
    if reps == 1:
        write_run(results[0], out, figures)
        return results, results[0].summary
    for s, res in zip(seeds, results):
        write_run(res, out / f"seed_{s}", figures)
    steps = min(len(r.rows) for r in results)
    bands = []
    for i in range(steps):
        gaps = [r.rows[i]["loss_gap"] for r in results]
        bands.append({"step": results[0].rows[i]["step"], "loss_gap_mean": float(np.mean(gaps)),
                      "loss_gap_min": float(np.min(gaps)), "loss_gap_max": float(np.max(gaps))})
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss_gap_mean", "loss_gap_min", "loss_gap_max"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(bands)
    finals = [r.summary["final_loss_gap"] for r in results if r.summary["final_loss_gap"] is not None]
    summary = {
        "summary_version": 1,
        "repetitions": reps,
        "seeds": seeds,
        "final_loss_gap": {"mean": float(np.mean(finals)), "min": float(np.min(finals)),
                           "max": float(np.max(finals))} if finals else None,
        "all_byzantine_banned": all(r.summary["all_byzantine_banned"] for r in results),
        "aborted": [r.summary["aborted"] for r in results if r.summary["aborted"]],
        "config": config.to_dict(),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if figures and bands:
        from .plotting import plot_bands
        plot_bands(bands, out / "loss_bands.png")
    return results, summary


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    raw = config.to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.hash_mode is not None:
        raw["hash_mode"] = args.hash_mode
    if getattr(args, "reps", None) is not None:
        raw["repetitions"] = args.reps
    return ExperimentConfig(raw)


def cmd_run(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    results, _ = _run_reps(config, Path(args.out), int(config.raw["repetitions"]), args.figures)
    for r in results:
        s = r.summary
        log.info("seed %d: %d steps, final loss gap %s, bans %d (byzantine %d)", r.config.seed,
                 s["steps_completed"], s["final_loss_gap"], len(s["bans"]), s["byzantine_banned"])
    if any(r.aborted for r in results):
        print(f"aborted: {[r.aborted for r in results if r.aborted][0]}", file=sys.stderr)
        return EXIT_ALL_BANNED
    return EXIT_OK


def parse_value(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def parse_param(spec: str) -> tuple:
    if "=" not in spec:
        raise ConfigError(f"--param expects key=v1,v2,..., got {spec!r}")
    key, values = spec.split("=", 1)
    return key.strip(), [parse_value(v.strip()) for v in values.split(",") if v.strip()]


def _set_path(raw: dict, dotted: str, value):
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def cmd_sweep(args) -> int:
    base = _apply_overrides(load_config(args.config), args)
    params = [parse_param(p) for p in args.param]
    if not params:
        raise ConfigError("sweep needs at least one --param")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = []
    for combo in itertools.product(*[vals for _, vals in params]):
        raw = base.to_dict()
        for (key, _), val in zip(params, combo):
            _set_path(raw, key, val)
        label = "_".join(f"{key.split('.')[-1]}={val}" for (key, _), val in zip(params, combo))
        points.append((label, ExperimentConfig(raw), combo))
    table = []
    curves = {}
    code = EXIT_OK
    for label, cfg, combo in points:
        results, summary = _run_reps(cfg, out / label, int(cfg.raw["repetitions"]), args.figures)
        row = {key: val for (key, _), val in zip(params, combo)}
        finals = [r.summary["final_loss_gap"] for r in results]
        row.update({"final_loss_gap_mean": float(np.mean([f for f in finals if f is not None] or [np.nan])),
                    "bans_mean": float(np.mean([len(r.summary["bans"]) for r in results])),
                    "all_byzantine_banned": all(r.summary["all_byzantine_banned"] for r in results),
                    "aborted": sum(1 for r in results if r.aborted)})
        table.append(row)
        curves[label] = results[0].rows
        if any(r.aborted for r in results):
            code = EXIT_ALL_BANNED
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(table)
    if args.figures:
        from .plotting import plot_sweep
        plot_sweep(curves, out / "sweep.png")
    return code


def cmd_verify(args) -> int:
    report = verify_trace(args.trace, resimulate=args.resimulate)
    print(report.verdict())
    for d in report.divergences[:20]:
        print(f"  {d}")
    return EXIT_OK if report.consistent else EXIT_DIVERGENCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btard", description="Byzantine-tolerant all-reduce SGD simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML (or JSON) experiment file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--reps", type=int, default=None, help="repetitions with seeds seed..seed+reps-1")
        p.add_argument("--hash-mode", choices=("crypto", "fast-sim"), default=None)
        p.add_argument("--figures", action="store_true", help="also render PNG figures")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)
    p_sweep = sub.add_parser("sweep", help="grid over config keys")
    common(p_sweep)
    p_sweep.add_argument("--param", action="append", default=[], help="dotted.key=v1,v2,...")
    p_sweep.set_defaults(func=cmd_sweep)
    p_verify = sub.add_parser("verify", help="audit a trace")
    p_verify.add_argument("trace")
    p_verify.add_argument("--resimulate", action="store_true", help="also re-run and compare trace digests")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE


if __name__ == "__main__":
    sys.exit(main())
