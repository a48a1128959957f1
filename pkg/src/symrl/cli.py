"""Command-line front end: train, eval, verify, ablate-naive, compare, init-scale.

Exit codes: 0 success, 1 a check or run failed, 2 bad configuration or input.
Outputs go under ``--out`` or, by default, under ``$SYMRL_OUT`` (``runs``).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .envs import ENVIRONMENTS, make_env
from .errors import ConfigurationError, LoadError, NumericError, SymrlError
from .evalkit import (CSV_HEADER, MetricsRecord, equivalent_goal_eval, final_value,
                      init_scale_study)
from .learner import TrainConfig, default_config
from .persist import load_policy, read_manifest, save_network, save_policy, write_manifest
from .plotting import plot_curves
from .symmdp import SymmetryTransform, verify_group, verify_mdp_symmetry
from .trainer import train

OUT_ENV_VAR = "SYMRL_OUT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# -- config -------------------------------------------------------------------

def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    kind = str(kinds[name])
    text = text.strip()
    try:
        if name == "hidden_sizes":
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        if kind == "bool":
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def parse_assignments(lines, origin: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    valid = TrainConfig.field_names()
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in valid:
            raise ConfigurationError(f"{origin}:{lineno}: unknown key {key!r}; valid keys: {', '.join(valid)}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | None, overrides: list[str]) -> TrainConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"{path}: {exc.strerror}") from exc
        values.update(parse_assignments(text.splitlines(), path))
    values.update(parse_assignments(overrides, "--set"))
    env_id = values.pop("env_id", "cartpole")
    return default_config(env_id, **values)


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


def default_run_dir(config: TrainConfig) -> Path:
    tag = "-naive" if config.naive_aug_ablation else ""
    return output_root() / f"{config.env_id}-{config.method_label}{tag}-s{config.seed}"


# -- train --------------------------------------------------------------------

def read_metrics(path: Path) -> list[MetricsRecord]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if ",".join(reader.fieldnames or []) != CSV_HEADER:
                raise LoadError(f"{path}: unexpected header")
            return [MetricsRecord.from_csv_row(row) for row in reader]
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror}") from exc


def plot_run(path: Path, records: list[MetricsRecord], title: str) -> None:
    iters = [r.iter for r in records]
    panels = {
        "mean_return": {title: ([r.mean_return for r in records], None)},
        "symmetry_metric": {title: ([r.symmetry_metric for r in records], None)},
    }
    plot_curves(path, iters, panels, title)


def run_training(config: TrainConfig, out: Path, wall_time: bool = True, quiet: bool = False,
                 plot: bool = True) -> list[MetricsRecord]:
    """Train and write manifest, metrics.csv, parameters and a curve plot to ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    meta = dict(seed=config.seed, version=__version__, out_dir=str(out), started=started)
    write_manifest(out / "manifest.json", config, **meta)
    records = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_record(rec: MetricsRecord) -> None:
            records.append(rec)
            fh.write(rec.csv_row(wall_time) + "\n")
            fh.flush()
            if not quiet and (rec.iter % 10 == 0 or rec.iter == config.total_iters - 1):
                print(f"iter {rec.iter:4d}  return {rec.mean_return: .3f}  "
                      f"symmetry {rec.symmetry_metric:.3e}", flush=True)

        try:
            result = train(config, on_record)
        except NumericError as exc:
            last = records[-1].iter if records else "none"
            raise NumericError(f"{exc} (last good iteration: {last})") from exc
    save_policy(out / "policy.bin", result.policy)
    save_network(out / "value.bin", result.value_net)
    write_manifest(out / "manifest.json", config, **meta, finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    if plot:
        plot_run(out / "metrics.svg", records, config.method_label)
    return records


def cmd_train(args) -> int:
    if args.from_manifest:
        if args.config or args.set:
            raise ConfigurationError("--from-manifest cannot be combined with --config or --set")
        config, _ = read_manifest(args.from_manifest)
    else:
        config = load_config(args.config, args.set)
    out = Path(args.out) if args.out else default_run_dir(config)
    records = run_training(config, out, wall_time=not args.no_wall_time, quiet=args.quiet)
    print(f"final return {final_value([r.mean_return for r in records]):.6g}  "
          f"final symmetry {final_value([r.symmetry_metric for r in records]):.6g}")
    print(f"wrote {out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    config, _ = read_manifest(run / "manifest.json")
    policy = load_policy(run / "policy.bin")
    report = equivalent_goal_eval(config.env_id, policy, n_runs=args.n_runs,
                                  rng=np.random.default_rng(args.seed))
    print(report.to_text())
    with open(run / "eval.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["goal", "mean_return"])
        for name, value in zip(report.goal_names, report.mean_returns):
            writer.writerow([name, repr(value)])
        writer.writerow(["variation", repr(report.variation)])
    return EXIT_OK


# -- verify -------------------------------------------------------------------

def corrupt_group(group, index: int):
    """Flip the sign of the first observation component of transform ``index``."""
    if not 1 <= index < len(group):
        raise ConfigurationError(f"--corrupt-transform must be in 1..{len(group) - 1}")
    g = group[index]
    state_map = g.state_map.copy()
    state_map[0] = -state_map[0]
    return group.replace(index, SymmetryTransform(state_map, g.action_map, f"{g.name}-corrupt"))


def cmd_verify(args) -> int:
    env = make_env(args.env)
    group = env.group
    if args.corrupt_transform is not None:
        group = corrupt_group(group, args.corrupt_transform)
    structure = verify_group(group, args.tol)
    dynamics = verify_mdp_symmetry(env, group, args.samples, args.tol, np.random.default_rng(args.seed))
    print(structure.to_text())
    print(dynamics.to_text())
    ok = structure.passed and dynamics.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# -- ablate-naive -------------------------------------------------------------

def cmd_ablate_naive(args) -> int:
    base = load_config(args.config, args.set)
    base = replace(base, symmetry_mode="aug", naive_aug_ablation=False)
    out = Path(args.out) if args.out else output_root() / f"{base.env_id}-ablate-naive"
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seeds if args.seeds else [base.seed]
    panels = {"mean_aug_logp": {}, "mean_return": {}}
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "iter", "corrected_mean_aug_logp", "naive_mean_aug_logp",
                         "corrected_mean_return", "naive_mean_return"])
        for seed in seeds:
            runs = {}
            for variant, naive in (("corrected", False), ("naive", True)):
                config = replace(base, seed=seed, naive_aug_ablation=naive)
                print(f"seed {seed}: {variant}", flush=True)
                runs[variant] = run_training(config, out / f"{variant}-s{seed}", wall_time=not args.no_wall_time,
                                             quiet=True, plot=False)
            for c, n in zip(runs["corrected"], runs["naive"]):
                writer.writerow([seed, c.iter, repr(c.mean_aug_logp), repr(n.mean_aug_logp),
                                 repr(c.mean_return), repr(n.mean_return)])
            for variant, recs in runs.items():
                panels["mean_aug_logp"][f"{variant} s{seed}"] = ([r.mean_aug_logp for r in recs], None)
                panels["mean_return"][f"{variant} s{seed}"] = ([r.mean_return for r in recs], None)
                print(f"  {variant:9s} final return {final_value([r.mean_return for r in recs]):.6g}")
    plot_curves(out / "ablation.svg", list(range(base.total_iters)), panels, "corrected vs naive augmentation")
    print(f"wrote {out}")
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def load_run(path: Path) -> tuple[TrainConfig, list[MetricsRecord]]:
    config, _ = read_manifest(path / "manifest.json")
    return config, read_metrics(path / "metrics.csv")


def summarize_runs(runs: list[tuple[TrainConfig, list[MetricsRecord]]]) -> dict:
    """Per method label: iteration-aligned mean and std of return and symmetry metric."""
    env_ids = {c.env_id for c, _ in runs}
    if len(env_ids) != 1:
        raise ConfigurationError(f"runs mix environments: {', '.join(sorted(env_ids))}")
    by_label: dict[str, list[list[MetricsRecord]]] = {}
    for config, records in runs:
        by_label.setdefault(config.method_label, []).append(records)
    summary = {}
    for label, group in by_label.items():
        n = min(len(r) for r in group)
        table = {}
        for metric in ("mean_return", "symmetry_metric"):
            values = np.array([[getattr(rec, metric) for rec in recs[:n]] for recs in group])
            finite = np.isfinite(values)
            count = finite.sum(axis=0)
            safe = np.where(finite, values, 0.0)
            mean = np.where(count > 0, safe.sum(axis=0) / np.maximum(count, 1), math.nan)
            var = np.where(count > 0, (np.where(finite, values - mean, 0.0) ** 2).sum(axis=0)
                           / np.maximum(count, 1), math.nan)
            table[metric] = (mean, np.sqrt(var))
        finals = [final_value([r.mean_return for r in recs]) for recs in group]
        syms = [final_value([r.symmetry_metric for r in recs]) for recs in group]
        summary[label] = dict(n_seeds=len(group), iters=n, curves=table,
                              final_return=float(np.mean(finals)), final_symmetry=float(np.mean(syms)))
    return summary


def cmd_compare(args) -> int:
    runs = [load_run(Path(p)) for p in args.run_dirs]
    summary = summarize_runs(runs)
    out = Path(args.out) if args.out else output_root() / f"{runs[0][0].env_id}-compare"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "iter", "n_seeds", "mean_return_mean", "mean_return_std",
                         "symmetry_metric_mean", "symmetry_metric_std"])
        for label, s in summary.items():
            (rm, rs), (sm, ss) = s["curves"]["mean_return"], s["curves"]["symmetry_metric"]
            for i in range(s["iters"]):
                writer.writerow([label, i, s["n_seeds"], repr(float(rm[i])), repr(float(rs[i])),
                                 repr(float(sm[i])), repr(float(ss[i]))])
    iters = min(s["iters"] for s in summary.values())
    panels = {metric: {label: (s["curves"][metric][0][:iters], s["curves"][metric][1][:iters])
                       for label, s in summary.items()}
              for metric in ("mean_return", "symmetry_metric")}
    plot_curves(out / "compare.svg", list(range(iters)), panels, runs[0][0].env_id)
    print(f"{'method':>12s}  seeds  final_return  final_symmetry")
    for label, s in summary.items():
        print(f"{label:>12s}  {s['n_seeds']:5d}  {s['final_return']:12.6g}  {s['final_symmetry']:14.6g}")
    print(f"wrote {out}")
    return EXIT_OK


# -- init-scale ---------------------------------------------------------------

def cmd_init_scale(args) -> int:
    template = load_config(args.config, args.set)
    out = Path(args.out) if args.out else output_root() / f"{template.env_id}-init-scale"
    out.mkdir(parents=True, exist_ok=True)
    rows = init_scale_study(template, sorted(args.scales), args.seeds)
    with open(out / "init_scale.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scale", "seed", "initial_symmetry_metric", "final_return", "final_symmetry_metric"])
        for r in rows:
            writer.writerow([repr(r.scale), r.seed, repr(r.initial_symmetry_metric),
                             repr(r.final_return), repr(r.final_symmetry_metric)])
    print(f"{'scale':>8s}  initial_symmetry  final_return")
    for scale in sorted(set(r.scale for r in rows)):
        sel = [r for r in rows if r.scale == scale]
        print(f"{scale:8g}  {np.mean([r.initial_symmetry_metric for r in sel]):16.6g}  "
              f"{np.mean([r.final_return for r in sel]):12.6g}")
    print(f"wrote {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="symrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train one run")
    config_args(p)
    p.add_argument("--from-manifest", help="rerun the exact config stored in a manifest.json")
    p.add_argument("--no-wall-time", action="store_true", help="write 0.0 in the wall_time_s column")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="equivalent-goal evaluation of a trained run")
    p.add_argument("run_dir")
    p.add_argument("--n-runs", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="check an environment's symmetry group")
    p.add_argument("env", choices=sorted(ENVIRONMENTS))
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-transform", type=int, metavar="I",
                   help="flip one observation sign of transform I before checking")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("ablate-naive", help="corrected vs naive augmentation, paired by seed")
    config_args(p)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--no-wall-time", action="store_true")
    p.set_defaults(func=cmd_ablate_naive)

    p = sub.add_parser("compare", help="aggregate runs by method")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("init-scale", help="initial symmetry metric against init scale")
    config_args(p)
    p.add_argument("--scales", type=float, nargs="+", default=[0.0, 0.01, 0.3, 1.0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    p.set_defaults(func=cmd_init_scale)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SymrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
