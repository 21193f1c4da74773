"""Command-line entry point: ``colhar prepare | run | compare``.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from collections import defaultdict

from . import cache
from .codec import encode_checkpoint
from .config import RunConfig, parse_config
from .data import (HARTH_ACTIVITIES, PAMAP2_ACTIVITIES, PAMAP2_COLUMNS, AgentDataset,
                   clean, load_harth, load_pamap2, make_class_map, make_windows,
                   rotating_profile, split_train_test, synthesize_network_data,
                   synthesize_windows)
from .errors import (ColharError, ComparisonError, ConfigError, IngestionError,
                     PlanValidationError)
from .evaluation import ExperimentPlan, results_csv, run_experiment, summarize
from .nn import ModelArchitecture, SensorWindow
from .seeds import derive_seed

log = logging.getLogger("colhar")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
INCOMPLETE_MARKER = ".incomplete"


# ---------------------------------------------------------------- datasets


def synthetic_profile(cfg: RunConfig) -> list[list[int]]:
    """Per-agent class counts from ``synthetic_profile``.

    ``rotate:k``  agent i holds classes i..i+k-1 (mod classes)
    ``starved``   like ``rotate:2`` but agent 0 holds class 0 only
    ``uniform``   every agent holds every class
    otherwise     explicit rows, ``;`` between agents and ``,`` between classes
    """
    n, k, w = cfg.synthetic_agents, cfg.synthetic_classes, cfg.synthetic_windows
    text = cfg.synthetic_profile.strip()
    if text.startswith("rotate:"):
        return rotating_profile(n, k, int(text.split(":", 1)[1]), w)
    if text == "starved":
        rows = rotating_profile(n, k, 2, w)
        rows[0] = [w] + [0] * (k - 1)
        return rows
    if text == "uniform":
        return [[w] * k for _ in range(n)]
    try:
        rows = [[int(c) for c in row.split(",")] for row in text.split(";")]
    except ValueError:
        raise ConfigError(f"synthetic_profile: cannot parse {text!r}") from None
    if len(rows) != n or any(len(r) != k for r in rows):
        raise ConfigError("synthetic_profile: need synthetic_agents rows of synthetic_classes counts")
    return rows


def _windows_for(series_list, cfg: RunConfig, class_map) -> dict[str, list[SensorWindow]]:
    out = {}
    for s in series_list:
        cleaned = clean(s, cfg.max_gap_seconds)
        out[s.subject_id] = make_windows(cleaned, cfg.window_length, cfg.effective_stride,
                                         class_map)
    return out


def build_datasets(cfg: RunConfig) -> tuple[list[AgentDataset], list[SensorWindow]]:
    """Load, clean, window and split the configured data (no caching)."""
    if cfg.dataset == "synthetic":
        datasets = synthesize_network_data(
            cfg.synthetic_agents, cfg.synthetic_classes, cfg.synthetic_channels,
            cfg.window_length, synthetic_profile(cfg), cfg.synthetic_noise, cfg.seed,
            cfg.train_ratio)
        held_out = []
        if cfg.scope == "global":
            held_out = synthesize_windows(
                [cfg.synthetic_test_windows] * cfg.synthetic_classes, cfg.synthetic_channels,
                cfg.window_length, cfg.synthetic_noise,
                derive_seed(cfg.seed, "synthetic", "heldout"), "synthetic-heldout")
        return datasets, held_out

    if not cfg.data_dir or not os.path.isdir(cfg.data_dir):
        raise IngestionError(
            f"dataset directory {cfg.data_dir!r} not found; set data_dir in the config "
            f"or the COLHAR_DATA_ROOT environment variable")
    if cfg.dataset == "pamap2":
        activities = cfg.activities or list(PAMAP2_ACTIVITIES)
        columns = cfg.columns or list(PAMAP2_COLUMNS)
        load = lambda subjects: load_pamap2(cfg.data_dir, subjects, columns, activities)  # noqa: E731
    else:
        activities = cfg.activities or list(HARTH_ACTIVITIES)
        load = lambda subjects: load_harth(cfg.data_dir, subjects, activities)  # noqa: E731
    class_map = make_class_map(activities)
    train_subjects, test_subjects = cfg.subjects()

    if cfg.scope == "global":
        train = _windows_for(load(train_subjects), cfg, class_map)
        test = _windows_for(load(test_subjects), cfg, class_map)
        datasets = [AgentDataset(i, windows, [], dict(class_map), subject)
                    for i, (subject, windows) in enumerate(train.items())]
        held_out = [w for windows in test.values() for w in windows]
        return datasets, held_out

    subjects = list(dict.fromkeys(train_subjects + test_subjects))
    per_subject = _windows_for(load(subjects), cfg, class_map)
    datasets = []
    for i, (subject, windows) in enumerate(per_subject.items()):
        tr, te = (split_train_test(windows, cfg.train_ratio, derive_seed(cfg.seed, "split", i))
                  if windows else ([], []))
        datasets.append(AgentDataset(i, tr, te, dict(class_map), subject))
    return datasets, []


def cache_dir(cfg: RunConfig) -> str:
    return cfg.cache_dir or os.path.join(cfg.output_dir, "cache", f"{cfg.dataset}-{cfg.scope}")


def prepare(cfg: RunConfig) -> tuple[list[AgentDataset], list[SensorWindow], bool]:
    """Datasets from the window cache, building it on a miss. Third item: cache hit."""
    directory = cache_dir(cfg)
    key = cfg.data_key()
    cached = cache.load_cache(directory, key)
    if cached is not None:
        log.info("window cache hit in %s", directory)
        return cached[0], cached[1], True
    datasets, held_out = build_datasets(cfg)
    channels = cfg.synthetic_channels if cfg.dataset == "synthetic" else (
        len(cfg.columns or PAMAP2_COLUMNS) if cfg.dataset == "pamap2" else 6)
    cache.save_cache(directory, key, datasets, held_out, channels, cfg.window_length)
    log.info("window cache written to %s (%s)", directory,
             ", ".join(f"agent {d.agent_id}: {d.size_weight}" for d in datasets))
    # reload so that a fresh build and a cache hit yield identical objects
    datasets, held_out = cache.load_cache(directory, key)
    return datasets, held_out, False


def build_plan(cfg: RunConfig, datasets: list[AgentDataset],
               held_out: list[SensorWindow]) -> ExperimentPlan:
    sample = next((w for d in datasets for w in d.train + d.test), None) or \
        (held_out[0] if held_out else None)
    if sample is None:
        raise IngestionError("no windows were produced; check subjects, activities and window length")
    arch = ModelArchitecture(
        input_channels=sample.data.shape[0], num_classes=datasets[0].num_classes,
        window_length=cfg.window_length, conv_out_channels=cfg.conv_out_channels,
        conv_kernel=cfg.conv_kernel, pool_kernel=cfg.pool_kernel)
    return ExperimentPlan(
        datasets=datasets, arch=arch, scope=cfg.scope, mode=cfg.mode, global_test=held_out,
        epochs=cfg.epochs, batch_size=cfg.batch_size, seed=cfg.seed, topology=cfg.topology,
        topology_degree=cfg.topology_degree, include_self=cfg.include_self,
        standardize=cfg.standardize, reset_optimizer=cfg.reset_optimizer,
        adam=dict(alpha=cfg.alpha, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon),
        workers=cfg.workers, dataset_name=cfg.dataset, experiment_id=cfg.experiment_id)


# ---------------------------------------------------------------- commands


def run_dir(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, f"run-{cfg.hash()}")


def cmd_prepare(cfg: RunConfig) -> int:
    datasets, held_out, hit = prepare(cfg)
    print(f"{'cache hit' if hit else 'cache built'}: {cache_dir(cfg)}")
    for d in datasets:
        print(f"  agent {d.agent_id} ({d.subject}): train={d.size_weight} test={len(d.test)}")
    if held_out:
        print(f"  held-out windows: {len(held_out)}")
    return EXIT_OK


def cmd_run(cfg: RunConfig) -> int:
    out = run_dir(cfg)
    os.makedirs(out, exist_ok=True)
    marker = os.path.join(out, INCOMPLETE_MARKER)
    if os.path.exists(marker):
        log.warning("artifacts in %s are stale (previous run did not finish); overwriting", out)
    with open(marker, "w") as fh:
        fh.write("run in progress\n")

    datasets, held_out, _ = prepare(cfg)
    plan = build_plan(cfg, datasets, held_out)
    started = time.perf_counter()
    result = run_experiment(plan)
    h = cfg.hash()
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.canonical())
    with open(os.path.join(out, f"results_{h}.csv"), "w", newline="") as fh:
        fh.write(results_csv(result.history, cfg.experiment_id, cfg.dataset, cfg.mode, cfg.scope))
    summary = summarize(result.history)
    with open(os.path.join(out, f"summary_{h}.csv"), "w", newline="") as fh:
        fh.write(summary.to_csv())
    result.round_log.write_csv(os.path.join(out, f"roundlog_{h}.csv"))
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for agent in result.agents:
        with open(os.path.join(ckpt_dir, f"agent_{agent.agent_id}.ckpt"), "wb") as fh:
            fh.write(encode_checkpoint(agent.checkpoint(), plan.arch))
    os.remove(marker)
    print(f"{cfg.dataset} {cfg.scope} {cfg.mode}: final average macro-F1 "
          f"{summary.final_average:.4f} after {summary.epochs[-1]} epochs "
          f"({time.perf_counter() - started:.1f}s) -> {out}")
    return EXIT_OK


def _read_results(directory: str) -> list[dict[str, str]]:
    files = sorted(f for f in os.listdir(directory)
                   if f.startswith("results_") and f.endswith(".csv"))
    if not files:
        raise ComparisonError(f"{directory}: no results CSV")
    if os.path.exists(os.path.join(directory, INCOMPLETE_MARKER)):
        raise ComparisonError(f"{directory}: run did not finish; results are stale")
    rows = []
    for name in files:
        with open(os.path.join(directory, name), newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def compare_runs(run_dirs: list[str]) -> tuple[str, str]:
    """(comparison table CSV, long-format curve CSV) for the given run directories."""
    rows = [r for d in run_dirs for r in _read_results(d)]
    datasets = {r["dataset"] for r in rows}
    scopes = {r["scope"] for r in rows}
    if len(datasets) > 1 or len(scopes) > 1:
        raise ComparisonError(
            f"runs mix datasets {sorted(datasets)} / scopes {sorted(scopes)}")
    curves: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        curves[r["mode"]][int(r["epoch"])].append(float(r["macro_f1"]))
    order = [m for m in ("collab", "isolated", "centralized") if m in curves]
    final = {m: sum(curves[m][max(curves[m])]) / len(curves[m][max(curves[m])]) for m in order}

    long_rows = [["mode", "epoch", "average_macro_f1"]]
    for m in order:
        for e in sorted(curves[m]):
            vals = curves[m][e]
            long_rows.append([m, e, repr(sum(vals) / len(vals))])
    table = [["dataset", "scope", "mode", "final_epoch", "final_average_macro_f1",
              "relative_improvement_vs_isolated"]]
    base = final.get("isolated")
    for m in order:
        rel = "" if base in (None, 0.0) or m == "isolated" else repr((final[m] - base) / base)
        table.append([next(iter(datasets)), next(iter(scopes)), m, max(curves[m]),
                      repr(final[m]), rel])
    return _csv(table), _csv(long_rows)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_compare(run_dirs: list[str], out_dir: str) -> int:
    table, long = compare_runs(run_dirs)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as fh:
        fh.write(table)
    with open(os.path.join(out_dir, "curves_long.csv"), "w", newline="") as fh:
        fh.write(long)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="colhar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("prepare", "run"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("-c", "--config", help="key = value config file (default: all defaults)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key; repeatable")
        s.add_argument("--dataset")
        s.add_argument("--data-dir")
        s.add_argument("--output-dir")
        s.add_argument("--scope", choices=("global", "local"))
        s.add_argument("--seed")
        if name == "run":
            s.add_argument("--mode", choices=("collab", "isolated", "centralized"))
            s.add_argument("--epochs")
            s.add_argument("--workers")
    c = sub.add_parser("compare", parents=[common])
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", default="comparison")
    return p


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for key in ("dataset", "data_dir", "output_dir", "scope", "seed", "mode", "epochs", "workers"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = str(value)
    return out


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "compare":
            return cmd_compare(args.run_dirs, args.out)
        cfg = parse_config(args.config, _overrides(args))
        return cmd_prepare(cfg) if args.command == "prepare" else cmd_run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, PlanValidationError, ComparisonError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ColharError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
