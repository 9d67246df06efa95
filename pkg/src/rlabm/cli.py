"""Command-line interface: ``rlabm <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 bad config or missing file.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import ConfigError
from .experiments import (
    ExperimentSpec,
    MetricsTable,
    load_spec,
    mean_ci,
    run_experiment,
    write_run,
)

log = logging.getLogger("rlabm")


def _spec_from_args(args) -> ExperimentSpec:
    spec = load_spec(args.spec)
    if getattr(args, "seed", None) is not None:
        spec = spec.with_seeds([args.seed])
    if getattr(args, "run_id", None):
        spec.run_id = args.run_id
    return spec


def _execute(spec: ExperimentSpec, outdir) -> Path:
    result = run_experiment(spec)
    return write_run(spec, result, outdir)


def cmd_run(args) -> int:
    spec = _spec_from_args(args)
    run_dir = _execute(spec, args.outdir)
    print(run_dir)
    return 0


def cmd_eval(args) -> int:
    """Evaluate a saved minority-game policy bundle on fresh populations."""
    spec = _spec_from_args(args)
    if not Path(args.policy).is_file():
        raise FileNotFoundError(args.policy)
    if not spec.experiment.startswith("mg_single") and spec.experiment != "mg_generalization":
        raise ConfigError("eval supports minority-game single-agent specs only")
    raw = spec.to_dict()
    raw["experiment"] = "mg_generalization"
    raw["agents"] = {**raw["agents"], "policy_path": str(args.policy)}
    if args.populations is not None:
        raw["evaluation"] = {**raw["evaluation"], "n_populations": args.populations}
    raw["run_id"] = args.run_id or f"{spec.run_id}-eval"
    eval_spec = ExperimentSpec.from_dict(raw)
    print(_execute(eval_spec, args.outdir))
    return 0


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def expand_sweep(sweep: dict) -> list[tuple[dict, dict]]:
    """(child spec dict, parameter assignment) for every point of the grid."""
    if "base" not in sweep or "grid" not in sweep:
        raise ConfigError("sweep file needs 'base' and 'grid'")
    grid = sweep["grid"]
    if not isinstance(grid, dict) or not all(isinstance(v, list) and v for v in grid.values()):
        raise ConfigError("grid must map dotted keys to non-empty lists")
    names = sorted(grid)
    children = []
    base_id = sweep["base"].get("run_id", sweep["base"].get("experiment", "sweep"))
    for k, values in enumerate(itertools.product(*(grid[n] for n in names))):
        child = copy.deepcopy(sweep["base"])
        params = dict(zip(names, values))
        for name, value in params.items():
            _set_path(child, name, value)
        child["run_id"] = f"{base_id}__{k:03d}"
        children.append((child, params))
    return children


def _run_child(raw: dict, outdir) -> str:
    spec = ExperimentSpec.from_dict(raw)
    return str(_execute(spec, outdir))


def cmd_sweep(args) -> int:
    sweep = json.loads(Path(args.spec).read_text())
    children = expand_sweep(sweep)
    specs = [ExperimentSpec.from_dict(c) for c, _ in children]  # validate everything up front
    if args.seed is not None:
        for c, _ in children:
            c["seeds"] = [args.seed]
    outdir = Path(args.outdir or os.environ.get("RLABM_OUTDIR", specs[0].outdir))
    workers = max(1, int(os.environ.get("RLABM_THREADS", "1")))
    raws = [c for c, _ in children]
    if workers == 1:
        dirs = [_run_child(r, outdir) for r in raws]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            dirs = list(pool.map(_run_child, raws, [outdir] * len(raws)))
    index = [{"run_id": c["run_id"], "params": p, "dir": d} for (c, p), d in zip(children, dirs)]
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "sweep.json").write_text(json.dumps({"sweep": sweep, "children": index}, indent=2, sort_keys=True) + "\n")
    for d in dirs:
        print(d)
    return 0


def _find_metric_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_file():
            files.append(p)
        elif (p / "metrics.csv").is_file():
            files.append(p / "metrics.csv")
        elif p.is_dir():
            files.extend(sorted(p.glob("*/metrics.csv")))
        else:
            raise FileNotFoundError(p)
    if not files:
        raise FileNotFoundError(f"no metrics.csv under {', '.join(map(str, paths))}")
    return files


def cmd_report(args) -> int:
    """Concatenate metrics tables (one row per run, trial, step, metric) and
    summarise each (run, metric) with mean, spread and a 95% t-interval."""
    files = _find_metric_files(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = [MetricsTable.read_csv(f) for f in files]
    with open(out / "rows.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsTable.HEADER)
        for t in tables:
            for row in t.rows:
                w.writerow([*row[:4], repr(row[4])])
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "metric", "n", "mean", "std", "min", "max", "ci_low", "ci_high"])
        for t in tables:
            for metric in t.metrics():
                v = t.values(metric)
                m, lo, hi = mean_ci(v)
                sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
                w.writerow([t.run_id, metric, len(v), repr(m), repr(sd), repr(float(v.min())), repr(float(v.max())), repr(lo), repr(hi)])
    print(out)
    return 0


def cmd_validate(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    if isinstance(raw, dict) and "grid" in raw:
        for child, _ in expand_sweep(raw):
            ExperimentSpec.from_dict(child)
    else:
        ExperimentSpec.from_dict(raw)
    print(f"{args.spec}: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlabm", description="RL agents in agent-based models")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add_spec(sp, seed=True):
        sp.add_argument("--spec", required=True, help="experiment spec (JSON)")
        if seed:
            sp.add_argument("--seed", type=int, help="replace the spec file's seed list with this single seed")
        sp.add_argument("--outdir", help="output root (default: spec outdir or $RLABM_OUTDIR)")

    for name in ("run", "train"):
        sp = sub.add_parser(name, help="execute an experiment spec")
        add_spec(sp)
        sp.add_argument("--run-id", help="override the run id")
        sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("eval", help="evaluate a saved minority-game policy on fresh populations")
    add_spec(sp)
    sp.add_argument("--policy", required=True, help="policy.bin from a training run")
    sp.add_argument("--populations", type=int, help="number of fresh populations")
    sp.add_argument("--run-id", help="override the run id")
    sp.set_defaults(func=cmd_eval)
    sp = sub.add_parser("sweep", help="expand a parameter grid into child runs")
    add_spec(sp)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("report", help="aggregate metrics tables into summary CSVs")
    sp.add_argument("runs", nargs="+", help="run directories, output roots or metrics.csv files")
    sp.add_argument("--out", default="report", help="output directory")
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("validate-config", help="check a spec or sweep file")
    sp.add_argument("spec")
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
