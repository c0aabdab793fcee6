"""``prepattack`` command line: serve, attack, extract, sweep, report.

Exit codes: 0 success, 2 argument or config error, 3 scenario failure,
4 partial extraction.
"""

import csv
import glob
import itertools
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor

import click
import numpy as np
import yaml

from . import scenarios as sc
from .extraction import ExtractionReport
from .imagecore import to_png
from .oracle import OracleError

log = logging.getLogger("prepattack")

EXIT_OK, EXIT_ARGS, EXIT_FAILURE, EXIT_PARTIAL = 0, 2, 3, 4

RUN_COLUMNS = ("scenario", "seed", "sample", "preprocessor", "method", "budget", "distance", "queries", "success")
SUMMARY_COLUMNS = ("scenario", "method", "runs", "failed", "mean_distance", "std_distance",
                   "mean_queries", "ratio_to_unaware")
TRACE_COLUMNS = ("scenario", "method", "seed", "sample", "queries", "best_distance")
SWEEP_COLUMNS = ("scenario", "method", "gamma", "alpha", "B") + SUMMARY_COLUMNS[2:] + ("best",)
EXTRACT_SUMMARY_COLUMNS = ("scenario", "victims", "accuracy", "mean_queries", "std_queries")


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})
    log.info("wrote %s", path)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _load_doc(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise click.UsageError(f"config {path} must be a mapping")
    return doc


def _pool(workers, endpoint):
    if workers <= 1:
        return None
    # HTTP runs wait on the network; local runs need separate processes
    return ThreadPoolExecutor(workers) if endpoint else ProcessPoolExecutor(workers)


def _map(pool, fn, jobs):
    if pool is None:
        return [fn(*j) for j in jobs]
    with pool:
        return list(pool.map(fn, *zip(*jobs)))


# --- attack --------------------------------------------------------------------------------


def _attack_job(scn, method, seed, sample, endpoint):
    row, res = sc.run_attack(scn, method, seed, sample, endpoint)
    return row, res.x_adv, res.trace


def _run_attacks(scn, endpoint, workers):
    jobs = [(scn, m, s, k, endpoint) for m in scn.methods for s in scn.seeds for k in range(scn.samples)]
    results = _map(_pool(workers, endpoint), _attack_job, jobs)
    results.sort(key=lambda r: (r[0]["method"], r[0]["seed"], r[0]["sample"]))
    return results


def _save_artifacts(out, results):
    adv_dir = os.path.join(out, "adv")
    os.makedirs(adv_dir, exist_ok=True)
    for row, x_adv, _ in results:
        stem = f"{row['scenario']}_{row['method']}_s{row['seed']}_{row['sample']}"
        with open(os.path.join(adv_dir, stem + ".png"), "wb") as fh:
            fh.write(to_png(x_adv))
        np.save(os.path.join(adv_dir, stem + ".npy"), x_adv)


def _attack_outputs(scn, results, out, strict):
    rows = [r for r, _, _ in results]
    trace = [t for r, _, tr in results for t in sc.trace_rows(r, tr, scn.checkpoint_list)]
    _write_csv(os.path.join(out, f"{scn.name}_runs.csv"), RUN_COLUMNS, rows)
    _write_csv(os.path.join(out, f"{scn.name}_trace.csv"), TRACE_COLUMNS, trace)
    summary = sc.summarize(rows, strict)
    _write_csv(os.path.join(out, f"{scn.name}_summary.csv"), SUMMARY_COLUMNS, summary)
    _save_artifacts(out, results)
    return rows, summary


def _echo_summary(summary):
    for s in summary:
        click.echo(
            f"{s['scenario']} {s['method']}: mean {s['mean_distance']:.4f} +- {s['std_distance']:.4f} "
            f"over {s['runs'] - s['failed']}/{s['runs']} runs, ratio to unaware {s['ratio_to_unaware']:.3f}"
        )


# --- commands --------------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Preprocessor-aware hard-label attacks and preprocessing extraction."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


_config_opt = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                           help="Scenario or service config (YAML).")
_seed_opt = click.option("--seed", type=int, default=None, help="First seed; overrides the config.")
_out_opt = click.option("--out", type=click.Path(file_okay=False), default="results", show_default=True)
_endpoint_opt = click.option("--endpoint", default=None, help="Victim service URL; in-process when omitted.")
_workers_opt = click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)


@main.command()
@_config_opt
def serve(config):
    """Run the victim service until interrupted."""
    from .service import load_service_config, serve as run_service

    if not os.path.isfile(config):
        raise click.UsageError(f"config file {config} does not exist")
    try:
        cfg = load_service_config(config)
    except (ValueError, KeyError, TypeError, yaml.YAMLError) as exc:
        raise click.UsageError(f"bad service config: {exc}") from exc
    try:
        run_service(cfg, ready=lambda url: click.echo(f"ready {url}", err=True))
    except OSError as exc:
        click.echo(f"cannot bind {cfg.host}:{cfg.port}: {exc}", err=True)
        sys.exit(EXIT_FAILURE)


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--budget", type=click.IntRange(min=1), default=None, help="Per-run query budget.")
@_endpoint_opt
@click.option("--strict", is_flag=True, help="Count failed runs in the aggregates and exit 3 on any failure.")
@_workers_opt
def attack(config, seed, out, budget, endpoint, strict, workers):
    """Run every configured method on every seed and write CSVs plus adversarial images."""
    doc = _load_doc(config)
    try:
        scn = sc.AttackScenario.from_dict(doc, seed=seed, budget=budget)
    except (ValueError, KeyError, TypeError) as exc:
        raise click.UsageError(f"bad attack scenario: {exc}") from exc
    os.makedirs(out, exist_ok=True)
    try:
        results = _run_attacks(scn, endpoint, workers)
    except OracleError as exc:
        click.echo(f"victim unreachable: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    rows, summary = _attack_outputs(scn, results, out, strict)
    _echo_summary(summary)
    if strict and any(not r["success"] for r in rows):
        sys.exit(EXIT_FAILURE)


def _extract_job(scn, seed, endpoint, budget):
    report, partial = sc.run_extraction(scn, seed, endpoint, budget)
    return seed, report, partial


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--budget", type=click.IntRange(min=1), default=None, help="Query cap per victim.")
@_endpoint_opt
@click.option("--strict", is_flag=True, help="Exit 3 when any identification is wrong.")
@_workers_opt
def extract(config, seed, out, budget, endpoint, strict, workers):
    """Identify the preprocessing of each seeded victim."""
    doc = _load_doc(config)
    try:
        scn = sc.ExtractionScenario.from_dict(doc, seed=seed)
    except (ValueError, KeyError, TypeError) as exc:
        raise click.UsageError(f"bad extraction scenario: {exc}") from exc
    os.makedirs(out, exist_ok=True)
    if endpoint:
        from .oracle import HttpOracle

        if not HttpOracle(endpoint, retries=0).healthy():
            click.echo(f"victim unreachable at {endpoint}", err=True)
            sys.exit(EXIT_FAILURE)
    try:
        results = _map(_pool(workers, endpoint), _extract_job, [(scn, s, endpoint, budget) for s in scn.seeds])
    except OracleError as exc:
        click.echo(f"victim unreachable: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    results.sort(key=lambda r: r[0])
    rows = [{"scenario": scn.name, "seed": s, **rep.row()} for s, rep, _ in results]
    _write_csv(os.path.join(out, f"{scn.name}_extract.csv"), ("scenario", "seed") + ExtractionReport.CSV_COLUMNS, rows)
    summary = {"scenario": scn.name, **sc.extraction_summary(rows)}
    _write_csv(os.path.join(out, f"{scn.name}_extract_summary.csv"), EXTRACT_SUMMARY_COLUMNS, [summary])
    click.echo(
        f"{scn.name}: accuracy {summary['accuracy']:.3f}, queries "
        f"{summary['mean_queries']:.1f} +- {summary['std_queries']:.1f} over {summary['victims']} victims"
    )
    if any(partial for _, _, partial in results):
        sys.exit(EXIT_PARTIAL)
    if strict and summary["accuracy"] < 1.0:
        sys.exit(EXIT_FAILURE)


def _grid(doc):
    grid = doc.get("sweep")
    if not isinstance(grid, dict) or not grid:
        raise click.UsageError("sweep config needs a non-empty 'sweep' mapping of gamma/alpha/B lists")
    bad = set(grid) - {"gamma", "alpha", "B"}
    if bad:
        raise click.UsageError(f"unknown sweep keys {sorted(bad)}")
    axes = {}
    for key in ("gamma", "alpha", "B"):
        vals = grid.get(key)
        if vals is None:
            continue
        if not isinstance(vals, list) or not vals:
            raise click.UsageError(f"sweep.{key} must be a non-empty list")
        axes[key] = vals
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


@main.command()
@_config_opt
@_seed_opt
@_out_opt
@click.option("--budget", type=click.IntRange(min=1), default=None)
@_endpoint_opt
@click.option("--strict", is_flag=True)
@_workers_opt
def sweep(config, seed, out, budget, endpoint, strict, workers):
    """One attack aggregate per grid point; the lowest mean distance per method is marked best."""
    doc = _load_doc(config)
    points = _grid(doc)
    try:
        base = sc.AttackScenario.from_dict(doc, seed=seed, budget=budget)
    except (ValueError, KeyError, TypeError) as exc:
        raise click.UsageError(f"bad attack scenario: {exc}") from exc
    os.makedirs(out, exist_ok=True)
    rows = []
    for point in points:
        methods = {m: {**hp, **point} for m, hp in base.methods.items()}
        scn = sc.AttackScenario(**{**base.__dict__, "methods": methods})
        try:
            scn.check()
        except ValueError as exc:
            raise click.UsageError(f"grid point {point}: {exc}") from exc
        results = _run_attacks(scn, endpoint, workers)
        for s in sc.summarize([r for r, _, _ in results], strict):
            hp = scn.config_kwargs(s["method"])
            rows.append({**s, "gamma": hp.get("gamma", 10.0), "alpha": hp.get("alpha", 1.0),
                         "B": hp.get("B", 100), "best": 0})
    for method in {r["method"] for r in rows}:
        cands = [r for r in rows if r["method"] == method and math.isfinite(r["mean_distance"])]
        if cands:
            min(cands, key=lambda r: r["mean_distance"])["best"] = 1
    _write_csv(os.path.join(out, f"{base.name}_sweep.csv"), SWEEP_COLUMNS, rows)
    for r in rows:
        mark = " *" if r["best"] else ""
        click.echo(f"{r['method']} gamma={r['gamma']} alpha={r['alpha']} B={r['B']}: "
                   f"{r['mean_distance']:.4f}{mark}")


@main.command()
@_out_opt
@click.option("--strict", is_flag=True, help="Include failed runs in recomputed aggregates.")
def report(out, strict):
    """Recompute every summary from the per-run CSVs in ``--out`` and print it."""
    runs = sorted(glob.glob(os.path.join(out, "*_runs.csv")))
    extracts = sorted(glob.glob(os.path.join(out, "*_extract.csv")))
    if not runs and not extracts:
        raise click.UsageError(f"no *_runs.csv or *_extract.csv files in {out}")
    for path in runs:
        for s in sc.summarize(_read_csv(path), strict):
            click.echo(f"attack  {s['scenario']:<20} {s['method']:<12} mean {s['mean_distance']:.4f} "
                       f"std {s['std_distance']:.4f} ratio {s['ratio_to_unaware']:.3f}")
    for path in extracts:
        rows = _read_csv(path)
        s = sc.extraction_summary(rows)
        name = rows[0]["scenario"] if rows else os.path.basename(path)
        click.echo(f"extract {name:<20} accuracy {s['accuracy']:.3f} "
                   f"queries {s['mean_queries']:.1f} +- {s['std_queries']:.1f}")


if __name__ == "__main__":  # pragma: no cover
    main()
