"""Command-line interface: ``sgct {kl,run,reference,report}``.

Failures print a one-line JSON object ``{"error", "message", "command"}`` on
stderr and exit non-zero (2 for configuration problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report as rep
from .adaptive import Checkpointer, RunRecord, run
from .combination import (
    EvalCache,
    MultiIndex,
    combination_coefficients,
    combine,
    downward_closure,
    full_grid_eval,
    index_set_to_json,
    norm,
)
from .config import ConfigError, RunConfig
from .fem import GridFunction

log = logging.getLogger("sgct")


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _save_value(value, stem: Path) -> Path:
    if isinstance(value, GridFunction):
        path = stem.with_suffix(".bin")
        value.save(path)
    else:
        path = stem.with_suffix(".json")
        _json_dump(path, {"value": float(value)})
    return path


def _load_value(path: Path):
    if path.suffix == ".json":
        return float(json.loads(path.read_text())["value"])
    return GridFunction.load(path)


# -- kl ---------------------------------------------------------------------------------------


def cmd_kl(cfg: RunConfig, args) -> dict:
    t0 = time.perf_counter()
    kl, hit, cache_dir = cfg.kl()
    out = Path(args.out) if args.out else cfg.path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    lam = kl.eigenvalues
    total = cfg["field"]["sigma2"]  # trace of the covariance operator on the unit square
    rep.write_csv(
        out / "kl_eigenvalues.csv",
        ("k", "eigenvalue", "cumulative_fraction"),
        ((k + 1, float(v), float(c)) for k, (v, c) in enumerate(zip(lam, np.cumsum(lam) / total))),
    )
    dominant = int(np.sum(lam > 1e-8 * lam[0])) if lam[0] > 0 else 0
    summary = {
        "cache_dir": str(cache_dir),
        "cache_hit": hit,
        "num_terms": kl.num_terms,
        "grid_points_per_side": kl.n_side,
        "lambda_first": float(lam[0]),
        "lambda_last": float(lam[-1]),
        "dominant_terms": dominant,
        "captured_variance_fraction": float(lam.sum() / total),
        "table": str(out / "kl_eigenvalues.csv"),
    }
    if cfg["output"]["timing"]:
        summary["seconds"] = round(time.perf_counter() - t0, 3)
    return summary


# -- reference ----------------------------------------------------------------------------------


def build_reference(cfg: RunConfig, recipe: dict, kl=None, cache: EvalCache | None = None):
    """Evaluate the combination technique on the fixed index set a recipe describes.

    Recipes: ``anchor`` ({0}), ``index_set`` (JSON file ``path``) or ``adaptive``
    (index set of a longer run with its own ``max_iterations`` and
    ``max_spatial_level``). Every recipe may list further index-set files under
    ``include``; the final set is the downward closure of the union, so a
    reference built with a study's index set included dominates that study.
    Included sets from pinned-grid runs are mapped to absolute spatial levels.
    """
    if kl is None:
        kl, _, _ = cfg.kl()
    problem = cfg.problem(kl)
    problem.level_shift = 0  # references live on absolute spatial levels
    cache = cache if cache is not None else EvalCache()
    kind = recipe["kind"]
    indices: set[MultiIndex] = {MultiIndex()}
    if kind == "index_set":
        indices |= set(rep.load_index_set(cfg.path(recipe["path"]), absolute=True))
    elif kind == "adaptive":
        stopping = cfg.stopping()
        stopping = replace(stopping, max_iterations=int(recipe.get("max_iterations", stopping.max_iterations)))
        cap = recipe.get("max_spatial_level")
        res = run(problem, cfg.cost_model(), stopping, int(recipe.get("buffer", cfg["adaptive"]["buffer"])),
                  cache=cache, max_spatial_level=None if cap is None else int(cap))
        indices |= set(res.indices)
    for p in recipe.get("include", []):
        indices |= set(rep.load_index_set(cfg.path(p), absolute=True))
    indices = downward_closure(indices)
    for idx in sorted(indices):
        full_grid_eval(idx, problem, cache)
    alpha = combination_coefficients(indices)
    values = [combine(indices, alpha, cache, qoi=q) for q in range(len(problem.qois))]
    return values, sorted(indices), alpha, cache


def cmd_reference(cfg: RunConfig, args) -> dict:
    recipe = cfg["reference"]["recipe"]
    if recipe is None:
        raise ConfigError("reference.recipe is not configured")
    t0 = time.perf_counter()
    values, indices, alpha, cache = build_reference(cfg, recipe)
    target = Path(args.out) if args.out else cfg.path(cfg["output"]["dir"]) / "reference.bin"
    target.parent.mkdir(parents=True, exist_ok=True)
    path = _save_value(values[0], target.with_suffix(""))
    _json_dump(target.with_name(target.stem + "_index_set.json"), index_set_to_json(indices, alpha))
    summary = {
        "reference": str(path),
        "indices": len(indices),
        "max_lx": max(i.lx for i in indices),
        "max_ly": max((max(i.ly) for i in indices if i.ly), default=0),
        "max_m": max(i.effective_truncation for i in indices),
        "solves": cache.solves,
        "norm": norm(values[0]),
    }
    if cfg["output"]["timing"]:
        summary["seconds"] = round(time.perf_counter() - t0, 3)
    return summary


def _configured_reference(cfg: RunConfig, out: Path, kl):
    ref = cfg["reference"]
    if ref["path"] is not None:
        return _load_value(cfg.path(ref["path"]))
    if ref["value"] is not None:
        return float(ref["value"])
    if ref["recipe"] is not None:
        values, indices, alpha, _ = build_reference(cfg, ref["recipe"], kl)
        _save_value(values[0], out / "reference")
        _json_dump(out / "reference_index_set.json", index_set_to_json(indices, alpha))
        return values[0]
    return None


# -- run --------------------------------------------------------------------------------------------


def cmd_run(cfg: RunConfig, args) -> dict:
    t0 = time.perf_counter()
    out = Path(args.out) if args.out else cfg.path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    timing = bool(cfg["output"]["timing"])
    kl, _, _ = cfg.kl()
    problem = cfg.problem(kl)
    reference = _configured_reference(cfg, out, kl)
    if isinstance(reference, GridFunction) and reference.mesh.offset != problem.mesh_offset:
        raise ConfigError("reference mesh offset differs from fem.mesh_offset")
    ad = cfg["adaptive"]
    snap_every = int(ad["snapshot_every"])
    snap_dir = out / "snapshots"
    if snap_every:
        snap_dir.mkdir(exist_ok=True)

    def snapshot(rec: RunRecord, state):
        if snap_every and rec.iteration % snap_every == 0:
            dims = state.tracked_dims
            _json_dump(snap_dir / f"iter_{rec.iteration:06d}.json", {
                "iteration": rec.iteration,
                "dims": dims,
                "level_shift": problem.level_shift,
                "old": [list(i.as_tuple(dims)) for i in sorted(state.old)],
                "active": [list(i.as_tuple(dims)) for i in sorted(state.active)],
            })
        if rec.iteration and rec.iteration % max(snap_every, 1) == 0:
            log.info("iteration %d: eta=%.3e active dims=%d solves=%d", rec.iteration,
                     rec.global_profit, rec.active_dims, rec.solves)

    every = int(ad["checkpoint_every"])
    checkpoint = Checkpointer(out / "checkpoint", every) if every else None
    if args.resume and checkpoint is None:
        raise ConfigError("--resume needs adaptive.checkpoint_every > 0")
    cap = ad["max_spatial_level"]
    res = run(
        problem,
        cfg.cost_model(),
        cfg.stopping(),
        int(ad["buffer"]),
        max_spatial_level=None if cap is None else int(cap),
        reference=reference,
        callback=snapshot,
        checkpoint=checkpoint,
        resume=bool(args.resume),
    )
    rep.write_records(out / "records.csv", res.records, timing)
    iset = index_set_to_json(res.indices, res.coefficients)
    iset.update({"mesh_offset": problem.mesh_offset, "level_shift": problem.level_shift,
                 "old": [list(i.as_tuple(iset["dims"])) for i in sorted(res.state.old)]})
    _json_dump(out / "index_set.json", iset)
    results = {}
    for q, spec in enumerate(problem.qois):
        value = res.result if q == 0 else combine(res.indices, res.coefficients, res.cache, qoi=q)
        stem = out / ("solution" if q == 0 else f"solution_{spec.label}")
        results[spec.label] = str(_save_value(value, stem))
        if isinstance(value, GridFunction) and cfg["output"]["solution_csv"]:
            value.to_csv(stem.with_suffix(".csv"))
    last = res.records[-1]
    summary = {
        "iterations": last.iteration,
        "indices": len(res.indices),
        "active_dims": last.active_dims,
        "max_lx": last.max_lx,
        "max_ly": last.max_ly,
        "max_m": last.max_m,
        "solves": last.solves,
        "cumulative_cost": last.cumulative_cost,
        "global_profit": last.global_profit,
        "l2_error": last.l2_error,
        "result_norm": norm(res.result),
        "results": results,
        "records": str(out / "records.csv"),
    }
    if timing:
        summary["seconds"] = round(time.perf_counter() - t0, 3)
    _json_dump(out / "summary.json", summary)
    return summary


# -- report ---------------------------------------------------------------------------------------------


def _labels(dirs: list[Path], given: str | None) -> list[str]:
    if given:
        labels = given.split(",")
        if len(labels) != len(dirs):
            raise ConfigError("--labels must name every run directory")
        return labels
    labels, seen = [], {}
    for d in dirs:
        name = d.resolve().name or "run"
        seen[name] = seen.get(name, 0) + 1
        labels.append(name if seen[name] == 1 else f"{name}_{seen[name]}")
    return labels


def _snapshot_indices(run_dir: Path, iteration: int | None):
    """Selected (old) set at the final iteration or the latest snapshot <= ``iteration``."""
    if iteration is None:
        return rep.load_index_set(run_dir / "index_set.json", which="old"), None
    snaps = sorted((run_dir / "snapshots").glob("iter_*.json"))
    usable = [p for p in snaps if int(p.stem.split("_")[1]) <= iteration]
    if not usable:
        raise rep.ReportError(f"{run_dir}: no snapshot at or before iteration {iteration}")
    path = usable[-1]
    return rep.load_index_set(path, which="old"), int(path.stem.split("_")[1])


def cmd_report(args) -> dict:
    dirs = [Path(d) for d in args.runs]
    labels = _labels(dirs, args.labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = [rep.read_records(d / "records.csv") for d in dirs]
    slopes, summary = [], {"runs": {}}
    for label, d, recs in zip(labels, dirs, runs):
        rep.write_csv(out / f"{label}_error.csv",
                      ("iteration", "cumulative_cost", "l2_error", "error_estimate", "global_profit"),
                      ((r["iteration"], r["cumulative_cost"], r["l2_error"], r["error_estimate"],
                        r["global_profit"]) for r in recs))
        rep.write_csv(out / f"{label}_levels.csv", ("iteration", "max_lx", "max_ly", "max_m", "active_dims"),
                      ((r["iteration"], r["max_lx"], r["max_ly"], r["max_m"], r["active_dims"]) for r in recs))
        indices, snap_it = _snapshot_indices(d, args.snapshot)
        rep.write_csv(out / f"{label}_quad_levels.csv", ("dimension", "max_level"),
                      ((k + 1, v) for k, v in enumerate(rep.quad_levels(indices))))
        _json_dump(out / f"{label}_index_set.json", {
            "iteration": snap_it if snap_it is not None else recs[-1]["iteration"],
            "columns": ["l_x", "max_l_y", "m"],
            "points": rep.projection(indices),
        })
        info = {"iterations": recs[-1]["iteration"], "active_dims": recs[-1]["active_dims"]}
        if any(r["l2_error"] is not None for r in recs):
            start, end = rep.tail_window([r["iteration"] for r in recs], args.tail_start, args.tail_end,
                                         args.tail_fraction)
            fit = rep.fit_slope(recs, start, end)
            slopes.append((label, fit.start, fit.end, fit.points, fit.slope, fit.intercept))
            info.update({"slope": fit.slope, "tail_start": fit.start, "tail_end": fit.end,
                         "final_error": recs[-1]["l2_error"]})
        summary["runs"][label] = info
    if slopes:
        rep.write_csv(out / "slopes.csv", ("run", "tail_start", "tail_end", "points", "slope", "intercept"), slopes)
    if len(runs) > 1:
        common = min(r[-1]["iteration"] for r in runs)
        by_it = [{r["iteration"]: r for r in recs} for recs in runs]
        rep.write_csv(out / "active_dims.csv", ("iteration", *labels),
                      ((it, *(b[it]["active_dims"] for b in by_it)) for it in range(common + 1)
                       if all(it in b for b in by_it)))
        if all(any(r["l2_error"] is not None for r in recs) for recs in runs):
            targets = rep.common_targets(runs, args.targets)
            rep.write_csv(out / "cost_to_target.csv", ("target", *labels),
                          ((t, *(rep.cost_to_reach(recs, t) for recs in runs)) for t in targets))
    summary["out"] = str(out)
    return summary


# -- entry point ------------------------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgct", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", nargs="?", help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. adaptive.max_iterations=600")
        sp.add_argument("--threads", type=int, help="cap on worker threads")
        sp.add_argument("--no-timing", action="store_true", help="write 0 for wall-clock columns")
        return sp

    k = with_config(sub.add_parser("kl", help="compute or load the KL expansion, write the eigenvalue table"))
    k.add_argument("--out", help="output directory (default output.dir)")
    r = with_config(sub.add_parser("run", help="run the adaptive combination technique"))
    r.add_argument("--out", help="output directory (default output.dir)")
    r.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    f = with_config(sub.add_parser("reference", help="evaluate the configured reference recipe"))
    f.add_argument("--out", help="reference file (default <output.dir>/reference.bin)")
    rp = sub.add_parser("report", help="tables from one or more run directories")
    rp.add_argument("runs", nargs="+", help="run output directories")
    rp.add_argument("--out", default="report", help="report directory")
    rp.add_argument("--labels", help="comma-separated run labels")
    rp.add_argument("--tail-start", type=int, help="first iteration of the slope window")
    rp.add_argument("--tail-end", type=int, help="last iteration of the slope window")
    rp.add_argument("--tail-fraction", type=float, default=0.5,
                    help="window = last fraction of iterations when --tail-start is absent (default 0.5)")
    rp.add_argument("--snapshot", type=int, help="iteration for index-set projections (default: final set)")
    rp.add_argument("--targets", type=int, default=8, help="number of error targets for cost comparisons")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("sgct: %(message)s"))
    root = logging.getLogger("sgct")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root.propagate = False
    try:
        if args.command == "report":
            summary = cmd_report(args)
        else:
            overrides = list(args.overrides)
            if args.threads is not None:
                overrides.append(f"threads={args.threads}")
            if args.no_timing:
                overrides.append("output.timing=false")
            cfg = RunConfig.load(args.config, overrides)
            summary = {"kl": cmd_kl, "run": cmd_run, "reference": cmd_reference}[args.command](cfg, args)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc), "command": args.command}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
