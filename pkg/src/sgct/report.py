"""Post-processing of run artifacts into plot-ready tables.

Everything here reads the CSV/JSON files written by ``sgct run``; nothing
touches the solver.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptive import RunRecord
from .combination import MultiIndex


class ReportError(RuntimeError):
    pass


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_records(path, records: Sequence[RunRecord], timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RunRecord.FIELDS)
        for r in records:
            w.writerow(r.row(timing))


_INT_FIELDS = {"iteration", "solves", "active_dims", "max_lx", "max_ly", "max_m"}


def read_records(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"missing run log {path}")
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, csv.Error) as exc:
        raise ReportError(f"cannot read {path}: {exc}") from exc
    if not rows or set(RunRecord.FIELDS) - set(rows[0]):
        raise ReportError(f"{path} is not a run log (missing columns)")
    out = []
    try:
        for r in rows:
            rec = {}
            for k in RunRecord.FIELDS:
                v = r[k]
                if k == "index":
                    rec[k] = tuple(json.loads(v))
                elif k in _INT_FIELDS:
                    rec[k] = int(v)
                else:
                    rec[k] = float(v) if v != "" else None
            out.append(rec)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ReportError(f"corrupt row in {path}: {exc}") from exc
    its = [r["iteration"] for r in out]
    if any(b <= a for a, b in zip(its, its[1:])):
        raise ReportError(f"{path}: iterations not strictly increasing")
    return out


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    start: int  # first iteration in the window
    end: int  # last iteration in the window
    points: int


def tail_window(iterations: Sequence[int], start: int | None = None, end: int | None = None,
                fraction: float = 0.5) -> tuple[int, int]:
    """Window bounds; by default the last ``fraction`` of the iterations."""
    last = int(max(iterations))
    if end is None:
        end = last
    if start is None:
        start = int(math.floor(end * (1.0 - fraction)))
    if start > end:
        raise ReportError(f"empty slope window [{start}, {end}]")
    return int(start), int(end)


def fit_slope(records: Sequence[dict], start: int, end: int, x: str = "cumulative_cost",
              y: str = "l2_error") -> SlopeFit:
    """Least-squares slope of log(y) against log(x) over iterations in [start, end]."""
    pts = [(r[x], r[y]) for r in records if start <= r["iteration"] <= end
           and r[y] is not None and r[y] > 0 and r[x] > 0]
    if len(pts) < 2:
        raise ReportError(f"fewer than two usable points for the slope in [{start}, {end}]")
    lx, ly = np.log(np.array(pts).T)
    slope, intercept = np.polyfit(lx, ly, 1)
    return SlopeFit(float(slope), float(intercept), start, end, len(pts))


def cost_to_reach(records: Sequence[dict], target: float) -> float | None:
    """Cumulative cost at the first iteration whose error is at most ``target``."""
    for r in records:
        if r["l2_error"] is not None and r["l2_error"] <= target:
            return r["cumulative_cost"]
    return None


def common_targets(runs: Sequence[Sequence[dict]], count: int = 8) -> np.ndarray:
    """Log-spaced error targets inside the range every run attains."""
    lo = max(min(r["l2_error"] for r in recs if r["l2_error"] is not None) for recs in runs)
    hi = min(max(r["l2_error"] for r in recs if r["l2_error"] is not None) for recs in runs)
    if not (lo < hi):
        return np.array([])
    return np.exp(np.linspace(np.log(hi), np.log(lo), count + 2)[1:-1])


def quad_levels(indices: Iterable[MultiIndex]) -> list[int]:
    """Largest quadrature level per parameter dimension (list position k is y_{k+1})."""
    out: list[int] = []
    for idx in indices:
        for k, v in enumerate(idx.ly):
            if k >= len(out):
                out.append(0)
            out[k] = max(out[k], v)
    return out


def projection(indices: Iterable[MultiIndex]) -> list[list[int]]:
    """(l_x, max l_y, effective truncation) per index, for 3D scatter plots."""
    return [[i.lx, max(i.ly, default=0), i.effective_truncation] for i in sorted(indices)]


def load_index_set(path, absolute: bool = False, which: str = "all") -> list[MultiIndex]:
    """Index set from ``index_set.json``, a snapshot or a reference set.

    ``which="old"`` keeps only the selected indices (the old set), which is
    what the level and activation plots describe; the default returns every
    evaluated index. With ``absolute`` the stored ``level_shift`` is added to
    l_x, so sets from pinned-grid runs are expressed in unshifted levels.
    """
    if which not in ("all", "old"):
        raise ValueError(f"which must be 'all' or 'old', got {which!r}")
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read index set {path}: {exc}") from exc
    if which == "old":
        if "old" not in data:
            raise ReportError(f"{path} does not record the selected (old) set")
        rows = data["old"]
    elif "indices" in data:
        rows = data["indices"]
    elif "old" in data:
        rows = data["old"] + data.get("active", [])
    else:
        raise ReportError(f"{path} does not contain an index set")
    shift = int(data.get("level_shift", 0)) if absolute else 0
    out = [MultiIndex.from_tuple(t) for t in rows]
    return [MultiIndex(i.lx + shift, i.ly) for i in out] if shift else out
