"""Dimension-adaptive combination technique over space, quadrature and truncation.

Indices live in ``(l_x, l_y1, ..., l_yT)`` with ``T = M + buffer`` tracked
parameter dimensions: the ``M`` dimensions activated so far plus a fixed
number of not-yet-activated buffer dimensions that let the truncation grow.
The greedy loop moves the active index with the best benefit/cost ratio to
the old set and admits its forward neighbours.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .combination import (
    EvalCache,
    Evaluation,
    MultiIndex,
    Problem,
    combination_coefficients,
    combine,
    full_grid_eval,
    increment,
    lift,
    missing_backward,
    norm,
    unit,
)
from .fem import GridFunction, MeshLevel, prolong
from .quadrature import tensor_size

log = logging.getLogger(__name__)

TRUNC_MODES = ("highest_active", "count_active")
STOP_MODES = ("global_profit", "global_error", "work_budget", "successive_diff")
RECOMPUTE_EVERY = 100


@dataclass(frozen=True)
class CostModel:
    trunc_mode: str = "highest_active"
    spatial_exponent: int = 2

    def __post_init__(self):
        if self.trunc_mode not in TRUNC_MODES:
            raise ValueError(f"unknown truncation cost mode {self.trunc_mode!r}")


def cost(idx: MultiIndex, model: CostModel, offset: int = 2, level_shift: int = 0) -> float:
    """Work for ``P_l u``: FEM nodes x quadrature points x truncation cost.

    The truncation cost is the highest active dimension (or the number of
    active dimensions); it is 1 when no dimension is active.
    """
    nodes = (1 << (idx.lx + level_shift + offset)) + 1
    active = idx.active_dims
    if model.trunc_mode == "highest_active":
        trunc = max(active) if active else 1
    else:
        trunc = len(active) or 1
    return float(nodes**model.spatial_exponent * tensor_size(idx.ly) * trunc)


@dataclass(frozen=True)
class StoppingRule:
    mode: str = "global_profit"
    eps: float = 1e-6
    budget: float = math.inf
    zeta: int = 3
    max_iterations: int = 5000

    def __post_init__(self):
        if self.mode not in STOP_MODES:
            raise ValueError(f"unknown stopping mode {self.mode!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.mode == "work_budget" and not (math.isfinite(self.budget) and self.budget > 0):
            raise ValueError("work_budget needs a finite positive budget")
        if self.mode != "work_budget" and not self.eps > 0:
            raise ValueError("tolerance must be positive")


@dataclass
class Profit:
    error: float
    cost: float

    @property
    def eta(self) -> float:
        return self.error / self.cost


@dataclass
class RunRecord:
    iteration: int
    index: tuple
    error_estimate: float
    cost: float
    profit: float
    global_profit: float
    cumulative_cost: float
    solves: int
    wall_ms: float
    active_dims: int
    max_lx: int
    max_ly: int
    max_m: int
    l2_error: float | None = None

    FIELDS = (
        "iteration", "index", "error_estimate", "cost", "profit", "global_profit",
        "cumulative_cost", "solves", "wall_ms", "active_dims", "max_lx", "max_ly", "max_m", "l2_error",
    )

    def row(self, timing: bool = True) -> list[str]:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            if name == "index":
                out.append(json.dumps(list(v)).replace(" ", ""))
            elif name == "wall_ms" and not timing:
                out.append("0")
            elif v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.17g}")
            else:
                out.append(str(v))
        return out


@dataclass
class AdaptiveState:
    buffer: int = 5
    old: set = field(default_factory=set)
    active: set = field(default_factory=set)
    act: list = field(default_factory=list)
    profits: dict = field(default_factory=dict)
    eta_global: float = 0.0
    iteration: int = 0
    combined: object = None  # sum of increments over old | active
    selected: list = field(default_factory=list)

    def __post_init__(self):
        if not self.act:
            self.act = [False] * self.buffer

    @property
    def num_activated(self) -> int:
        return sum(self.act)

    @property
    def tracked_dims(self) -> int:
        return len(self.act)

    @property
    def index_set(self) -> set:
        return self.old | self.active

    def recompute_eta(self) -> float:
        self.eta_global = math.fsum(self.profits[i].eta for i in sorted(self.active))
        return self.eta_global

    def cumulative_cost(self) -> float:
        return math.fsum(self.profits[i].cost for i in sorted(self.index_set))


class AdaptiveError(RuntimeError):
    pass


def select(state: AdaptiveState) -> MultiIndex | None:
    """Active index of largest profit; ties go to the lexicographically smallest."""
    if not state.active:
        return None
    return min(state.active, key=lambda i: (-state.profits[i].eta, i.as_tuple()))


@dataclass
class _Context:
    problem: Problem
    cache: EvalCache
    model: CostModel
    max_spatial_level: int | None = None


def _evaluate(ctx: _Context, idx: MultiIndex):
    c = cost(idx, ctx.model, ctx.problem.mesh_offset, ctx.problem.level_shift)
    full_grid_eval(idx, ctx.problem, ctx.cache, cost=c)
    inc = increment(idx, ctx.problem, ctx.cache)
    return Profit(norm(inc), c), inc


def profit(idx: MultiIndex, problem: Problem, cache: EvalCache, model: CostModel) -> tuple[float, float, float]:
    """``(E, c, eta)`` with E the norm of the increment and c its cost."""
    p, _ = _evaluate(_Context(problem, cache, model), idx)
    return p.error, p.cost, p.eta


def _add(acc, value):
    if acc is None:
        return value.copy() if isinstance(value, GridFunction) else float(value)
    if isinstance(value, GridFunction):
        level = max(acc.mesh.level, value.mesh.level)
        mesh = MeshLevel(level, value.mesh.offset)
        out = prolong(acc, mesh).values.copy()
        out += prolong(value, mesh).values
        return GridFunction(mesh, out)
    return acc + value


def _admit(state: AdaptiveState, ctx: _Context, candidates: list[MultiIndex]):
    candidates = sorted(candidates)
    if ctx.problem.threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(ctx.problem.threads) as pool:
            results = list(pool.map(lambda j: _evaluate(ctx, j), candidates))
    else:
        results = [_evaluate(ctx, j) for j in candidates]
    added = None
    for j, (p, inc) in zip(candidates, results):
        state.active.add(j)
        state.profits[j] = p
        state.eta_global += p.eta
        state.combined = _add(state.combined, inc)
        added = _add(added, inc)
    return added


def expand(state: AdaptiveState, idx: MultiIndex, problem: Problem, cache: EvalCache,
           model: CostModel = CostModel(), max_spatial_level: int | None = None):
    """Admit forward neighbours of the freshly retired ``idx`` and grow the buffer.

    Returns the sum of the newly admitted increments (None if nothing entered).
    """
    return _expand(state, idx, _Context(problem, cache, model, max_spatial_level))


def _expand(state: AdaptiveState, idx: MultiIndex, ctx: _Context):
    candidates = []
    for k in range(1 + state.tracked_dims):
        if k == 0 and ctx.max_spatial_level is not None and idx.lx >= ctx.max_spatial_level:
            continue
        j = idx.shifted(k)
        key = j.as_tuple(state.tracked_dims)
        if all(j.shifted(i, -1) in state.old for i in range(len(key)) if key[i] > 0):
            candidates.append(j)
    added = _admit(state, ctx, candidates)
    newly = [n for n in idx.active_dims if n <= state.tracked_dims and not state.act[n - 1]]
    for n in newly:
        state.act[n - 1] = True
        state.act.append(False)
        extra = _admit(state, ctx, [unit(state.tracked_dims)])
        added = _add(added, extra) if added is not None else extra
    return added


@dataclass
class RunResult:
    indices: list
    coefficients: dict
    result: object
    records: list
    state: AdaptiveState
    cache: EvalCache


def _check_invariants(state: AdaptiveState, fresh=None):
    if state.old & state.active:
        raise AdaptiveError("old and active sets intersect")
    iset = state.index_set
    # members already present keep their backward neighbours, so checking
    # the fresh indices suffices between periodic full checks
    bad = missing_backward(iset if fresh is None else fresh, iset)
    if bad:
        raise AdaptiveError(f"index set lost downward closedness at {bad[0]}")


def _stop(rule: StoppingRule, state: AdaptiveState, diff_streak: int) -> bool:
    if rule.mode == "global_profit":
        return state.eta_global <= rule.eps
    if rule.mode == "global_error":
        return math.fsum(state.profits[i].error for i in sorted(state.active)) <= rule.eps
    if rule.mode == "work_budget":
        return state.cumulative_cost() >= rule.budget
    return diff_streak >= rule.zeta


def _error_against(value, reference) -> float | None:
    if reference is None or value is None:
        return None
    if isinstance(value, GridFunction):
        level = max(value.mesh.level, reference.mesh.level)
        mesh = MeshLevel(level, value.mesh.offset)
        return norm(GridFunction(mesh, prolong(value, mesh).values - prolong(reference, mesh).values))
    return abs(value - reference)


def _record(state: AdaptiveState, idx: MultiIndex, cache: EvalCache, t0: float, reference) -> RunRecord:
    p = state.profits[idx]
    iset = state.index_set
    return RunRecord(
        iteration=state.iteration,
        index=idx.as_tuple(state.tracked_dims),
        error_estimate=p.error,
        cost=p.cost,
        profit=p.eta,
        global_profit=state.eta_global,
        cumulative_cost=state.cumulative_cost(),
        solves=cache.solves,
        wall_ms=1e3 * (time.perf_counter() - t0),
        active_dims=state.num_activated,
        max_lx=max(i.lx for i in iset),
        max_ly=max((max(i.ly) for i in iset if i.ly), default=0),
        max_m=max(i.effective_truncation for i in iset),
        l2_error=_error_against(state.combined, reference),
    )


def _warn_saturation(state: AdaptiveState):
    last: dict[int, float] = {}
    for idx in state.selected:
        key = idx.as_tuple()
        nz = [k for k, v in enumerate(key) if v]
        if len(nz) != 1:
            continue
        k = nz[0]
        eta = state.profits[idx].eta
        if k in last and eta > last[k] and key[k] > 2:
            log.warning("profit along direction %d increased at %s (saturation assumption)", k, idx)
        last[k] = eta


def run(
    problem: Problem,
    model: CostModel = CostModel(),
    stopping: StoppingRule = StoppingRule(),
    buffer: int = 5,
    *,
    cache: EvalCache | None = None,
    max_spatial_level: int | None = None,
    reference=None,
    callback: Callable[[RunRecord, AdaptiveState], None] | None = None,
    checkpoint: "Checkpointer | None" = None,
    resume: bool = False,
    check_invariants: bool = True,
) -> RunResult:
    """Greedy adaptive construction, then the combination over ``old | active``.

    ``reference`` (grid function or scalar) adds an L2 error column to the
    records. ``max_spatial_level`` caps ``l_x``.
    """
    if buffer < 1:
        raise ValueError("buffer width must be >= 1")
    cache = cache if cache is not None else EvalCache()
    ctx = _Context(problem, cache, model, max_spatial_level)
    t0 = time.perf_counter()
    if resume and checkpoint is not None and checkpoint.exists():
        state, records, diff_streak = checkpoint.load(cache)
    else:
        state = AdaptiveState(buffer=buffer)
        root = MultiIndex()
        _admit(state, ctx, [root])
        records = [_record(state, root, cache, t0, reference)]
        diff_streak = 0
        if callback:
            callback(records[-1], state)

    while state.active and state.iteration < stopping.max_iterations:
        if _stop(stopping, state, diff_streak):
            break
        idx = select(state)
        state.active.remove(idx)
        state.old.add(idx)
        state.selected.append(idx)
        state.eta_global -= state.profits[idx].eta
        state.iteration += 1
        try:
            added = _expand(state, idx, ctx)
        except Exception as exc:
            raise AdaptiveError(f"iteration {state.iteration}, index {idx}: {exc}") from exc
        if state.iteration % RECOMPUTE_EVERY == 0:
            state.recompute_eta()
        if stopping.mode == "successive_diff":
            change = norm(added) if added is not None else 0.0
            diff_streak = diff_streak + 1 if change < stopping.eps else 0
        if check_invariants:
            full = state.iteration % RECOMPUTE_EVERY == 0
            _check_invariants(state, None if full else state.active | {idx})
        records.append(_record(state, idx, cache, t0, reference))
        if callback:
            callback(records[-1], state)
        if checkpoint is not None and state.iteration % checkpoint.every == 0:
            checkpoint.save(state, records, diff_streak, cache)

    if check_invariants:
        _check_invariants(state)
    _warn_saturation(state)
    indices = sorted(state.index_set)
    coeffs = combination_coefficients(indices)
    result = combine(indices, coeffs, cache)
    return RunResult(indices, coeffs, result, records, state, cache)


def _index_list(indices) -> list:
    return [list(i.as_tuple()) for i in sorted(indices)]


class Checkpointer:
    """Persists the adaptive state and every cached evaluation under ``directory``."""

    def __init__(self, directory, every: int = 50):
        self.dir = Path(directory)
        self.every = int(every)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "evals").mkdir(exist_ok=True)

    @property
    def state_path(self) -> Path:
        return self.dir / "state.json"

    def exists(self) -> bool:
        return self.state_path.exists()

    @staticmethod
    def _name(idx: MultiIndex) -> str:
        return "e_" + "_".join(map(str, idx.as_tuple())) + ".npz"

    def _save_eval(self, idx: MultiIndex, ev: Evaluation):
        path = self.dir / "evals" / self._name(idx)
        if path.exists():
            return
        arrays = {}
        meta = []
        for q, v in enumerate(ev.values):
            if isinstance(v, GridFunction):
                arrays[f"v{q}"] = v.values
                meta.append({"level": v.mesh.level, "offset": v.mesh.offset})
            else:
                arrays[f"v{q}"] = np.array(v)
                meta.append(None)
        tmp = path.with_name(path.stem + ".tmp.npz")
        np.savez(tmp, meta=json.dumps({"values": meta, "cost": ev.cost, "solves": ev.solves,
                                       "seconds": ev.seconds}), **arrays)
        tmp.replace(path)

    def _load_eval(self, idx: MultiIndex) -> Evaluation:
        with np.load(self.dir / "evals" / self._name(idx), allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            values = []
            for q, m in enumerate(meta["values"]):
                arr = data[f"v{q}"]
                values.append(GridFunction(MeshLevel(m["level"], m["offset"]), arr.copy())
                              if m is not None else float(arr))
        return Evaluation(tuple(values), meta["cost"], meta["solves"], meta["seconds"])

    def save(self, state: AdaptiveState, records: list, diff_streak: int, cache: EvalCache):
        manifest = cache.indices()
        for idx in manifest:
            self._save_eval(idx, cache.get(idx))
        comb = state.combined
        if isinstance(comb, GridFunction):
            np.savez(self.dir / "combined.npz", values=comb.values, level=comb.mesh.level,
                     offset=comb.mesh.offset)
        payload = {
            "buffer": state.buffer,
            "old": _index_list(state.old),
            "active": _index_list(state.active),
            "act": state.act,
            "selected": [list(i.as_tuple()) for i in state.selected],
            "profits": [[list(i.as_tuple()), p.error, p.cost] for i, p in sorted(state.profits.items())],
            "eta_global": state.eta_global,
            "iteration": state.iteration,
            "combined_scalar": None if isinstance(comb, GridFunction) else comb,
            "diff_streak": diff_streak,
            "solves": cache.solves,
            "manifest": _index_list(manifest),
            "records": [asdict(r) for r in records],
        }
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload))
        tmp.replace(self.state_path)

    def load(self, cache: EvalCache):
        payload = json.loads(self.state_path.read_text())
        for t in payload["manifest"]:
            idx = MultiIndex.from_tuple(t)
            ev = self._load_eval(idx)
            cache.get_or_compute(idx, lambda ev=ev: ev)
        cache.solves = payload["solves"]
        state = AdaptiveState(buffer=payload["buffer"], act=list(payload["act"]))
        state.old = {MultiIndex.from_tuple(t) for t in payload["old"]}
        state.active = {MultiIndex.from_tuple(t) for t in payload["active"]}
        state.selected = [MultiIndex.from_tuple(t) for t in payload["selected"]]
        state.profits = {MultiIndex.from_tuple(t): Profit(e, c) for t, e, c in payload["profits"]}
        state.eta_global = payload["eta_global"]
        state.iteration = payload["iteration"]
        if payload["combined_scalar"] is not None:
            state.combined = payload["combined_scalar"]
        else:
            with np.load(self.dir / "combined.npz") as data:
                state.combined = GridFunction(MeshLevel(int(data["level"]), int(data["offset"])),
                                              data["values"].copy())
        records = [RunRecord(**{**r, "index": tuple(r["index"])}) for r in payload["records"]]
        return state, records, payload["diff_streak"]
