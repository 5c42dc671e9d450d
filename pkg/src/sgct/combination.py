"""Multi-indices, combination coefficients, full-grid evaluations and increments.

A multi-index ``(l_x, l_y1, l_y2, ...)`` selects the FEM level ``l_x`` and a
Gauss-Hermite level per parameter. Trailing zero parameter levels are
dropped, which embeds every finite index in the infinite sequence space:
a zero level means the one-point rule at ``y_k = 0``, i.e. KL truncation.
"""
from __future__ import annotations

import itertools
import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Callable, Iterable, Sequence

import numpy as np

from . import qoi as qoi_mod
from .fem import RESIDUAL_TOL, GridFunction, MeshLevel, combine as combine_grids, l2_norm, prolong, solve_elementwise
from .quadrature import tensor_grid, tensor_size
from .qoi import QoISpec
from .random_field import KLExpansion

log = logging.getLogger(__name__)


@total_ordering
class MultiIndex:
    """Spatial level plus parameter levels; equality ignores trailing zeros."""

    __slots__ = ("lx", "ly", "_key")

    def __init__(self, lx: int = 0, ly: Sequence[int] = ()):
        ly = tuple(map(int, ly))
        if lx < 0 or (ly and min(ly) < 0):
            raise ValueError(f"negative level in index ({lx}, {ly})")
        end = len(ly)
        while end and ly[end - 1] == 0:
            end -= 1
        self.lx = int(lx)
        self.ly = ly[:end]
        self._key = (self.lx,) + self.ly

    @classmethod
    def from_tuple(cls, t: Sequence[int]) -> "MultiIndex":
        return cls(t[0], t[1:])

    def as_tuple(self, dims: int | None = None) -> tuple[int, ...]:
        """``(l_x, l_y1, ...)`` padded with zeros to ``1 + dims`` entries."""
        if dims is None:
            return self._key
        if dims < len(self.ly):
            raise ValueError(f"index {self} needs {len(self.ly)} parameter dims")
        return self._key + (0,) * (dims - len(self.ly))

    def __getitem__(self, k: int) -> int:
        """Coordinate ``k``: 0 is spatial, ``k >= 1`` is parameter ``k``."""
        if k < len(self._key):
            return self._key[k]
        return 0

    @property
    def effective_truncation(self) -> int:
        return len(self.ly)

    @property
    def active_dims(self) -> tuple[int, ...]:
        """1-based parameter dimensions with level >= 1."""
        return tuple(k + 1 for k, v in enumerate(self.ly) if v > 0)

    def shifted(self, k: int, delta: int = 1) -> "MultiIndex":
        t = list(self.as_tuple(max(k, len(self.ly))))
        t[k] += delta
        return MultiIndex.from_tuple(t)

    def __eq__(self, other):
        return isinstance(other, MultiIndex) and self._key == other._key

    def __lt__(self, other):
        return self._key < other._key

    def __hash__(self):
        return hash(self._key)

    def __repr__(self):
        return f"MultiIndex{self._key}"


def unit(k: int) -> MultiIndex:
    """Unit index along coordinate ``k`` (0 = spatial)."""
    return MultiIndex().shifted(k)


def _strip(t) -> tuple:
    end = len(t)
    while end > 1 and t[end - 1] == 0:
        end -= 1
    return tuple(t[:end])


def _backward(key: tuple):
    for k, v in enumerate(key):
        if v >= 1:
            t = list(key)
            t[k] -= 1
            yield _strip(t)


def missing_backward(indices: Iterable[MultiIndex], within: Iterable[MultiIndex]) -> list[MultiIndex]:
    """Members of ``indices`` having a backward neighbour outside ``within``."""
    keys = {i.as_tuple() for i in within}
    return [i for i in indices if any(b not in keys for b in _backward(i.as_tuple()))]


def is_downward_closed(indices: Iterable[MultiIndex]) -> bool:
    s = list(indices)
    return not missing_backward(s, s)


def downward_closure(indices: Iterable[MultiIndex]) -> set[MultiIndex]:
    out: set[MultiIndex] = set()
    stack = list(indices)
    while stack:
        idx = stack.pop()
        if idx in out:
            continue
        out.add(idx)
        for k in range(len(idx.as_tuple())):
            if idx[k] >= 1:
                stack.append(idx.shifted(k, -1))
    return out


def combination_coefficients(
    indices: Iterable[MultiIndex], ambient_dims: int | None = None
) -> dict[MultiIndex, int]:
    """``alpha_l = sum_{z in {0,1}^d} (-1)^|z| chi_I(l + z)`` for each l in I.

    ``ambient_dims`` is the total coordinate count ``1 + #parameters``; it
    defaults to the smallest value covering the set. Zero coefficients are
    omitted. I must be downward closed: only directions whose forward
    neighbour lies in I are expanded.
    """
    s = set(indices)
    if not s:
        raise ValueError("empty index set")
    needed = 1 + max(len(i.ly) for i in s)
    d = needed if ambient_dims is None else ambient_dims
    if d < needed:
        raise ValueError(f"ambient_dims={d} smaller than required {needed}")
    keys = {i.as_tuple() for i in s}
    out = {}
    for idx in s:
        base = list(idx.as_tuple(d - 1))
        # depth-first over corners l + z inside I, adding directions in
        # increasing order so each corner is visited once
        alpha = 0
        stack = [(base, 0, 0)]
        while stack:
            t, start, parity = stack.pop()
            alpha += -1 if parity else 1
            for k in range(start, d):
                t2 = t.copy()
                t2[k] += 1
                if _strip(t2) in keys:
                    stack.append((t2, k + 1, parity ^ 1))
        if alpha:
            out[idx] = alpha
    return out


@dataclass
class Problem:
    """Everything a full-grid evaluation needs.

    ``qois[0]`` is the quantity that steers adaptivity; further QoIs reuse
    the same PDE solves. ``level_shift`` maps index level ``l_x`` to mesh
    level ``l_x + level_shift`` (used to pin the spatial resolution).
    """

    kl: KLExpansion
    qois: tuple[QoISpec, ...] = (QoISpec(),)
    source: Callable[[np.ndarray], np.ndarray] | float = 1.0
    mesh_offset: int = 2
    level_shift: int = 0
    solver: str = "direct"
    threads: int = 1
    tolerance: float = RESIDUAL_TOL
    _interp: dict = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def mesh(self, lx: int) -> MeshLevel:
        return MeshLevel(lx + self.level_shift, self.mesh_offset)

    def _setup(self, mesh: MeshLevel):
        with self._lock:
            if mesh not in self._interp:
                cent = mesh.structure.centroids
                B = self.kl.interpolation_matrix(cent)
                f = self.source
                load = np.full(len(cent), float(f)) if np.isscalar(f) else np.asarray(f(cent), float)
                self._interp[mesh] = (B, load)
            return self._interp[mesh]

    def solve(self, lx: int, y: np.ndarray) -> GridFunction:
        mesh = self.mesh(lx)
        B, load = self._setup(mesh)
        coeff = np.exp(B @ self.kl.grid_values(y))
        return solve_elementwise(mesh, coeff, load, self.solver, self.tolerance)


class EvaluationError(RuntimeError):
    pass


@dataclass
class Evaluation:
    values: tuple  # one GridFunction or float per QoI
    cost: float
    solves: int
    seconds: float


class EvalCache:
    """Single-flight cache of full-grid evaluations ``P_l u``."""

    def __init__(self):
        self._entries: dict[MultiIndex, Future] = {}
        self._lock = threading.Lock()
        self.solves = 0

    def __contains__(self, idx: MultiIndex) -> bool:
        with self._lock:
            fut = self._entries.get(idx)
        return fut is not None and fut.done() and fut.exception() is None

    def __len__(self):
        return len(self._entries)

    def get(self, idx: MultiIndex) -> Evaluation:
        with self._lock:
            fut = self._entries.get(idx)
        if fut is None:
            raise KeyError(f"no cached evaluation for {idx}")
        return fut.result()

    def get_or_compute(self, idx: MultiIndex, compute: Callable[[], Evaluation]) -> Evaluation:
        with self._lock:
            fut = self._entries.get(idx)
            owner = fut is None
            if owner:
                fut = Future()
                self._entries[idx] = fut
        if not owner:
            return fut.result()
        try:
            ev = compute()
        except BaseException as exc:
            with self._lock:
                del self._entries[idx]
            fut.set_exception(exc)
            raise
        with self._lock:
            self.solves += ev.solves
        fut.set_result(ev)
        return ev

    def indices(self) -> list[MultiIndex]:
        with self._lock:
            return sorted(self._entries)


def _accumulate(values: list, weights: np.ndarray):
    # fixed node order keeps results bit-stable regardless of thread count
    first = values[0]
    if isinstance(first, GridFunction):
        acc = np.zeros_like(first.values)
        for w, v in zip(weights, values):
            acc += w * v.values
        return GridFunction(first.mesh, acc)
    acc = 0.0
    for w, v in zip(weights, values):
        acc += w * v
    return acc


def full_grid_eval(idx: MultiIndex, problem: Problem, cache: EvalCache, cost: float = 0.0) -> Evaluation:
    """``P_l u``: tensor Gauss-Hermite quadrature of F(u_h) at level ``l_x``."""

    def compute() -> Evaluation:
        if idx.effective_truncation > problem.kl.num_terms:
            raise EvaluationError(
                f"{idx} needs {idx.effective_truncation} KL terms, only {problem.kl.num_terms} stored"
            )
        t0 = time.perf_counter()
        points, weights = tensor_grid(idx.ly)

        def node(i):
            try:
                u = problem.solve(idx.lx, points[i])
            except Exception as exc:
                raise EvaluationError(f"evaluation of {idx} failed at node y={points[i].tolist()}: {exc}") from exc
            return [qoi_mod.apply(q, u) for q in problem.qois]

        if problem.threads > 1 and len(weights) > 1:
            with ThreadPoolExecutor(problem.threads) as pool:
                per_node = list(pool.map(node, range(len(weights))))
        else:
            per_node = [node(i) for i in range(len(weights))]
        values = tuple(
            _accumulate([vals[q] for vals in per_node], weights) for q in range(len(problem.qois))
        )
        return Evaluation(values, cost, len(weights), time.perf_counter() - t0)

    return cache.get_or_compute(idx, compute)


def lift(value, mesh: MeshLevel):
    """Prolong a grid function to ``mesh``; scalars pass through."""
    return prolong(value, mesh) if isinstance(value, GridFunction) else value


def norm(value) -> float:
    return l2_norm(value) if isinstance(value, GridFunction) else abs(float(value))


def _linear_combination(terms: list[tuple[float, object]], mesh: MeshLevel):
    if isinstance(terms[0][1], GridFunction):
        return combine_grids(terms, target=mesh)
    return float(sum(c * v for c, v in terms))


def increment(idx: MultiIndex, problem: Problem, cache: EvalCache, qoi: int = 0):
    """``Delta_l u = sum_z (-1)^|z| P_{l-z} u`` over the positive coordinates of l.

    All terms are prolonged to the spatial level of ``idx`` before summation.
    """
    key = idx.as_tuple()
    positive = [k for k, v in enumerate(key) if v > 0]
    mesh = problem.mesh(idx.lx)
    terms = []
    for r in range(len(positive) + 1):
        for sub in itertools.combinations(positive, r):
            t = list(key)
            for k in sub:
                t[k] -= 1
            ev = full_grid_eval(MultiIndex.from_tuple(t), problem, cache)
            terms.append(((-1.0) ** r, ev.values[qoi]))
    return _linear_combination(terms, mesh)


def combine(
    indices: Iterable[MultiIndex],
    coefficients: dict[MultiIndex, int],
    cache: EvalCache,
    qoi: int = 0,
):
    """Combination-technique result ``sum alpha_l P_l u`` on the finest spatial level of I."""
    indices = list(indices)
    if not indices:
        raise ValueError("empty index set")
    terms = []
    for idx in sorted(indices):
        alpha = coefficients.get(idx, 0)
        if not alpha:
            continue
        if idx not in cache:
            raise KeyError(f"missing cached evaluation for {idx}")
        terms.append((float(alpha), cache.get(idx).values[qoi]))
    if not terms:
        raise ValueError("all combination coefficients vanish")
    first = terms[0][1]
    if isinstance(first, GridFunction):
        level = max(v.mesh.level for _, v in terms)
        return combine_grids(terms, target=MeshLevel(level, first.mesh.offset))
    return float(sum(c * v for c, v in terms))


def index_set_to_json(indices: Iterable[MultiIndex], coefficients: dict | None = None) -> dict:
    indices = sorted(indices)
    dims = max((len(i.ly) for i in indices), default=0)
    return {
        "dims": dims,
        "indices": [list(i.as_tuple(dims)) for i in indices],
        "coefficients": [int((coefficients or {}).get(i, 0)) for i in indices],
    }


def index_set_from_json(data: dict) -> tuple[list[MultiIndex], dict[MultiIndex, int]]:
    indices = [MultiIndex.from_tuple(t) for t in data["indices"]]
    coeffs = {i: c for i, c in zip(indices, data.get("coefficients", [])) if c}
    return indices, coeffs


def dumps_index_set(indices, coefficients=None) -> str:
    return json.dumps(index_set_to_json(indices, coefficients))
