"""Gauss-Hermite rules for the standard normal density and their tensor products."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal


@dataclass(frozen=True)
class QuadRule1D:
    level: int
    nodes: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)


def _golub_welsch(size: int) -> tuple[np.ndarray, np.ndarray]:
    # Jacobi matrix of the monic probabilists' Hermite recurrence
    # He_{k+1} = y He_k - k He_{k-1}; zeroth moment of the density is 1.
    offdiag = np.sqrt(np.arange(1, size, dtype=float))
    nodes, vecs = eigh_tridiagonal(np.zeros(size), offdiag)
    weights = vecs[0, :] ** 2
    # enforce the exact symmetry of the rule
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    return nodes, weights / weights.sum()


@lru_cache(maxsize=None)
def _cached_rule(size: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = _golub_welsch(size)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``size``-point Gauss rule for N(0, 1).

    The density is folded into the weights, so ``sum(w * f(x))``
    approximates ``E[f(Y)]`` with ``Y ~ N(0, 1)``.
    """
    if size < 1:
        raise ValueError(f"quadrature size must be >= 1, got {size}")
    return _cached_rule(int(size))


def level_size(level: int) -> int:
    """Number of points of the univariate rule on ``level`` (2**level)."""
    if level < 0:
        raise ValueError(f"negative quadrature level {level}")
    return 1 << level


def rule_for_level(level: int) -> QuadRule1D:
    nodes, weights = gauss_hermite(level_size(level))
    return QuadRule1D(level, nodes, weights)


def tensor_size(levels: Sequence[int]) -> int:
    out = 1
    for lev in levels:
        out *= level_size(lev)
    return out


def tensor_nodes(levels: Sequence[int]) -> Iterator[tuple[np.ndarray, float]]:
    """Yield ``(y, weight)`` for the tensor Gauss-Hermite rule on ``levels``.

    Dimension ``k`` uses ``2**levels[k]`` points; dimensions past the end of
    ``levels`` are implicitly at level 0 (node 0, weight 1) and are not
    materialised. Ordering is row-major with the last dimension fastest.
    """
    rules = [gauss_hermite(level_size(lev)) for lev in levels]
    for combo in itertools.product(*(range(len(r[0])) for r in rules)):
        y = np.fromiter((r[0][i] for r, i in zip(rules, combo)), float, len(rules))
        w = 1.0
        for r, i in zip(rules, combo):
            w *= r[1][i]
        yield y, w


def tensor_grid(levels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`tensor_nodes`: ``(points[N, d], weights[N])``."""
    pts, wts = [], []
    for y, w in tensor_nodes(levels):
        pts.append(y)
        wts.append(w)
    return np.array(pts).reshape(len(wts), len(levels)), np.array(wts)
