"""Shared test utilities."""
from __future__ import annotations

import itertools

import numpy as np

from sgct.combination import MultiIndex


def random_downward_closed(rng: np.random.Generator, coords: int, max_size: int, max_level: int = 3):
    """Grow a random downward-closed set from the root by admissible forward steps."""
    members = {(0,) * coords}
    size = int(rng.integers(1, max_size + 1))
    while len(members) < size:
        frontier = set()
        for t in members:
            for k in range(coords):
                f = list(t)
                f[k] += 1
                f = tuple(f)
                if f in members or f[k] > max_level:
                    continue
                if all(tuple(f[:j] + (f[j] - 1,) + f[j + 1:]) in members for j in range(coords) if f[j] > 0):
                    frontier.add(f)
        if not frontier:
            break
        frontier = sorted(frontier)
        members.add(frontier[int(rng.integers(len(frontier)))])
    return [MultiIndex.from_tuple(t) for t in sorted(members)]


def brute_force_coefficients(indices, dims: int) -> dict:
    """alpha_l = sum over all z in {0,1}^dims of (-1)^|z| chi_I(l + z)."""
    keys = {i.as_tuple(dims - 1) for i in indices}
    out = {}
    for i in indices:
        t = i.as_tuple(dims - 1)
        alpha = 0
        for z in itertools.product((0, 1), repeat=dims):
            if tuple(a + b for a, b in zip(t, z)) in keys:
                alpha += (-1) ** sum(z)
        if alpha:
            out[i] = alpha
    return out


# PASS/FAIL lines from the acceptance suite, echoed in the terminal summary
VERDICTS: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)
