"""Quantities of interest applied nodally to FEM solutions before quadrature."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .fem import GridFunction, MeshLevel, interpolate

KINDS = ("first_moment", "second_moment", "linear_functional")


@dataclass(frozen=True)
class QoISpec:
    kind: str = "first_moment"
    weight: Callable[[np.ndarray], np.ndarray] | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown quantity of interest {self.kind!r}")
        if self.kind == "linear_functional" and self.weight is None:
            raise ValueError("a linear functional needs a weight field")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def is_scalar(self) -> bool:
        return self.kind == "linear_functional"

    def weight_on(self, mesh: MeshLevel) -> np.ndarray:
        return _weight_vector(self, mesh)


@lru_cache(maxsize=64)
def _weight_vector(spec: QoISpec, mesh: MeshLevel) -> np.ndarray:
    # mass-weighted nodal interpolant of g, so that F(u) = g_h^T M u
    g = interpolate(mesh, spec.weight).values
    out = mesh.structure.mass @ g
    out.setflags(write=False)
    return out


def apply(spec: QoISpec, u: GridFunction):
    """F(u): the solution itself, its nodal square, or the scalar ``int g u``."""
    if spec.kind == "first_moment":
        return u
    if spec.kind == "second_moment":
        return GridFunction(u.mesh, u.values * u.values)
    return float(spec.weight_on(u.mesh) @ u.values)
