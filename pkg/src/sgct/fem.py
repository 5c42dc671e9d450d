"""P1 finite elements for -div(a grad u) = f on the unit square, u = 0 on the boundary.

Meshes are uniform: ``2**(level + offset)`` cells per side, each cell split
along its (0,0)-(1,1) diagonal. The coefficient is taken constant per
triangle (centroid value) and the load uses one-point centroid quadrature.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MeshLevel:
    level: int
    offset: int = 2

    def __post_init__(self):
        if self.level < 0 or self.offset < 0:
            raise ValueError("mesh level and offset must be non-negative")

    @property
    def cells_per_side(self) -> int:
        return 1 << (self.level + self.offset)

    @property
    def nodes_per_side(self) -> int:
        return self.cells_per_side + 1

    @property
    def num_nodes(self) -> int:
        return self.nodes_per_side**2

    @property
    def h(self) -> float:
        return 1.0 / self.cells_per_side

    def refined(self, levels: int = 1) -> "MeshLevel":
        return MeshLevel(self.level + levels, self.offset)

    @property
    def structure(self) -> "_MeshStructure":
        return _structure(self.level, self.offset)


# local stiffness/gradients on the two unit right triangles of a cell
_LOWER = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
_UPPER = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def _barycentric_gradients(verts: np.ndarray) -> np.ndarray:
    mat = np.column_stack([np.ones(3), verts])
    return np.linalg.inv(mat)[1:, :].T  # row a: grad of lambda_a


def _local_stiffness(verts: np.ndarray) -> np.ndarray:
    g = _barycentric_gradients(verts)
    area = 0.5 * abs(np.linalg.det(np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])))
    return area * g @ g.T


class _MeshStructure:
    """Connectivity and precomputed operators for one mesh level (immutable)."""

    def __init__(self, level: int, offset: int):
        self.mesh = MeshLevel(level, offset)
        n = self.mesh.nodes_per_side
        c = n - 1
        h = 1.0 / c
        jj, ii = np.meshgrid(np.arange(c), np.arange(c), indexing="ij")
        v00 = (jj * n + ii).ravel()
        v10 = v00 + 1
        v01 = v00 + n
        v11 = v00 + n + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        self.triangles = np.vstack([lower, upper])
        ntri = len(self.triangles)
        self.kind = np.r_[np.zeros(ntri // 2, int), np.ones(ntri // 2, int)]
        t = np.linspace(0.0, 1.0, n)
        xx, yy = np.meshgrid(t, t)
        self.coords = np.column_stack([xx.ravel(), yy.ravel()])
        self.centroids = self.coords[self.triangles].mean(axis=1)
        self.area = 0.5 * h * h

        boundary = np.zeros((n, n), bool)
        boundary[[0, -1], :] = True
        boundary[:, [0, -1]] = True
        self.boundary = boundary.ravel()
        self.interior = np.flatnonzero(~self.boundary)
        dof = np.full(n * n, -1)
        dof[self.interior] = np.arange(len(self.interior))
        self.dof = dof
        ndof = len(self.interior)

        local = np.stack([_local_stiffness(_LOWER), _local_stiffness(_UPPER)])
        local[np.abs(local) < 1e-14] = 0.0
        elem = np.repeat(np.arange(ntri), 9)
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        vals = local[self.kind].reshape(-1)
        keep = (dof[rows] >= 0) & (dof[cols] >= 0) & (vals != 0)
        r, cc, v, e = dof[rows[keep]], dof[cols[keep]], vals[keep], elem[keep]
        keys = r.astype(np.int64) * ndof + cc
        uniq, slot = np.unique(keys, return_inverse=True)
        # data of the CSR stiffness matrix = gather @ (elementwise coefficient)
        self.gather = sp.csr_matrix((v, (slot, e)), shape=(len(uniq), ntri))
        self.indices = (uniq % ndof).astype(np.int32)
        self.indptr = np.searchsorted(uniq // ndof, np.arange(ndof + 1)).astype(np.int32)
        self.ndof = ndof

        # load: one-point centroid rule, each vertex receives |T|/3 f(c_T)
        lr = np.repeat(self.triangles, 1, axis=0).ravel()
        le = np.repeat(np.arange(ntri), 3)
        lkeep = dof[lr] >= 0
        self.load = sp.csr_matrix(
            (np.full(lkeep.sum(), self.area / 3.0), (dof[lr[lkeep]], le[lkeep])),
            shape=(ndof, ntri),
        )

    def stiffness(self, coeff: np.ndarray) -> sp.csr_matrix:
        data = self.gather @ coeff
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.ndof, self.ndof))

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Consistent P1 mass matrix over all nodes (boundary included)."""
        local = self.area / 12.0 * (np.ones((3, 3)) + np.eye(3))
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        vals = np.tile(local.ravel(), len(self.triangles))
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.coords),) * 2)

    @cached_property
    def laplacian_full(self) -> sp.csr_matrix:
        """Stiffness matrix with a = 1 over all nodes, for seminorms."""
        local = np.stack([_local_stiffness(_LOWER), _local_stiffness(_UPPER)])
        rows = np.repeat(self.triangles, 3, axis=1).ravel()
        cols = np.tile(self.triangles, (1, 3)).ravel()
        vals = local[self.kind].reshape(-1)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(self.coords),) * 2)


@lru_cache(maxsize=None)
def _structure(level: int, offset: int) -> _MeshStructure:
    return _MeshStructure(level, offset)


@dataclass(eq=False)
class GridFunction:
    """Nodal values of a P1 function, row-major with x fastest."""

    mesh: MeshLevel
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_nodes,):
            raise ValueError(
                f"expected {self.mesh.num_nodes} nodal values, got shape {self.values.shape}"
            )

    @property
    def level(self) -> int:
        return self.mesh.level

    def as_grid(self) -> np.ndarray:
        n = self.mesh.nodes_per_side
        return self.values.reshape(n, n)

    def copy(self) -> "GridFunction":
        return GridFunction(self.mesh, self.values.copy())

    def __add__(self, other):
        return combine([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return combine([(1.0, self), (-1.0, other)])

    def __mul__(self, c: float):
        return GridFunction(self.mesh, c * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.mesh, -self.values)

    def to_csv(self, path) -> None:
        coords = self.mesh.structure.coords
        with open(path, "w") as fh:
            fh.write("x,y,value\n")
            for (x, y), v in zip(coords, self.values):
                fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")

    def save(self, path) -> None:
        """Raw little-endian float64 values preceded by a one-line JSON header."""
        header = {"level": self.mesh.level, "offset": self.mesh.offset, "count": len(self.values)}
        with open(path, "wb") as fh:
            fh.write((json.dumps(header) + "\n").encode())
            fh.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GridFunction":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            values = np.frombuffer(fh.read(), dtype="<f8")
        if len(values) != header["count"]:
            raise ValueError(f"{path}: expected {header['count']} values, found {len(values)}")
        return cls(MeshLevel(header["level"], header["offset"]), values.copy())


def _solve(struct: _MeshStructure, coeff: np.ndarray, rhs: np.ndarray, solver: str, tol: float) -> np.ndarray:
    if not np.any(rhs):
        return np.zeros_like(rhs)
    mat = struct.stiffness(coeff)
    if solver == "direct":
        lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A")
        sol = lu.solve(rhs)
        res = rhs - mat @ sol
        rel = np.linalg.norm(res) / np.linalg.norm(rhs)
        if rel > tol:
            sol = sol + lu.solve(res)
    elif solver == "cg":
        import pyamg

        ml = pyamg.smoothed_aggregation_solver(mat)
        sol = ml.solve(rhs, tol=0.1 * tol, accel="cg", maxiter=500)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    rel = np.linalg.norm(rhs - mat @ sol) / np.linalg.norm(rhs)
    if not rel <= tol:
        raise SolverError(f"linear solve reached relative residual {rel:.3e} > {tol:.1e}")
    return sol


def solve_elementwise(
    mesh: MeshLevel, coeff: np.ndarray, load: np.ndarray, solver: str = "direct", tol: float = RESIDUAL_TOL
) -> GridFunction:
    """Solve with a coefficient given per triangle and ``f`` given per triangle centroid."""
    struct = mesh.structure
    coeff = np.asarray(coeff, dtype=float)
    bad = ~(coeff > 0) | ~np.isfinite(coeff)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise ValueError(
            f"diffusion coefficient {coeff[k]!r} at centroid {tuple(struct.centroids[k])} is not positive"
        )
    rhs = struct.load @ np.broadcast_to(np.asarray(load, dtype=float), coeff.shape)
    values = np.zeros(mesh.num_nodes)
    values[struct.interior] = _solve(struct, coeff, rhs, solver, tol)
    return GridFunction(mesh, values)


def assemble_solve(
    mesh: MeshLevel,
    a_eval: Callable[[np.ndarray], np.ndarray],
    f_eval: Callable[[np.ndarray], np.ndarray],
    solver: str = "direct",
    tol: float = RESIDUAL_TOL,
) -> GridFunction:
    """P1 Galerkin solution; ``a_eval``/``f_eval`` map an (N, 2) point array to N values."""
    cent = mesh.structure.centroids
    coeff = np.broadcast_to(np.asarray(a_eval(cent), dtype=float), (len(cent),))
    load = np.broadcast_to(np.asarray(f_eval(cent), dtype=float), (len(cent),))
    return solve_elementwise(mesh, coeff, load, solver, tol)


def residual_norm(u: GridFunction, coeff: np.ndarray, load: np.ndarray) -> float:
    """Relative algebraic residual of ``u`` for elementwise data."""
    struct = u.mesh.structure
    rhs = struct.load @ np.broadcast_to(load, coeff.shape)
    res = rhs - struct.stiffness(coeff) @ u.values[struct.interior]
    den = np.linalg.norm(rhs)
    return float(np.linalg.norm(res) / den) if den else float(np.linalg.norm(res))


def _refine_once(grid: np.ndarray) -> np.ndarray:
    n = grid.shape[0]
    fine = np.empty((2 * n - 1, 2 * n - 1))
    fine[::2, ::2] = grid
    fine[::2, 1::2] = 0.5 * (grid[:, :-1] + grid[:, 1:])
    fine[1::2, ::2] = 0.5 * (grid[:-1, :] + grid[1:, :])
    # cell midpoints lie on the (0,0)-(1,1) diagonal
    fine[1::2, 1::2] = 0.5 * (grid[:-1, :-1] + grid[1:, 1:])
    return fine


def prolong(u: GridFunction, target: MeshLevel) -> GridFunction:
    """Exact P1 interpolation of ``u`` onto the finer uniform mesh ``target``."""
    if target.offset != u.mesh.offset:
        raise ValueError("prolongation requires meshes with the same offset")
    if target.level < u.mesh.level:
        raise ValueError(f"cannot prolong level {u.mesh.level} to coarser level {target.level}")
    if target.level == u.mesh.level:
        return u
    grid = u.as_grid()
    for _ in range(target.level - u.mesh.level):
        grid = _refine_once(grid)
    return GridFunction(target, grid.ravel())


def l2_norm(u: GridFunction) -> float:
    """L2(D) norm ``sqrt(v^T M v)`` with the consistent mass matrix."""
    val = float(u.values @ (u.mesh.structure.mass @ u.values))
    return float(np.sqrt(max(val, 0.0)))


def h1_seminorm(u: GridFunction) -> float:
    val = float(u.values @ (u.mesh.structure.laplacian_full @ u.values))
    return float(np.sqrt(max(val, 0.0)))


def combine(terms: Iterable[tuple[float, GridFunction]], target: MeshLevel | None = None) -> GridFunction:
    """Linear combination ``sum c_i u_i`` on the finest level present (or ``target``)."""
    terms = list(terms)
    if not terms:
        raise ValueError("cannot combine an empty list of grid functions")
    if target is None:
        target = max((u.mesh for _, u in terms), key=lambda m: m.level)
    out = np.zeros(target.num_nodes)
    for c, u in terms:
        if c != 0:
            out += c * prolong(u, target).values
    return GridFunction(target, out)


def interpolate(mesh: MeshLevel, func: Callable[[np.ndarray], np.ndarray]) -> GridFunction:
    """Nodal interpolant of ``func`` evaluated on an (N, 2) coordinate array."""
    coords = mesh.structure.coords
    return GridFunction(mesh, np.broadcast_to(func(coords), (len(coords),)).astype(float))


def _triangle_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    # collapsed (Duffy) Gauss-Legendre rule on the unit reference triangle
    g, w = np.polynomial.legendre.leggauss(order)
    g = 0.5 * (g + 1.0)
    w = 0.5 * w
    uu, vv = np.meshgrid(g, g, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    s = uu.ravel()
    t = (vv * (1.0 - uu)).ravel()
    weights = (wu * wv * (1.0 - uu)).ravel()
    return np.column_stack([s, t]), weights


def error_norms(
    u: GridFunction,
    exact: Callable[[np.ndarray, np.ndarray], np.ndarray],
    exact_grad: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
    order: int = 5,
) -> tuple[float, float | None]:
    """``(||u - exact||_L2, |u - exact|_H1)`` by high-order quadrature per triangle."""
    struct = u.mesh.structure
    ref, wts = _triangle_rule(order)
    tri = struct.coords[struct.triangles]
    p0 = tri[:, 0]
    e1 = tri[:, 1] - p0
    e2 = tri[:, 2] - p0
    jac = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    px = p0[:, None, 0] + ref[None, :, 0] * e1[:, None, 0] + ref[None, :, 1] * e2[:, None, 0]
    py = p0[:, None, 1] + ref[None, :, 0] * e1[:, None, 1] + ref[None, :, 1] * e2[:, None, 1]
    # barycentric coordinates in the affine frame (p0, p1, p2)
    lam = np.column_stack([1.0 - ref.sum(axis=1), ref[:, 0], ref[:, 1]])
    nodal = u.values[struct.triangles]
    uh = nodal @ lam.T
    err2 = ((uh - exact(px, py)) ** 2 * wts).sum(axis=1) @ jac
    h1 = None
    if exact_grad is not None:
        inv = np.linalg.inv(np.stack([e1, e2], axis=2))  # maps physical -> reference
        dref = np.stack([nodal[:, 1] - nodal[:, 0], nodal[:, 2] - nodal[:, 0]], axis=1)
        grad = np.einsum("eij,ei->ej", inv, dref)
        gx, gy = exact_grad(px, py)
        diff = (grad[:, None, 0] - gx) ** 2 + (grad[:, None, 1] - gy) ** 2
        h1 = float(np.sqrt((diff * wts).sum(axis=1) @ jac))
    return float(np.sqrt(err2)), h1
