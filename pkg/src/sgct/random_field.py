"""Matérn covariances, discrete Karhunen-Loève expansions and the log-field.

The KL eigenproblem is discretised by Nyström's method with tensor trapezoid
weights on a uniform ``n x n`` grid of the unit square. Small grids are
solved densely; large grids use Lanczos with a block-Toeplitz matrix-vector
product evaluated by FFT, which applies the same Nyström matrix without
forming it.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln, kve

log = logging.getLogger(__name__)

_DENSE_LIMIT = 4096
_ZERO_RTOL = 1e-10


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary covariance of the Gaussian log-field.

    ``kind`` is ``"matern"`` (smoothness ``nu``), ``"gaussian"`` (the
    ``nu -> inf`` limit) or ``"constant"`` (rank-one debug kernel).
    ``distance`` selects ``|x - x'|_2`` or ``|x - x'|_1``.
    """

    kind: str = "matern"
    nu: float = 2.5
    xi: float = 0.4
    sigma2: float = 2.0
    distance: str = "euclidean"

    def __post_init__(self):
        if self.kind not in ("matern", "gaussian", "constant"):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.distance not in ("euclidean", "one-norm"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.kind == "gaussian":
            object.__setattr__(self, "nu", math.inf)
        if self.kind == "matern" and not (math.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"Matérn order must be positive and finite, got {self.nu}")
        if not self.xi > 0:
            raise ValueError(f"correlation length must be positive, got {self.xi}")
        if not self.sigma2 > 0:
            raise ValueError(f"variance must be positive, got {self.sigma2}")

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceSpec":
        d = dict(d)
        nu = d.get("nu")
        if d.get("kind") is None and (nu in ("inf", "infinity") or nu == math.inf):
            d["kind"] = "gaussian"
        if d.get("kind") == "gaussian":
            d["nu"] = math.inf
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.kind == "gaussian":
            out["nu"] = "inf"
        return out

    def distances(self, dx, dy):
        if self.distance == "euclidean":
            return np.hypot(dx, dy)
        return np.abs(dx) + np.abs(dy)


def _half_integer_order(nu: float) -> int | None:
    s = nu - 0.5
    if s >= 0 and abs(s - round(s)) < 1e-12:
        return int(round(s))
    return None


def matern_bessel(r, nu: float, xi: float, sigma2: float):
    """General Matérn formula through the modified Bessel function K_nu."""
    r = np.asarray(r, dtype=float)
    z = math.sqrt(2.0 * nu) * r / xi
    out = np.full(r.shape, sigma2, dtype=float)
    pos = z > 0
    zp = z[pos]
    # log of 2^(1-nu)/Gamma(nu) * z^nu * K_nu(z), with K_nu = kve * exp(-z)
    with np.errstate(divide="ignore"):
        logval = (
            (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(zp) - zp + np.log(kve(nu, zp))
        )
    bad = ~np.isfinite(logval)
    if np.any(bad):
        # K_nu overflows for large orders; use the uniform (Debye) expansion
        logval[bad] = (
            (1.0 - nu) * math.log(2.0) - gammaln(nu) + nu * np.log(zp[bad]) + _log_kv_debye(nu, zp[bad])
        )
    out[pos] = sigma2 * np.exp(logval)
    return out


def _log_kv_debye(nu: float, z: np.ndarray) -> np.ndarray:
    """log K_nu(z) from the large-order uniform asymptotic expansion (three terms)."""
    t = z / nu
    root = np.sqrt(1.0 + t * t)
    eta = root + np.log(t / (1.0 + root))
    p = 1.0 / root
    u1 = (3 * p - 5 * p**3) / 24
    u2 = (81 * p**2 - 462 * p**4 + 385 * p**6) / 1152
    series = 1.0 - u1 / nu + u2 / nu**2
    return 0.5 * math.log(math.pi / (2 * nu)) - nu * eta - 0.5 * np.log(root) + np.log(series)


def matern_half_integer(r, s: int, xi: float, sigma2: float):
    """Closed form for ``nu = s + 1/2``: exponential times a polynomial of degree s."""
    r = np.asarray(r, dtype=float)
    c = math.sqrt(2 * s + 1) / xi
    z = 2.0 * c * r
    poly = np.zeros_like(r)
    pref = math.factorial(s) / math.factorial(2 * s)
    for i in range(s + 1):
        coeff = math.factorial(s + i) / (math.factorial(i) * math.factorial(s - i))
        poly = poly + coeff * z ** (s - i)
    return sigma2 * np.exp(-c * r) * pref * poly


def covariance(spec: CovarianceSpec, r):
    """Covariance at distance ``r`` (scalar or array)."""
    arr = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("covariance distance must be finite")
    if np.any(arr < 0):
        raise ValueError("covariance distance must be non-negative")
    if spec.kind == "constant":
        out = np.full(arr.shape, spec.sigma2)
    elif spec.kind == "gaussian":
        out = spec.sigma2 * np.exp(-0.5 * arr**2 / spec.xi**2)
    else:
        s = _half_integer_order(spec.nu)
        if s is not None:
            out = matern_half_integer(arr, s, spec.xi, spec.sigma2)
        else:
            out = matern_bessel(arr, spec.nu, spec.xi, spec.sigma2)
    return float(out) if np.ndim(r) == 0 else out


def trapezoid_weights(n: int) -> np.ndarray:
    """Tensor trapezoid weights on the ``n x n`` grid, row-major (y outer)."""
    h = 1.0 / (n - 1)
    w = np.full(n, h)
    w[[0, -1]] = 0.5 * h
    return np.outer(w, w).ravel()


@dataclass(frozen=True, eq=False)
class KLExpansion:
    """Discrete KL expansion sampled on a uniform ``n_side x n_side`` grid.

    ``modes[:, k]`` holds the row-major samples of the k-th eigenfunction;
    they are orthonormal under :func:`trapezoid_weights`.
    """

    n_side: int
    eigenvalues: np.ndarray
    modes: np.ndarray
    mean_field: np.ndarray
    spec: CovarianceSpec | None = None
    _scaled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        modes = np.asarray(self.modes, dtype=float)
        if modes.shape != (self.n_side**2, len(lam)):
            raise ValueError(f"modes shape {modes.shape} inconsistent with grid/terms")
        if np.any(lam < 0) or np.any(np.diff(lam) > 0):
            raise ValueError("eigenvalues must be non-negative and non-increasing")
        mean = np.broadcast_to(np.asarray(self.mean_field, dtype=float), (self.n_side**2,)).copy()
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "mean_field", mean)
        object.__setattr__(self, "_scaled", modes * np.sqrt(lam))
        for arr in (lam, modes, mean, self._scaled):
            arr.setflags(write=False)

    @property
    def num_terms(self) -> int:
        return len(self.eigenvalues)

    @property
    def grid_coords(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.n_side)
        xx, yy = np.meshgrid(t, t)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def grid_values(self, y: Sequence[float]) -> np.ndarray:
        """Log-field on the KL grid for parameters ``y`` (trailing zeros ignored)."""
        y = np.asarray(y, dtype=float).ravel()
        nz = np.flatnonzero(y)
        m = int(nz[-1]) + 1 if len(nz) else 0
        if m > self.num_terms:
            raise ValueError(f"{m} parameters requested but only {self.num_terms} KL terms stored")
        if m == 0:
            return self.mean_field.copy()
        return self.mean_field + self._scaled[:, :m] @ y[:m]

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        """Sparse bilinear-interpolation operator from grid samples to ``points``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
            raise ValueError("evaluation points must lie in [0, 1]^2")
        n = self.n_side
        s = np.clip(pts, 0.0, 1.0) * (n - 1)
        i = np.minimum(np.floor(s[:, 0]).astype(int), n - 2)
        j = np.minimum(np.floor(s[:, 1]).astype(int), n - 2)
        tx = s[:, 0] - i
        ty = s[:, 1] - j
        rows = np.repeat(np.arange(len(pts)), 4)
        cols = np.column_stack([j * n + i, j * n + i + 1, (j + 1) * n + i, (j + 1) * n + i + 1]).ravel()
        vals = np.column_stack(
            [(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]
        ).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), n * n))

    def save(self, path) -> None:
        np.savez(
            path,
            n_side=self.n_side,
            eigenvalues=self.eigenvalues,
            modes=np.ascontiguousarray(self.modes.T),
            mean_field=self.mean_field,
            spec=json.dumps(self.spec.to_dict() if self.spec else None),
        )

    @classmethod
    def load(cls, path) -> "KLExpansion":
        with np.load(path, allow_pickle=False) as data:
            spec = json.loads(str(data["spec"]))
            return cls(
                n_side=int(data["n_side"]),
                eigenvalues=data["eigenvalues"],
                modes=data["modes"].T,
                mean_field=data["mean_field"],
                spec=CovarianceSpec.from_dict(spec) if spec else None,
            )


def eval_log_field(kl: KLExpansion, points, y: Sequence[float]) -> np.ndarray:
    """Truncated log-field ``mean(x) + sum_k sqrt(lam_k) psi_k(x) y_k`` at ``points``."""
    y = np.asarray(y, dtype=float).ravel()
    if len(y) > kl.num_terms:
        raise ValueError(f"{len(y)} parameters but only {kl.num_terms} KL terms stored")
    return kl.interpolation_matrix(points) @ kl.grid_values(y)


def _toeplitz_operator(spec: CovarianceSpec, n: int, sqrt_w: np.ndarray):
    h = 1.0 / (n - 1)
    m = 2 * n
    off = np.r_[0:n, -(n - 1) : 0]
    pos = np.r_[0:n, m - n + 1 : m]
    dx, dy = np.meshgrid(off * h, off * h)
    base = np.zeros((m, m))
    base[np.ix_(pos, pos)] = covariance(spec, spec.distances(dx, dy))
    symbol = scipy.fft.rfft2(base)
    sw = sqrt_w.reshape(n, n)

    def matvec(v):
        buf = np.zeros((m, m))
        buf[:n, :n] = sw * np.asarray(v).reshape(n, n)
        out = scipy.fft.irfft2(scipy.fft.rfft2(buf) * symbol, s=(m, m))[:n, :n]
        return (sw * out).ravel()

    return spla.LinearOperator((n * n, n * n), matvec=matvec, dtype=float)


def _dense_matrix(spec: CovarianceSpec, n: int, sqrt_w: np.ndarray) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(t, t)
    x, y = xx.ravel(), yy.ravel()
    k = covariance(spec, spec.distances(x[:, None] - x[None, :], y[:, None] - y[None, :]))
    return sqrt_w[:, None] * k * sqrt_w[None, :]


def compute_kl(
    spec: CovarianceSpec,
    kl_grid_points_per_side: int = 129,
    num_terms: int = 512,
    mean: float | np.ndarray = 3.0,
) -> KLExpansion:
    """Nyström KL expansion of ``spec`` on the unit square.

    Eigenvalues within ``1e-10 * lam_max`` of zero are treated as roundoff and
    clamped to 0; genuinely negative ones are dropped. Raises ``RuntimeError``
    when fewer than ``num_terms`` usable pairs remain or Lanczos stalls.
    """
    n = int(kl_grid_points_per_side)
    if n < 9:
        raise ValueError("KL grid needs at least 9 points per side")
    npts = n * n
    if not 1 <= num_terms <= npts:
        raise ValueError(f"num_terms must be in [1, {npts}]")
    w = trapezoid_weights(n)
    sqrt_w = np.sqrt(w)
    if npts <= _DENSE_LIMIT or num_terms >= npts // 2:
        vals, vecs = np.linalg.eigh(_dense_matrix(spec, n, sqrt_w))
    else:
        op = _toeplitz_operator(spec, n, sqrt_w)
        try:
            vals, vecs = spla.eigsh(op, k=num_terms, which="LA", v0=np.ones(npts), tol=0)
        except spla.ArpackNoConvergence as exc:
            raise RuntimeError(f"KL eigensolve did not converge: {exc}") from exc
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    lam_max = max(vals[0], 0.0)
    small = np.abs(vals) <= _ZERO_RTOL * lam_max
    vals = np.where(small, 0.0, vals)
    keep = vals >= 0
    vals, vecs = vals[keep], vecs[:, keep]
    if len(vals) < num_terms:
        raise RuntimeError(
            f"only {len(vals)} non-negative eigenvalues available, {num_terms} requested"
        )
    vals, vecs = vals[:num_terms], vecs[:, :num_terms]
    modes = vecs / sqrt_w[:, None]
    # deterministic sign: largest-magnitude sample positive
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(modes.shape[1])])
    signs[signs == 0] = 1.0
    modes = modes * signs
    return KLExpansion(n, vals, modes, np.broadcast_to(mean, (npts,)), spec)


def kl_cache_key(spec: CovarianceSpec, n_side: int, num_terms: int, mean: float) -> str:
    payload = json.dumps(
        {"spec": spec.to_dict(), "n": n_side, "k": num_terms, "mean": mean}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_kl(
    cache_dir, spec: CovarianceSpec, n_side: int, num_terms: int, mean: float = 3.0
) -> tuple[KLExpansion, bool]:
    """Load the expansion from ``cache_dir`` or compute and store it.

    Returns ``(kl, hit)``.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"kl_{kl_cache_key(spec, n_side, num_terms, mean)}.npz"
    if path.exists():
        log.info("KL cache hit: %s", path)
        return KLExpansion.load(path), True
    log.info("KL cache miss, computing %d terms on %d^2 grid", num_terms, n_side)
    kl = compute_kl(spec, n_side, num_terms, mean)
    tmp = path.with_suffix(".tmp.npz")
    kl.save(tmp)
    tmp.replace(path)
    return kl, False
