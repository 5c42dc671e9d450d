"""Run configuration: a nested YAML file plus ``section.key=value`` overrides.

Relative paths are resolved against the directory of the config file.
"""
from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .adaptive import STOP_MODES, TRUNC_MODES, CostModel, StoppingRule
from .combination import Problem
from .qoi import KINDS as QOI_KINDS, QoISpec
from .random_field import CovarianceSpec, KLExpansion, cached_kl


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-6`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


DEFAULTS: dict = {
    "field": {
        "kind": "matern",
        "nu": 2.5,
        "xi": 0.4,
        "sigma2": 2.0,
        "distance": "euclidean",
        "mean": 3.0,
        "kl_grid_points_per_side": 129,
        "num_terms": 512,
        "cache_dir": "kl_cache",
    },
    "fem": {"mesh_offset": 2, "solver": "direct", "tolerance": 1e-10, "source": 1.0},
    "qoi": {"kind": "first_moment", "weight": None, "extra": []},
    "adaptive": {
        "buffer": 5,
        "cost_model": "highest_active",
        "spatial_exponent": 2,
        "stopping": {"mode": "global_profit", "eps": 1e-6, "budget": None, "zeta": 3},
        "max_iterations": 5000,
        "max_spatial_level": None,
        "level_shift": 0,
        "snapshot_every": 100,
        "checkpoint_every": 0,
    },
    "reference": {"path": None, "value": None, "recipe": None},
    "output": {"dir": "out", "timing": True, "solution_csv": False},
    "threads": 1,
}

RECIPE_KINDS = ("anchor", "index_set", "adaptive")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and key not in ("weight", "recipe"):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = _merge(base[key], val, path + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = _load_yaml(raw)
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _deep_update(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
    return dst


def _weight_function(spec):
    if spec is None:
        return None
    kind = spec.get("kind", "constant")
    if kind == "constant":
        value = float(spec.get("value", 1.0))
        return _ConstantWeight(value)
    if kind == "indicator":
        box = tuple(float(v) for v in spec.get("box", ()))
        if len(box) != 4:
            raise ConfigError("indicator weight needs box: [x0, x1, y0, y1]")
        return _IndicatorWeight(box)
    raise ConfigError(f"unknown weight kind {kind!r}")


@dataclass(frozen=True)
class _ConstantWeight:
    value: float

    def __call__(self, p):
        return np.full(len(p), self.value)


@dataclass(frozen=True)
class _IndicatorWeight:
    box: tuple

    def __call__(self, p):
        x0, x1, y0, y1 = self.box
        return ((p[:, 0] >= x0) & (p[:, 0] <= x1) & (p[:, 1] >= y0) & (p[:, 1] <= y1)).astype(float)


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} not found")
            try:
                raw = _load_yaml(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            base = path.resolve().parent
        for text in overrides:
            _deep_update(raw, parse_override(text))
        cfg = cls(_merge(DEFAULTS, raw), base)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, data), Path(base_dir))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    # -- validation -------------------------------------------------------------------

    def validate(self) -> None:
        f, fem, ad, q = self["field"], self["fem"], self["adaptive"], self["qoi"]
        try:
            self.covariance()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field: {exc}") from exc
        if int(f["kl_grid_points_per_side"]) < 9:
            raise ConfigError("field.kl_grid_points_per_side must be >= 9")
        if not 1 <= int(f["num_terms"]) <= int(f["kl_grid_points_per_side"]) ** 2:
            raise ConfigError("field.num_terms must be between 1 and the number of KL grid points")
        if int(fem["mesh_offset"]) < 0:
            raise ConfigError("fem.mesh_offset must be non-negative")
        if fem["solver"] not in ("direct", "cg"):
            raise ConfigError(f"fem.solver must be 'direct' or 'cg', got {fem['solver']!r}")
        if not float(fem["tolerance"]) > 0:
            raise ConfigError("fem.tolerance must be positive")
        for kind in [q["kind"], *q["extra"]]:
            if kind not in QOI_KINDS:
                raise ConfigError(f"unknown quantity of interest {kind!r}")
        if "linear_functional" in [q["kind"], *q["extra"]] and q["weight"] is None:
            raise ConfigError("qoi.weight is required for a linear functional")
        _weight_function(q["weight"])
        if ad["cost_model"] not in TRUNC_MODES:
            raise ConfigError(f"adaptive.cost_model must be one of {TRUNC_MODES}")
        if int(ad["buffer"]) < 1:
            raise ConfigError("adaptive.buffer must be >= 1")
        if ad["stopping"]["mode"] not in STOP_MODES:
            raise ConfigError(f"adaptive.stopping.mode must be one of {STOP_MODES}")
        try:
            self.stopping()
        except ValueError as exc:
            raise ConfigError(f"adaptive.stopping: {exc}") from exc
        for key in ("snapshot_every", "checkpoint_every", "level_shift"):
            if int(ad[key]) < 0:
                raise ConfigError(f"adaptive.{key} must be non-negative")
        if ad["max_spatial_level"] is not None and int(ad["max_spatial_level"]) < 0:
            raise ConfigError("adaptive.max_spatial_level must be non-negative")
        if int(self["threads"]) < 1:
            raise ConfigError("threads must be >= 1")
        ref = self["reference"]
        if ref["path"] is not None and not self.path(ref["path"]).exists():
            raise ConfigError(f"reference file {self.path(ref['path'])} not found")
        recipe = ref["recipe"]
        if recipe is not None:
            if not isinstance(recipe, dict) or recipe.get("kind") not in RECIPE_KINDS:
                raise ConfigError(f"reference.recipe.kind must be one of {RECIPE_KINDS}")
            for p in recipe.get("include", []) + ([recipe["path"]] if "path" in recipe else []):
                if not self.path(p).exists():
                    raise ConfigError(f"reference recipe file {self.path(p)} not found")

    # -- builders ---------------------------------------------------------------------

    def covariance(self) -> CovarianceSpec:
        f = self["field"]
        return CovarianceSpec.from_dict({k: f[k] for k in ("kind", "nu", "xi", "sigma2", "distance")})

    def cost_model(self) -> CostModel:
        ad = self["adaptive"]
        return CostModel(ad["cost_model"], int(ad["spatial_exponent"]))

    def stopping(self) -> StoppingRule:
        ad = self["adaptive"]
        st = ad["stopping"]
        budget = st.get("budget")
        return StoppingRule(
            mode=st["mode"],
            eps=float(st["eps"]),
            budget=math.inf if budget is None else float(budget),
            zeta=int(st["zeta"]),
            max_iterations=int(ad["max_iterations"]),
        )

    def qois(self) -> tuple[QoISpec, ...]:
        q = self["qoi"]
        weight = _weight_function(q["weight"])
        kinds = [q["kind"], *q["extra"]]
        return tuple(QoISpec(k, weight if k == "linear_functional" else None) for k in kinds)

    def kl(self) -> tuple[KLExpansion, bool, Path]:
        f = self["field"]
        cache_dir = self.path(f["cache_dir"])
        kl, hit = cached_kl(cache_dir, self.covariance(), int(f["kl_grid_points_per_side"]),
                            int(f["num_terms"]), float(f["mean"]))
        return kl, hit, cache_dir

    def problem(self, kl: KLExpansion) -> Problem:
        fem = self["fem"]
        return Problem(
            kl,
            qois=self.qois(),
            source=float(fem["source"]),
            mesh_offset=int(fem["mesh_offset"]),
            level_shift=int(self["adaptive"]["level_shift"]),
            solver=fem["solver"],
            threads=int(self["threads"]),
            tolerance=float(fem["tolerance"]),
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)
