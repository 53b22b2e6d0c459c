"""Experiment configuration: a flat JSON-serializable record with validation
and the four study presets (sigma, sensors, sources, iterations)."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields, replace

from .ml import SolverOptions

ALGORITHMS = ("sdu", "sr-ml")
SWEEP_KINDS = ("sigma", "sensors", "sources", "iterations")

# field each sweep varies, and the values it takes by default
SWEEP_FIELD = {"sigma": "sigma_db", "sensors": "m_sensors", "sources": "k_sources",
               "iterations": "iterations"}

# fixed parameters of each study; applied before file values and flags
SWEEP_PRESETS = {
    "sigma": {"m_sensors": 90, "n_grid": 441, "k_sources": 3},
    "sensors": {"sigma_db": 4.0, "n_grid": 441, "k_sources": 3},
    "sources": {"sigma_db": 4.0, "m_sensors": 90, "n_grid": 441},
    "iterations": {"sigma_db": 4.0, "m_sensors": 120, "n_grid": 121, "k_sources": 3},
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    roi_l: float = 2000.0
    roi_w: float = 2000.0
    m_sensors: int = 90
    k_sources: int = 3
    n_grid: int = 441
    alpha: float = 2.5
    sigma_db: float = 4.0
    power_range: tuple = (2000.0, 4000.0)
    min_separation: float = 100.0
    iterations: int = 7
    lam: float = 1e-2
    algorithm: str = "sdu"
    j_trials: int = 200
    master_seed: int = 0
    workers: int = 0                   # 0: one per CPU
    # solver options
    sigma_init: float = 6.0
    sigma_bounds: tuple = (0.5, 14.0)
    ml_max_iter: int = 200
    ml_grad_tol: float = 1e-6
    ml_step_tol: float = 1e-8
    sparse_max_iter: int = 1000
    sparse_tol: float = 1e-8
    kmeans_restarts: int = 10
    merge_frac: float = 0.25
    pad_distance: float = 400.0
    keep_incumbent: bool = True
    # sweeps and reporting
    sigma_values: tuple = (2.0, 4.0, 6.0, 8.0, 10.0)
    sensor_values: tuple = (60, 80, 100, 120, 140)
    source_values: tuple = (2, 3, 4, 5, 6)
    iteration_values: tuple = (1, 3, 5, 7, 9, 11, 13, 15)
    rmef_d: tuple = (0.05, 0.1, 0.15, 0.2)
    out_dir: str = "results"
    dump_intermediate: bool = False

    @property
    def effective_iterations(self) -> int:
        return 1 if self.algorithm == "sr-ml" else self.iterations

    def sweep_values(self, kind: str) -> tuple:
        return {"sigma": self.sigma_values, "sensors": self.sensor_values,
                "sources": self.source_values, "iterations": self.iteration_values}[kind]

    def problems(self) -> list:
        out = []

        def need(ok, msg):
            if not ok:
                out.append(msg)

        need(self.roi_l > 0 and self.roi_w > 0, "roi_l and roi_w must be positive")
        need(self.m_sensors >= 1, "m_sensors must be >= 1")
        need(self.k_sources >= 1, "k_sources must be >= 1")
        side = math.isqrt(max(self.n_grid, 0))
        need(side * side == self.n_grid and side >= 2, "n_grid must be a perfect square >= 4")
        need(self.k_sources <= self.n_grid, "k_sources must not exceed n_grid")
        need(self.alpha > 0, "alpha must be positive")
        need(self.sigma_db >= 0, "sigma_db must be >= 0")
        lo, hi = self.power_range
        need(0 < lo <= hi, "power_range must satisfy 0 < low <= high")
        need(self.min_separation >= 0, "min_separation must be >= 0")
        need(self.iterations >= 1, "iterations must be >= 1")
        need(self.lam > 0, "lam must be positive")
        need(self.algorithm in ALGORITHMS, f"algorithm must be one of {ALGORITHMS}")
        need(self.j_trials >= 1, "j_trials must be >= 1")
        need(self.master_seed >= 0, "master_seed must be >= 0")
        need(self.workers >= 0, "workers must be >= 0")
        smin, smax = self.sigma_bounds
        need(0 < smin <= smax, "sigma_bounds must satisfy 0 < min <= max")
        need(self.sigma_init > 0, "sigma_init must be positive")
        need(self.ml_max_iter >= 1 and self.sparse_max_iter >= 1, "iteration caps must be >= 1")
        need(self.ml_grad_tol > 0 and self.ml_step_tol > 0 and self.sparse_tol > 0,
             "tolerances must be positive")
        need(self.kmeans_restarts >= 1, "kmeans_restarts must be >= 1")
        need(self.merge_frac >= 0 and self.pad_distance >= 0, "merge_frac and pad_distance must be >= 0")
        for name, vals, ok in [("sigma_values", self.sigma_values, lambda v: v >= 0),
                               ("sensor_values", self.sensor_values, lambda v: v >= 1),
                               ("source_values", self.source_values, lambda v: 1 <= v <= self.n_grid),
                               ("iteration_values", self.iteration_values, lambda v: v >= 1),
                               ("rmef_d", self.rmef_d, lambda v: v >= 0)]:
            need(len(vals) > 0, f"{name} must be non-empty")
            need(all(ok(v) for v in vals), f"{name} has out-of-range entries")
        return out

    def validate(self) -> "ExperimentConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def sdu_config(self, iterations: int | None = None):
        from .sdu import SduConfig
        return SduConfig(
            k_sources=self.k_sources, iterations=iterations or self.effective_iterations,
            lam=self.lam, grid_n=self.n_grid, p_low=self.power_range[0], p_high=self.power_range[1],
            sigma_init=self.sigma_init, sigma_min=self.sigma_bounds[0], sigma_max=self.sigma_bounds[1],
            solver=SolverOptions(max_iter=self.ml_max_iter, grad_tol=self.ml_grad_tol,
                                 step_tol=self.ml_step_tol),
            sparse_max_iter=self.sparse_max_iter, sparse_tol=self.sparse_tol,
            kmeans_restarts=self.kmeans_restarts, merge_frac=self.merge_frac,
            pad_distance=self.pad_distance, keep_incumbent=self.keep_incumbent)

    def with_sweep_value(self, kind: str, value) -> "ExperimentConfig":
        f = SWEEP_FIELD[kind]
        return replace(self, **{f: type(getattr(self, f))(value)})

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError([f"unknown config key(s): {', '.join(unknown)}"])
        kw, problems = {}, []
        for name, value in d.items():
            try:
                kw[name] = _coerce(known[name], value)
            except (TypeError, ValueError) as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def _coerce(f: dataclasses.Field, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise TypeError("expected a list")
        kind = type(default[0]) if default else float
        return tuple(_scalar(kind, v) for v in value)
    return _scalar(type(default), value)


def _scalar(kind, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise TypeError("expected true/false")
        return value
    if kind is int:
        if isinstance(value, bool) or not float(value).is_integer():
            raise TypeError(f"expected an integer, got {value!r}")
        return int(value)
    if kind is float:
        if isinstance(value, bool):
            raise TypeError("expected a number")
        return float(value)
    if not isinstance(value, str):
        raise TypeError("expected a string")
    return value


def load_config(path=None, overrides: dict | None = None, sweep: str | None = None) -> ExperimentConfig:
    """Defaults, then the study preset, then file values, then ``overrides``."""
    d = {}
    if sweep is not None:
        d.update(SWEEP_PRESETS[sweep])
    if path is not None:
        try:
            with open(path) as fh:
                file_d = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"{path}: cannot read ({exc.strerror})"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
        if not isinstance(file_d, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        d.update(file_d)
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d)


def schema() -> dict:
    """Field name -> (type, default), the published schema of the config file."""
    out = {}
    for f in fields(ExperimentConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        t = f"list[{type(default[0]).__name__}]" if isinstance(default, tuple) else type(default).__name__
        out[f.name] = {"type": t, "default": list(default) if isinstance(default, tuple) else default}
    return out
