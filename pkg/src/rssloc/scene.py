"""Ground-truth geometry and the log-normal shadowing forward model.

Received power at sensor m is the superposition

    r_m = sum_k P_k * max(d_mk, 1)**(-alpha) * 10**(xi_mk / 10),   xi_mk ~ N(0, sigma_db**2)

in linear scale (mW).  Distances below one meter are clamped, so a sensor
sitting on top of a source reads P_k from it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .config import ExperimentConfig

MIN_DISTANCE = 1.0  # meters; sub-1m links are clamped in model and estimators alike


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Roi:
    length_l: float
    width_w: float

    def __post_init__(self):
        if not (self.length_l > 0 and self.width_w > 0):
            raise SceneError(f"ROI sides must be positive, got {self.length_l} x {self.width_w}")

    @property
    def area(self) -> float:
        return self.length_l * self.width_w

    def contains(self, points, tol: float = 1e-9) -> bool:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return bool(np.all((pts[:, 0] >= -tol) & (pts[:, 0] <= self.length_l + tol)
                           & (pts[:, 1] >= -tol) & (pts[:, 1] <= self.width_w + tol)))


@dataclass(frozen=True, eq=False)
class Scene:
    roi: Roi
    sensors: np.ndarray          # (M, 2) meters
    source_xy: np.ndarray        # (K, 2) meters
    source_p: np.ndarray         # (K,) mW
    path_loss_alpha: float = 2.5
    shadow_sigma_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "sensors", np.atleast_2d(np.asarray(self.sensors, dtype=float)))
        object.__setattr__(self, "source_xy", np.atleast_2d(np.asarray(self.source_xy, dtype=float)))
        object.__setattr__(self, "source_p", np.atleast_1d(np.asarray(self.source_p, dtype=float)))
        self.validate()

    def validate(self):
        if self.sensors.ndim != 2 or self.sensors.shape[1] != 2 or len(self.sensors) < 1:
            raise SceneError("need at least one 2-D sensor position")
        if self.source_xy.shape[1] != 2 or len(self.source_xy) < 1:
            raise SceneError("need at least one 2-D source position")
        if len(self.source_p) != len(self.source_xy):
            raise SceneError("one power per source required")
        if not self.roi.contains(self.sensors):
            raise SceneError("sensor outside ROI")
        if not self.roi.contains(self.source_xy):
            raise SceneError("source outside ROI")
        if not np.all(self.source_p > 0):
            raise SceneError("source powers must be positive")
        if not self.path_loss_alpha > 0:
            raise SceneError("path-loss exponent must be positive")
        if not self.shadow_sigma_db >= 0:
            raise SceneError("shadow fading sigma must be non-negative")

    @property
    def n_sensors(self) -> int:
        return len(self.sensors)

    @property
    def n_sources(self) -> int:
        return len(self.source_xy)


@dataclass(frozen=True, eq=False)
class Observation:
    rss_linear: np.ndarray       # (M,) mW
    sensors: np.ndarray          # (M, 2)
    roi: Roi
    alpha: float = 2.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rss = np.atleast_1d(np.asarray(self.rss_linear, dtype=float))
        sensors = np.atleast_2d(np.asarray(self.sensors, dtype=float))
        object.__setattr__(self, "rss_linear", rss)
        object.__setattr__(self, "sensors", sensors)
        if sensors.shape != (len(rss), 2):
            raise SceneError(f"{len(rss)} RSS values but sensor array has shape {sensors.shape}")
        if len(rss) < 1:
            raise SceneError("empty observation")
        if not np.all(np.isfinite(rss)) or not np.all(rss > 0):
            raise SceneError("RSS values must be finite and strictly positive")

    @property
    def log_rss(self) -> np.ndarray:
        return np.log(self.rss_linear)


def distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(np.hypot(*(p - q)))


def pairwise_distances(a, b) -> np.ndarray:
    """Euclidean distances between rows of ``a`` (n, 2) and ``b`` (m, 2), shape (n, m)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def clamped(d):
    return np.maximum(d, MIN_DISTANCE)


def mean_gains(scene: Scene) -> np.ndarray:
    """Noise-free per-link received powers P_k * d_mk**-alpha, shape (M, K)."""
    d = clamped(pairwise_distances(scene.sensors, scene.source_xy))
    return scene.source_p[None, :] * d ** (-scene.path_loss_alpha)


def draw_link_rss(scene: Scene, rng: np.random.Generator, n_draws: int | None = None) -> np.ndarray:
    """Per-link shadowed powers r_mk; shape (M, K) or (n_draws, M, K)."""
    g = mean_gains(scene)
    shape = g.shape if n_draws is None else (n_draws,) + g.shape
    if scene.shadow_sigma_db == 0:
        return np.broadcast_to(g, shape).copy()
    xi = rng.normal(0.0, scene.shadow_sigma_db, size=shape)
    return g * 10.0 ** (xi / 10.0)


def simulate_rss(scene: Scene, rng_seed) -> Observation:
    scene.validate()
    rng = np.random.default_rng(rng_seed)
    r = draw_link_rss(scene, rng).sum(axis=1)
    return Observation(r, scene.sensors.copy(), scene.roi, scene.path_loss_alpha)


def generate_scene(config: "ExperimentConfig", rng_seed, max_tries: int = 1000) -> Scene:
    """Uniform random sensors/sources with a minimum pairwise source separation."""
    rng = np.random.default_rng(rng_seed)
    roi = Roi(config.roi_l, config.roi_w)
    lo, hi = config.power_range
    size = np.array([roi.length_l, roi.width_w])
    sensors = rng.uniform(0.0, 1.0, size=(config.m_sensors, 2)) * size

    sources = np.empty((0, 2))
    tries = 0
    while len(sources) < config.k_sources:
        if tries >= max_tries:
            raise SceneError(
                f"could not place {config.k_sources} sources {config.min_separation} m apart "
                f"after {max_tries} draws")
        tries += 1
        cand = rng.uniform(0.0, 1.0, size=2) * size
        if len(sources) and np.min(np.hypot(*(sources - cand).T)) < config.min_separation:
            continue
        sources = np.vstack([sources, cand])
    powers = rng.uniform(lo, hi, size=config.k_sources)
    return Scene(roi, sensors, sources, powers, config.alpha, config.sigma_db)


# -- serialization -----------------------------------------------------------

def scene_to_dict(scene: Scene, obs: Observation | None = None) -> dict:
    d = {
        "roi": [scene.roi.length_l, scene.roi.width_w],
        "alpha": scene.path_loss_alpha,
        "sigma": scene.shadow_sigma_db,
        "sensors": scene.sensors.tolist(),
        "sources": [{"u": float(u), "v": float(v), "p": float(p)}
                    for (u, v), p in zip(scene.source_xy, scene.source_p)],
    }
    if obs is not None:
        d["rss"] = obs.rss_linear.tolist()
    return d


def scene_from_dict(d: dict) -> tuple[Scene, Observation | None]:
    roi = Roi(*map(float, d["roi"]))
    src = d["sources"]
    scene = Scene(roi, np.array(d["sensors"], dtype=float),
                  np.array([[s["u"], s["v"]] for s in src], dtype=float),
                  np.array([s["p"] for s in src], dtype=float),
                  float(d["alpha"]), float(d["sigma"]))
    obs = None
    if "rss" in d:
        obs = Observation(np.array(d["rss"], dtype=float), scene.sensors, roi, scene.path_loss_alpha)
    return scene, obs


def save_scene(path, scene: Scene, obs: Observation | None = None):
    Path(path).write_text(json.dumps(scene_to_dict(scene, obs), indent=1))


def load_scene(path):
    return scene_from_dict(json.loads(Path(path).read_text()))


# Observation text format:
#   # roi <l> <w>
#   # alpha <alpha>
#   id,u,v,rss_mw
#   0,12.5,300.0,1.234e-04
OBS_COLUMNS = ("id", "u", "v", "rss_mw")


def write_observation(path, obs: Observation):
    lines = [f"# roi {float(obs.roi.length_l)!r} {float(obs.roi.width_w)!r}",
             f"# alpha {float(obs.alpha)!r}", ",".join(OBS_COLUMNS)]
    for i, ((u, v), r) in enumerate(zip(obs.sensors.tolist(), obs.rss_linear.tolist())):
        lines.append(f"{i},{u!r},{v!r},{r!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_observation(path) -> Observation:
    header = {}
    rows = []
    seen_columns = False
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts:
                header[parts[0]] = parts[1:]
            continue
        if not seen_columns:
            if tuple(c.strip() for c in line.split(",")) != OBS_COLUMNS:
                raise SceneError(f"{path}:{lineno}: expected header {','.join(OBS_COLUMNS)}")
            seen_columns = True
            continue
        cells = line.split(",")
        if len(cells) != 4:
            raise SceneError(f"{path}:{lineno}: expected 4 fields, got {len(cells)}")
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise SceneError(f"{path}:{lineno}: {exc}") from None
    if "roi" not in header or len(header["roi"]) != 2:
        raise SceneError(f"{path}: missing '# roi <l> <w>' header")
    if not rows:
        raise SceneError(f"{path}: no sensor rows")
    try:
        roi = Roi(float(header["roi"][0]), float(header["roi"][1]))
        alpha = float(header["alpha"][0]) if "alpha" in header else 2.5
    except (ValueError, IndexError) as exc:
        raise SceneError(f"{path}: bad header: {exc}") from None
    arr = np.array(rows)
    if not roi.contains(arr[:, :2]):
        raise SceneError(f"{path}: sensor outside ROI")
    return Observation(arr[:, 2], arr[:, :2], roi, alpha)
