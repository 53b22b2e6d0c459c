"""Sparse dictionary updating: alternate sparse recovery, clustering, ML refinement
and grid adaptation.

Each iteration i:
    s_hat  <- sparse fit of the RSS on the current grid dictionary
    A      <- the K weakest non-zero grid points (dropped at the end of the iteration)
    D      <- grid points with s_hat >= max(s_hat) - std(s_hat)
    T      <- K-means on D, s_hat-weighted centroids
    theta  <- ML solve started from (T, P^{i-1}, sigma^{i-1}); if its objective is
              worse than theta^{i-1}'s, theta^{i-1} is kept (``keep_incumbent``)
    G      <- G + Q^i - A

With ``iterations=1`` this is the SR-ML ablation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .ml import Bounds, InfeasibleThetaError, NonFiniteObjectiveError, SolverOptions, ThetaEstimate, solve_ml
from .scene import Observation
from .sparse import (DEDUP_TOL, Grid, adaptive_threshold, build_dictionary, build_grid,
                     cluster_centers, select_discard_set, solve_sparse, truncate)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SduConfig:
    k_sources: int = 3
    iterations: int = 7
    lam: float = 1e-2
    grid_n: int = 441
    p_low: float = 2000.0
    p_high: float = 4000.0
    sigma_init: float = 6.0
    sigma_min: float = 0.5
    sigma_max: float = 14.0
    solver: SolverOptions = field(default_factory=SolverOptions)
    sparse_max_iter: int = 1000
    sparse_tol: float = 1e-8
    kmeans_restarts: int = 10
    merge_frac: float = 0.25     # merge radius, in initial grid spacings
    pad_distance: float = 400.0  # meters between padding centers and other centers
    keep_incumbent: bool = True  # keep theta^{i-1} when the new ML objective is worse

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.k_sources < 1:
            raise ValueError("need at least one source")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.k_sources > self.grid_n:
            raise ValueError("more sources than grid points")

    @property
    def p_init(self) -> float:
        return 0.5 * (self.p_low + self.p_high)

    def bounds(self, roi) -> Bounds:
        return Bounds(roi, self.p_low, self.p_high, self.sigma_min, self.sigma_max)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    objective: float
    locations: np.ndarray       # Q^i
    powers: np.ndarray          # P^i
    sigma_db: float             # sigma^i
    grid_size: int              # |G^i| used in this iteration
    initial_centers: np.ndarray  # T^i
    n_candidates: int
    ml_converged: bool
    fallback: bool = False
    kept_previous: bool = False
    s_hat: np.ndarray | None = None

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "objective": self.objective,
            "locations": self.locations.tolist(),
            "powers": self.powers.tolist(),
            "sigma_db": self.sigma_db,
            "grid_size": self.grid_size,
            "initial_centers": self.initial_centers.tolist(),
            "n_candidates": self.n_candidates,
            "ml_converged": self.ml_converged,
            "fallback": self.fallback,
            "kept_previous": self.kept_previous,
        }


@dataclass(frozen=True, eq=False)
class SduResult:
    locations: np.ndarray
    powers: np.ndarray
    sigma_hat: float
    trace: list

    @property
    def objective(self) -> float:
        return self.trace[-1].objective

    def at_iteration(self, i: int) -> "SduResult":
        """The estimate a run with ``iterations=i`` would have returned."""
        if not 1 <= i <= len(self.trace):
            raise IndexError(f"iteration {i} not in 1..{len(self.trace)}")
        rec = self.trace[i - 1]
        return SduResult(rec.locations, rec.powers, rec.sigma_db, self.trace[:i])


def iteration_seed(rng_seed, i: int) -> np.random.SeedSequence:
    base = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + (i,))


def update_grid(grid: Grid, new_points, discard, merge_radius: float = DEDUP_TOL) -> Grid:
    """Order-preserving G + Q - A.

    A new point replaces every existing point within ``merge_radius`` of it, so
    re-estimated locations move instead of piling up as near-copies.
    """
    new_points = np.atleast_2d(np.asarray(new_points, dtype=float)).reshape(-1, 2)
    discard = np.atleast_2d(np.asarray(discard, dtype=float)).reshape(-1, 2)
    if len(new_points) and not grid.roi.contains(new_points):
        raise ValueError("new grid point outside ROI")
    radius = max(merge_radius, DEDUP_TOL)
    pts = grid.points
    keep = np.ones(len(pts), dtype=bool)
    for a in discard:
        keep &= ~((np.abs(pts[:, 0] - a[0]) <= DEDUP_TOL) & (np.abs(pts[:, 1] - a[1]) <= DEDUP_TOL))
    added = []
    for q in new_points:
        keep &= np.hypot(pts[:, 0] - q[0], pts[:, 1] - q[1]) > radius
        if all(np.hypot(*(q - p)) > radius for p in added):
            added.append(q)
    out = np.vstack([pts[keep]] + [np.atleast_2d(added)] if added else [pts[keep]])
    return Grid(out.reshape(-1, 2), grid.roi)


def match_slots(previous, current) -> np.ndarray:
    """Greedy nearest-neighbour pairing; ``out[j]`` is the previous slot for current slot j."""
    previous = np.atleast_2d(previous)
    current = np.atleast_2d(current)
    d = np.hypot(current[:, None, 0] - previous[None, :, 0], current[:, None, 1] - previous[None, :, 1])
    out = np.full(len(current), -1)
    used_prev, used_cur = set(), set()
    for flat in np.argsort(d, axis=None, kind="stable"):
        j, i = divmod(int(flat), d.shape[1])
        if j in used_cur or i in used_prev:
            continue
        out[j] = i
        used_cur.add(j)
        used_prev.add(i)
        if len(used_cur) == len(current):
            break
    return out


def padding_points(s_hat, grid: Grid, chosen, k: int, min_dist: float) -> np.ndarray | None:
    """Up to k strongest grid points outside ``chosen``, each at least ``min_dist``
    from the chosen candidates and from each other."""
    chosen = np.asarray(chosen, dtype=int)
    picked = list(grid.points[chosen])
    taken = set(chosen.tolist())
    out = []
    for j in np.argsort(-np.asarray(s_hat), kind="stable"):
        if j in taken:
            continue
        p = grid.points[j]
        if all(np.hypot(*(p - c)) > min_dist for c in picked):
            out.append(p)
            picked.append(p)
            if len(out) == k:
                break
    return np.array(out) if out else None


def run_sdu(obs: Observation, config: SduConfig, rng_seed=0, *, keep_s_hat: bool = False) -> SduResult:
    k = config.k_sources
    bounds = config.bounds(obs.roi)
    alpha = obs.alpha
    grid = build_grid(obs.roi, config.grid_n)
    side = int(np.sqrt(config.grid_n))
    spacing = min(obs.roi.length_l, obs.roi.width_w) / (side - 1)
    merge_radius = config.merge_frac * spacing
    phi = build_dictionary(grid, obs.sensors, alpha)

    powers = np.full(k, config.p_init)
    sigma = float(np.clip(config.sigma_init, config.sigma_min, config.sigma_max))
    prev_q = None
    incumbent = None  # (theta, objective) of the previous iteration
    trace = []
    for i in range(1, config.iterations + 1):
        sol = solve_sparse(phi, obs.rss_linear, config.lam,
                           max_iter=config.sparse_max_iter, tol=config.sparse_tol)
        s_hat = sol.s_hat
        discard_idx = select_discard_set(s_hat, grid, k)
        thr = adaptive_threshold(s_hat)
        cand_pts, cand_w, cand_idx = truncate(s_hat, grid, thr)
        fallback = None
        if len(cand_idx) < k:
            fallback = padding_points(s_hat, grid, cand_idx, k, config.pad_distance)
        centers = cluster_centers(cand_pts, cand_w, k, iteration_seed(rng_seed, i),
                                  fallback=fallback, restarts=config.kmeans_restarts).centers
        centers = np.clip(centers, 0.0, [obs.roi.length_l, obs.roi.width_w])

        init_p = powers if prev_q is None else powers[match_slots(prev_q, centers)]
        initial = ThetaEstimate.from_locations(centers, init_p, sigma)
        fell_back = False
        try:
            report = solve_ml(initial, obs, alpha, bounds, config.solver)
            theta, obj, conv = report.theta, report.objective, report.converged
        except (NonFiniteObjectiveError, InfeasibleThetaError, np.linalg.LinAlgError) as exc:
            log.warning("ML solve failed in iteration %d, keeping cluster centers: %s", i, exc)
            theta, obj, conv, fell_back = initial, float("nan"), False, True

        kept = False
        if config.keep_incumbent and incumbent is not None and not obj <= incumbent[1]:
            theta, obj, kept = incumbent[0], incumbent[1], True
        if np.isfinite(obj):
            incumbent = (theta, obj)
        q = theta.locations
        powers = theta.source_p.copy()
        sigma = theta.shadow_sigma_db
        trace.append(IterationRecord(i, obj, q, powers, sigma, len(grid), centers, len(cand_idx),
                                     conv, fell_back, kept, s_hat if keep_s_hat else None))
        prev_q = q
        if i < config.iterations:
            new_grid = update_grid(grid, q, grid.points[discard_idx], merge_radius)
            expected = len(grid) + len(q) - len(discard_idx)
            if len(new_grid) != expected:
                log.debug("grid dedup collision in iteration %d: %d != %d", i, len(new_grid), expected)
            phi = build_dictionary(new_grid, obs.sensors, alpha, previous=phi)
            grid = new_grid

    last = trace[-1]
    return SduResult(last.locations, last.powers, last.sigma_db, trace)


def run_sr_ml(obs: Observation, config: SduConfig, rng_seed=0, **kw) -> SduResult:
    return run_sdu(obs, replace(config, iterations=1), rng_seed, **kw)
