"""Grid dictionary, non-negative l1 sparse recovery, truncation and clustering.

The sparse step fits the linear-scale RSS vector with a non-negative
combination of path-loss atoms d_mn**-alpha, one per grid point, and turns the
recovered coefficients into K rough source positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import Roi, clamped, pairwise_distances

DEDUP_TOL = 1e-9          # meters; grid points closer than this are the same point
NONZERO_FLOOR = 1e-12     # relative to max(s_hat)


@dataclass(frozen=True, eq=False)
class Grid:
    points: np.ndarray    # (N, 2)
    roi: Roi

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("grid points must have shape (N, 2)")
        if not self.roi.contains(pts):
            raise ValueError("grid point outside ROI")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class GridDictionary:
    grid: Grid
    phi: np.ndarray       # (M, N)
    alpha: float

    @property
    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.phi, axis=0)


@dataclass(frozen=True, eq=False)
class SparseSolution:
    s_hat: np.ndarray
    objective: float
    iterations: int
    converged: bool

    @property
    def support(self) -> np.ndarray:
        return nonzero_indices(self.s_hat)


@dataclass(frozen=True, eq=False)
class ClusterCenters:
    centers: np.ndarray       # (K, 2)
    labels: np.ndarray        # cluster index per candidate, -1 for padded centers
    padded: int = 0


def nonzero_indices(s_hat) -> np.ndarray:
    s_hat = np.asarray(s_hat, dtype=float)
    if s_hat.size == 0 or s_hat.max() <= 0:
        return np.empty(0, dtype=int)
    return np.flatnonzero(s_hat > NONZERO_FLOOR * s_hat.max())


def build_grid(roi: Roi, n_points: int) -> Grid:
    side = math.isqrt(int(n_points))
    if side * side != n_points or side < 2:
        raise ValueError(f"grid size must be a perfect square >= 4, got {n_points}")
    xs = np.linspace(0.0, roi.length_l, side)
    ys = np.linspace(0.0, roi.width_w, side)
    gx, gy = np.meshgrid(xs, ys)        # row-major in y, x varies fastest
    return Grid(np.column_stack([gx.ravel(), gy.ravel()]), roi)


def build_dictionary(grid: Grid, sensors, alpha: float,
                     previous: GridDictionary | None = None) -> GridDictionary:
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    if len(sensors) < 1:
        raise ValueError("need at least one sensor")
    if previous is None or previous.alpha != alpha or previous.phi.shape[0] != len(sensors):
        phi = clamped(pairwise_distances(sensors, grid.points)) ** (-alpha)
        return GridDictionary(grid, phi, alpha)

    known = {tuple(p): j for j, p in enumerate(previous.grid.points)}
    phi = np.empty((len(sensors), len(grid)))
    fresh = []
    for j, p in enumerate(grid.points):
        col = known.get(tuple(p))
        if col is None:
            fresh.append(j)
        else:
            phi[:, j] = previous.phi[:, col]
    if fresh:
        phi[:, fresh] = clamped(pairwise_distances(sensors, grid.points[fresh])) ** (-alpha)
    return GridDictionary(grid, phi, alpha)


def sparse_objective(phi, rss, s, lam) -> float:
    return float(np.linalg.norm(rss - phi @ s) + lam * np.sum(np.abs(s)))


def _nn_prox_grad(A, b, lam, z0, max_iter, tol):
    """Non-negative square-root LASSO  min ||b - A z|| + lam * sum(z), z >= 0.

    Solved as a scaled LASSO: FISTA on 0.5 ||b - A z||^2 + lam * rho * sum(z)
    with rho = ||b - A z|| refreshed every step; a fixed point of the pair
    minimizes the square-root form.  The step starts at 1/||A||^2 and
    backtracks if the quadratic upper bound fails.
    """
    L = float(np.linalg.norm(A, 2)) ** 2 or 1.0
    z = z0.copy()
    rz = A @ z - b              # residual at z
    y, ry = z, rz               # extrapolated point and its residual
    t = 1.0
    rho = max(math.sqrt(float(rz @ rz)), 1e-15)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        fy = 0.5 * float(ry @ ry)
        g = A.T @ ry
        for _ in range(60):
            z_new = y - (g + lam * rho) / L
            np.maximum(z_new, 0.0, out=z_new)
            dz = z_new - y
            rn = A @ z_new - b
            # ry is propagated by linearity, so allow for its rounding drift
            if 0.5 * float(rn @ rn) <= fy + float(g @ dz) + 0.5 * L * float(dz @ dz) + 1e-12 * fy:
                break
            L *= 2.0
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        mom = (t - 1) / t_new
        step = z_new - z
        y = z_new + mom * step
        ry = rn + mom * (rn - rz)
        change = math.sqrt(float(step @ step))
        scale = math.sqrt(float(z_new @ z_new))
        z, rz, t = z_new, rn, t_new
        rho = max(math.sqrt(float(rn @ rn)), 1e-15)
        if change <= tol * max(scale, 1e-300):
            converged = True
            break
    return z, it, converged


def _nn_lasso_exact(G, c, mu, z, max_rounds=2000):
    """Lawson-Hanson active set for  min 0.5 z^T G z - c^T z + mu sum(z), z >= 0.

    Works on the Gram matrix G = A^T A and c = A^T b; ``z`` is a feasible
    warm start.  Returns None if a passive set becomes rank deficient.
    """
    z = z.copy()
    passive = list(np.flatnonzero(z > 0))
    rhs = c - mu
    for _ in range(max_rounds):
        if passive:
            sub = np.ix_(passive, passive)
            try:
                s_p = np.linalg.solve(G[sub], rhs[passive])
            except np.linalg.LinAlgError:
                return None
            if np.all(s_p > 0):
                z[:] = 0.0
                z[passive] = s_p
            else:
                cur = z[passive]
                neg = s_p <= 0
                step = np.min(cur[neg] / (cur[neg] - s_p[neg]))
                cur = cur + step * (s_p - cur)
                drop = neg & (cur <= 1e-14 * max(cur.max(), 1e-300))
                drop[np.argmin(np.where(neg, cur / np.maximum(cur - s_p, 1e-300), np.inf))] = True
                z[:] = 0.0
                passive = [j for j, d in zip(passive, drop) if not d]
                z[passive] = cur[~drop]
                continue
        w = rhs - G @ z
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= 1e-13 * max(1.0, float(np.abs(c).max())):
            return z
        passive.append(j)
    return None


def _sqrt_lasso_exact(A, b, lam, z0, max_outer=200):
    """Alternate an exact non-negative LASSO solve at mu = lam * rho with
    rho = ||A z - b||; the pair decreases ||A z - b||^2 / (2 rho) + rho / 2 +
    lam sum(z), whose minimum in z is the square-root LASSO optimum.  Returns
    None if the residual collapses (the optimum is then an exact fit)."""
    G = A.T @ A
    c = A.T @ b
    bnorm = float(np.linalg.norm(b))
    z = np.maximum(z0, 0.0)
    rho = max(float(np.linalg.norm(A @ z - b)), 1e-6 * bnorm)
    for _ in range(max_outer):
        z = _nn_lasso_exact(G, c, lam * rho, z)
        if z is None:
            return None
        new_rho = float(np.linalg.norm(A @ z - b))
        if new_rho <= 1e-10 * bnorm:
            return None
        if abs(new_rho - rho) <= 1e-13 * bnorm:
            return z
        rho = new_rho
    return z


def _basis_pursuit(A, b):
    """min 1^T z subject to A z = b, z >= 0, or None if infeasible."""
    from scipy.optimize import linprog
    res = linprog(np.ones(A.shape[1]), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:
        return None
    z = np.asarray(res.x, dtype=float)
    z[z < 1e-12 * max(z.max(), 1e-300)] = 0.0
    return z


def solve_sparse(dictionary: GridDictionary, rss, lam: float = 1e-3, *, normalize: bool = True,
                 max_iter: int = 1000, tol: float = 1e-8, polish: bool = True) -> SparseSolution:
    """Approximately solve  min ||r - Phi s||_2 + lam ||s||_1  over s >= 0.

    With ``normalize`` (the default) the atoms are scaled to unit norm and the
    data to unit norm before solving, i.e. lam is relative to the data and the
    l1 term is weighted by the atom norms; coefficients are mapped back to
    the physical scale of ``Phi``.  ``normalize=False`` solves the literal
    problem.  The reported objective is the one actually minimized, and is
    never above its value at s = 0.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    phi = dictionary.phi
    r = np.asarray(rss, dtype=float)
    n = phi.shape[1]
    if r.shape != (phi.shape[0],):
        raise ValueError(f"rss length {r.shape} does not match dictionary rows {phi.shape[0]}")
    rnorm = float(np.linalg.norm(r))
    if rnorm == 0:
        return SparseSolution(np.zeros(n), 0.0, 0, True)

    if normalize:
        cn = dictionary.column_norms
        A = phi / cn
        b = r / rnorm
    else:
        cn = np.ones(n)
        A, b = phi, r
    z, it, conv = _nn_prox_grad(A, b, lam, np.zeros(n), max_iter, tol)
    obj = sparse_objective(A, b, z, lam)
    if polish:
        # finish on an exact support: either a positive-residual stationary
        # point or, when an exact fit is cheaper, the basis-pursuit vertex
        for cand in (_sqrt_lasso_exact(A, b, lam, z), _basis_pursuit(A, b)):
            if cand is not None:
                c_obj = sparse_objective(A, b, cand, lam)
                if c_obj <= obj + 1e-12 * max(obj, 1.0):
                    z, obj, conv = cand, c_obj, True
    obj0 = float(np.linalg.norm(b))
    if not obj <= obj0:
        z, obj = np.zeros(n), obj0
    s_hat = z / cn * (rnorm if normalize else 1.0)
    return SparseSolution(s_hat, obj, it, conv)


def adaptive_threshold(s_hat) -> float:
    s = np.asarray(s_hat, dtype=float)
    if s.size == 0:
        raise ValueError("empty coefficient vector")
    return float(s.max() - s.std())      # population std


def truncate(s_hat, grid: Grid, thr: float):
    """Candidate points with s_hat >= thr, as (points, weights, grid indices)."""
    s = np.asarray(s_hat, dtype=float)
    keep = np.flatnonzero(s >= thr)
    if keep.size == 0:        # guard against rounding in max - std
        keep = np.array([int(np.argmax(s))])
    return grid.points[keep], s[keep], keep


def _kmeans(x, k, rng, restarts=10, max_iter=100, weights=None):
    """Lloyd's algorithm on positions; seeds drawn with probability ~ weights."""
    h = len(x)
    if weights is None or not np.any(weights > 0):
        prob = np.full(h, 1.0 / h)
    else:
        prob = np.clip(weights, 0, None) / np.clip(weights, 0, None).sum()
    best_labels, best_inertia = None, np.inf
    for _ in range(restarts):
        npos = int(np.count_nonzero(prob))
        if npos >= k:
            seeds = rng.choice(h, size=k, replace=False, p=prob)
        else:
            first = np.flatnonzero(prob)
            rest = rng.choice(np.setdiff1d(np.arange(h), first), size=k - npos, replace=False)
            seeds = np.concatenate([first, rest])
        centers = x[seeds].copy()
        labels = np.full(h, -1)
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = np.argmin(d2, axis=1)
            _fill_empty(new_labels, d2, k)
            for j in range(k):
                centers[j] = x[new_labels == j].mean(axis=0)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = float(((x - centers[labels]) ** 2).sum())
        if best_labels is None or inertia < best_inertia - 1e-12 * best_inertia:
            best_inertia, best_labels = inertia, labels.copy()
    return best_labels


def _fill_empty(labels, d2, k):
    # move the worst-served point of a multi-member cluster into each empty one
    h = len(labels)
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        movable = counts[labels] > 1
        cost = np.where(movable, d2[np.arange(h), labels], -np.inf)
        labels[int(np.argmax(cost))] = j


def weighted_centroids(points, weights, labels, k):
    centers = np.empty((k, 2))
    for j in range(k):
        m = labels == j
        w = weights[m]
        if w.sum() > 0:
            centers[j] = (w[:, None] * points[m]).sum(axis=0) / w.sum()
        else:
            centers[j] = points[m].mean(axis=0)
    return centers


def cluster_centers(points, weights, k: int, rng_seed=None, *, fallback=None,
                    restarts: int = 10) -> ClusterCenters:
    """K-means on candidate positions, then the weight-averaged center of each cluster.

    ``fallback`` lists extra points, strongest first, used to pad when there
    are fewer candidates than clusters.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.asarray(weights, dtype=float)
    h = len(points)
    if h < 1:
        raise ValueError("no candidates to cluster")
    if h <= k:
        centers = [p for p in points]
        labels = np.arange(h)
        pool = [] if fallback is None else list(np.atleast_2d(fallback))
        strongest = points[int(np.argmax(weights))]
        while len(centers) < k:
            centers.append(pool.pop(0) if pool else strongest)
        return ClusterCenters(np.array(centers, dtype=float), labels, padded=k - h)
    rng = np.random.default_rng(rng_seed)
    labels = _kmeans(points, k, rng, restarts=restarts, weights=weights)
    return ClusterCenters(weighted_centroids(points, weights, labels, k), labels)


def select_discard_set(s_hat, grid: Grid, k: int):
    """Grid indices of the k smallest non-zero coefficients (ties: lowest index)."""
    s = np.asarray(s_hat, dtype=float)
    nz = nonzero_indices(s)
    order = nz[np.argsort(s[nz], kind="stable")]
    return order[:k]
