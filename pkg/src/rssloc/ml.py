"""Negative log-likelihood of the F-W log-normal model and its box-constrained solver.

Parameter vector layout is ``[u_1..u_K, v_1..v_K, P_1..P_K, sigma_db]``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .fw import LN10_SQ_200
from .scene import MIN_DISTANCE, Observation, Roi


class InfeasibleThetaError(ValueError):
    """Parameters violate their box bounds or the positivity of sigma."""


class NonFiniteObjectiveError(ArithmeticError):
    """The likelihood evaluated to inf/nan at a feasible point."""


@dataclass(frozen=True, eq=False)
class ThetaEstimate:
    source_u: np.ndarray
    source_v: np.ndarray
    source_p: np.ndarray
    shadow_sigma_db: float

    def __post_init__(self):
        for name in ("source_u", "source_v", "source_p"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        k = len(self.source_u)
        if not (len(self.source_v) == len(self.source_p) == k) or k < 1:
            raise ValueError("u, v and P must have the same non-zero length")
        object.__setattr__(self, "shadow_sigma_db", float(self.shadow_sigma_db))

    @property
    def k(self) -> int:
        return len(self.source_u)

    @property
    def locations(self) -> np.ndarray:
        return np.column_stack([self.source_u, self.source_v])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.source_u, self.source_v, self.source_p, [self.shadow_sigma_db]])

    @classmethod
    def from_vector(cls, x) -> "ThetaEstimate":
        x = np.asarray(x, dtype=float)
        k, rem = divmod(len(x) - 1, 3)
        if rem or k < 1:
            raise ValueError(f"vector length {len(x)} is not 3K+1")
        return cls(x[:k], x[k:2 * k], x[2 * k:3 * k], x[-1])

    @classmethod
    def from_locations(cls, xy, powers, sigma_db) -> "ThetaEstimate":
        xy = np.atleast_2d(xy)
        p = np.broadcast_to(np.asarray(powers, dtype=float), (len(xy),))
        return cls(xy[:, 0], xy[:, 1], p, sigma_db)

    def permuted(self, order) -> "ThetaEstimate":
        order = np.asarray(order)
        return ThetaEstimate(self.source_u[order], self.source_v[order], self.source_p[order],
                             self.shadow_sigma_db)


@dataclass(frozen=True)
class Bounds:
    roi: Roi
    p_low: float = 2000.0
    p_high: float = 4000.0
    sigma_min: float = 0.5
    sigma_max: float = 14.0

    def __post_init__(self):
        if not (0 < self.p_low <= self.p_high):
            raise ValueError("need 0 < p_low <= p_high")
        if not (0 < self.sigma_min <= self.sigma_max):
            raise ValueError("need 0 < sigma_min <= sigma_max")

    def arrays(self, k: int):
        lo = np.concatenate([np.zeros(2 * k), np.full(k, self.p_low), [self.sigma_min]])
        hi = np.concatenate([np.full(k, self.roi.length_l), np.full(k, self.roi.width_w),
                             np.full(k, self.p_high), [self.sigma_max]])
        return lo, hi

    def check(self, theta: ThetaEstimate, tol: float = 1e-9):
        x = theta.to_vector()
        lo, hi = self.arrays(theta.k)
        bad = np.flatnonzero((x < lo - tol * np.maximum(1, np.abs(lo)))
                             | (x > hi + tol * np.maximum(1, np.abs(hi))))
        if bad.size:
            names = _param_names(theta.k)
            detail = ", ".join(f"{names[i]}={x[i]:g} not in [{lo[i]:g}, {hi[i]:g}]" for i in bad)
            raise InfeasibleThetaError(f"infeasible theta: {detail}")

    def clip(self, theta: ThetaEstimate) -> ThetaEstimate:
        lo, hi = self.arrays(theta.k)
        return ThetaEstimate.from_vector(np.clip(theta.to_vector(), lo, hi))


def _param_names(k):
    return ([f"u{i}" for i in range(k)] + [f"v{i}" for i in range(k)]
            + [f"P{i}" for i in range(k)] + ["sigma"])


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 200
    grad_tol: float = 1e-6      # projected-gradient norm <= grad_tol * (1 + |f|)
    step_tol: float = 1e-8      # in box-normalized coordinates
    ftol: float = 1e-12         # passed to SLSQP


@dataclass(frozen=True, eq=False)
class SolveReport:
    theta: ThetaEstimate
    objective: float
    initial_objective: float
    iterations: int
    converged: bool
    kkt_residual: float
    message: str = ""
    history: list = field(default_factory=list)


def _nll_and_grad(x, sensors, y, alpha, want_grad=True):
    k = (len(x) - 1) // 3
    u, v, p, s = x[:k], x[k:2 * k], x[2 * k:3 * k], x[-1]
    dx = u[None, :] - sensors[:, 0:1]
    dy = v[None, :] - sensors[:, 1:2]
    omega = np.hypot(dx, dy)
    far = omega > MIN_DISTANCE
    w = np.where(far, omega, MIN_DISTANCE)
    a = p[None, :] * w ** (-alpha)
    s1 = a.sum(axis=1)
    s2 = (a * a).sum(axis=1)
    ratio = s2 / (s1 * s1)
    lb = LN10_SQ_200 * s * s
    b = np.expm1(2 * lb)
    br1 = 1.0 + b * ratio
    sig2 = np.log1p(b * ratio)
    mu = lb + np.log(s1) - sig2 / 2
    e = y - mu
    f = float(np.sum(np.log(sig2) + e * e / sig2))
    if not np.isfinite(f):
        raise NonFiniteObjectiveError(f"objective is {f} (sigma_m^2 min {sig2.min():.3g})")
    if not want_grad:
        return f, None

    g_mu = -2 * e / sig2
    g_sig2 = 1 / sig2 - (e / sig2) ** 2 + e / sig2     # includes mu's -sig2/2 dependence
    g_ratio = g_sig2 * b / br1
    g_s1 = g_mu / s1 - 2 * g_ratio * s2 / s1 ** 3
    g_s2 = g_ratio / (s1 * s1)
    g_a = g_s1[:, None] + 2 * g_s2[:, None] * a
    dlb = 2 * LN10_SQ_200 * s
    g_s = float(np.sum(g_sig2 * ratio / br1 * (b + 1) * 2 * dlb + g_mu * dlb))
    g_p = np.sum(g_a * a, axis=0) / p
    g_omega = np.where(far, -alpha * g_a * a / w, 0.0)
    g_u = np.sum(g_omega * dx / w, axis=0)
    g_v = np.sum(g_omega * dy / w, axis=0)
    return f, np.concatenate([g_u, g_v, g_p, [g_s]])


def _check_sigma(theta: ThetaEstimate):
    if not theta.shadow_sigma_db > 0:
        raise InfeasibleThetaError("sigma must be strictly positive (sigma_m^2 vanishes at 0 dB)")


def nll(theta: ThetaEstimate, obs: Observation, alpha: float, bounds: Bounds | None = None) -> float:
    _check_sigma(theta)
    if bounds is not None:
        bounds.check(theta)
    return _nll_and_grad(theta.to_vector(), obs.sensors, obs.log_rss, alpha, want_grad=False)[0]


def nll_gradient(theta: ThetaEstimate, obs: Observation, alpha: float,
                 bounds: Bounds | None = None) -> np.ndarray:
    _check_sigma(theta)
    if bounds is not None:
        bounds.check(theta)
    return _nll_and_grad(theta.to_vector(), obs.sensors, obs.log_rss, alpha)[1]


def projected_gradient_norm(z, gz):
    """KKT residual for box [0, 1]^n: ||z - clip(z - g, 0, 1)||."""
    return float(np.linalg.norm(z - np.clip(z - gz, 0.0, 1.0)))


def solve_ml(initial: ThetaEstimate, obs: Observation, alpha: float, bounds: Bounds,
             solver_opts: SolverOptions | None = None) -> SolveReport:
    """Local SQP solve of the box-constrained likelihood from a feasible start.

    Variables are rescaled to the unit box before handing them to SLSQP.  The
    returned point never has a larger objective than the start.
    """
    opts = solver_opts or SolverOptions()
    _check_sigma(initial)
    bounds.check(initial)
    lo, hi = bounds.arrays(initial.k)
    span = np.where(hi > lo, hi - lo, 1.0)
    sensors, y = obs.sensors, obs.log_rss

    def to_x(z):
        return np.clip(lo + z * span, lo, hi)

    def fun(z):
        f, g = _nll_and_grad(to_x(z), sensors, y, alpha)
        return f, g * span

    z0 = (bounds.clip(initial).to_vector() - lo) / span
    f0 = fun(z0)[0]
    history = [f0]
    steps = [np.inf]
    best = {"z": z0, "f": f0}
    prev = {"z": z0}

    def callback(zk):
        fk = fun(zk)[0]
        history.append(fk)
        steps.append(float(np.linalg.norm(zk - prev["z"])))
        prev["z"] = np.array(zk)
        if fk < best["f"]:
            best.update(z=np.array(zk), f=fk)

    message = ""
    nit = 0
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(fun, z0, jac=True, method="SLSQP", bounds=[(0.0, 1.0)] * len(z0),
                           callback=callback,
                           options={"maxiter": opts.max_iter, "ftol": opts.ftol})
        nit = int(res.nit)
        message = str(res.message)
        zr = np.clip(res.x, 0.0, 1.0)
        fr = fun(zr)[0]
        if fr <= best["f"]:
            best.update(z=zr, f=fr)
    except NonFiniteObjectiveError as exc:
        message = f"stopped on non-finite objective: {exc}"

    zb = best["z"]
    fb, gb = fun(zb)
    kkt = projected_gradient_norm(zb, gb)
    converged = kkt <= opts.grad_tol * (1 + abs(fb))
    if not converged and nit < opts.max_iter:
        # SLSQP stopped on a vanishing step
        converged = message.startswith("Optimization terminated successfully") and \
            steps[-1] <= opts.step_tol
    theta = ThetaEstimate.from_vector(to_x(zb))
    return SolveReport(theta=theta, objective=fb, initial_objective=f0, iterations=nit,
                       converged=bool(converged), kkt_residual=kkt, message=message,
                       history=history)
