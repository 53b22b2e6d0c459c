"""Fenton-Wilkinson approximation of a sum of independent log-normals.

With r_mk = a_k * 10**(xi_k/10), xi_k ~ N(0, s**2) (s in dB), the factor
10**(xi/10) = exp(xi * ln10 / 10) has mean

    beta = exp((ln 10)**2 * s**2 / 200)

so E{r} = beta * S1 and Var{r} = beta**2 (beta**2 - 1) * S2, where
S1 = sum a_k and S2 = sum a_k**2.  Matching a single log-normal exp(X),
X ~ N(mu, sigma2), to those two moments gives

    sigma2 = log1p((beta**2 - 1) * S2 / S1**2)
    mu     = ln(beta) + ln(S1) - sigma2 / 2

which is algebraically identical to the textbook 2 ln E - ln(E**2 + Var) / 2
form but keeps full precision for small fading.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import clamped

# (ln 10)^2 / 200: converts a dB std into ln(beta)
LN10_SQ_200 = math.log(10.0) ** 2 / 200.0


@dataclass(frozen=True)
class LogNormalParams:
    mu: float
    sigma_sq: float

    def __post_init__(self):
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")
        if not self.sigma_sq >= 0:
            raise ValueError("sigma_sq must be non-negative")

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.sigma_sq / 2)

    @property
    def variance(self) -> float:
        return math.expm1(self.sigma_sq) * math.exp(2 * self.mu + self.sigma_sq)


@dataclass(frozen=True)
class SumMoments:
    mean: float
    variance: float


def log_beta(shadow_sigma_db):
    return LN10_SQ_200 * np.square(shadow_sigma_db)


def beta(shadow_sigma_db: float) -> float:
    if shadow_sigma_db < 0:
        raise ValueError(f"shadow sigma must be >= 0 dB, got {shadow_sigma_db}")
    return math.exp(log_beta(shadow_sigma_db))


def sum_moments(powers, distances, alpha: float, shadow_sigma_db: float) -> SumMoments:
    p = np.atleast_1d(np.asarray(powers, dtype=float))
    d = np.atleast_1d(np.asarray(distances, dtype=float))
    if p.size == 0 or p.shape != d.shape:
        raise ValueError("powers and distances must be non-empty and of equal length")
    if np.any(p <= 0):
        raise ValueError("powers must be positive")
    if np.any(d < 1.0):
        raise ValueError("distances must be clamped to >= 1 m")
    b = beta(shadow_sigma_db)
    a = p * d ** (-alpha)
    return SumMoments(mean=float(b * a.sum()),
                      variance=float(b * b * math.expm1(2 * log_beta(shadow_sigma_db)) * np.sum(a * a)))


def fw_match(moments: SumMoments) -> LogNormalParams:
    e, v = moments.mean, moments.variance
    if not e > 0:
        raise ValueError(f"mean must be positive, got {e}")
    if v < 0:
        raise ValueError(f"variance must be non-negative, got {v}")
    sigma_sq = math.log1p(v / (e * e))
    return LogNormalParams(mu=math.log(e) - sigma_sq / 2, sigma_sq=sigma_sq)


def log_moments(sensors, source_xy, source_p, shadow_sigma_db, alpha):
    """Vectorized matched (mu_m, sigma_m^2) for every sensor, each shape (M,)."""
    sensors = np.atleast_2d(sensors)
    source_xy = np.atleast_2d(source_xy)
    d = clamped(np.hypot(sensors[:, None, 0] - source_xy[None, :, 0],
                         sensors[:, None, 1] - source_xy[None, :, 1]))
    a = np.asarray(source_p, dtype=float)[None, :] * d ** (-alpha)
    s1 = a.sum(axis=1)
    s2 = (a * a).sum(axis=1)
    lb = log_beta(shadow_sigma_db)
    sig2 = np.log1p(np.expm1(2 * lb) * s2 / (s1 * s1))
    mu = lb + np.log(s1) - sig2 / 2
    return mu, sig2


def predicted_log_moments(theta, sensor, alpha: float) -> LogNormalParams:
    """Matched log-normal parameters at one sensor for a source hypothesis ``theta``."""
    mu, sig2 = log_moments(np.asarray(sensor, dtype=float)[None, :], theta.locations,
                           theta.source_p, theta.shadow_sigma_db, alpha)
    return LogNormalParams(float(mu[0]), float(sig2[0]))
