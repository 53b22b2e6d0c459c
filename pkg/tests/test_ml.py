import math

import numpy as np
import pytest

from rssloc.config import ExperimentConfig
from rssloc.fw import log_moments
from rssloc.ml import (Bounds, InfeasibleThetaError, SolverOptions, ThetaEstimate, nll,
                       nll_gradient, solve_ml)
from rssloc.scene import Observation, Roi, Scene, generate_scene, simulate_rss

ROI = Roi(2000.0, 2000.0)
BOUNDS = Bounds(ROI)


def fd_gradient(theta, obs, alpha, rel_step=1e-5):
    x = theta.to_vector()
    scale = np.concatenate([np.full(2 * theta.k, 2000.0), np.full(theta.k, 3000.0), [5.0]])
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel_step * scale[i]
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (nll(ThetaEstimate.from_vector(xp), obs, alpha)
                - nll(ThetaEstimate.from_vector(xm), obs, alpha)) / (2 * h)
    return g


def random_interior_theta(rng, k=3):
    return ThetaEstimate(rng.uniform(50, 1950, k), rng.uniform(50, 1950, k),
                         rng.uniform(2100, 3900, k), rng.uniform(1.0, 12.0))


def observation(seed, sigma=4.0, m=40, k=3):
    scene = generate_scene(ExperimentConfig(m_sensors=m, k_sources=k, sigma_db=sigma), seed)
    return scene, simulate_rss(scene, seed + 1000)


def test_vector_round_trip():
    t = ThetaEstimate([1.0, 2.0], [3.0, 4.0], [2000.0, 3000.0], 5.0)
    back = ThetaEstimate.from_vector(t.to_vector())
    assert np.array_equal(back.to_vector(), t.to_vector())
    with pytest.raises(ValueError):
        ThetaEstimate.from_vector(np.ones(5))


def test_zero_residual_objective():
    # observations placed exactly at the predicted log-means
    rng = np.random.default_rng(0)
    sensors = rng.uniform(0, 2000, (25, 2))
    theta = ThetaEstimate([500.0], [800.0], [3000.0], 3.0)
    mu, sig2 = log_moments(sensors, theta.locations, theta.source_p, 3.0, 2.5)
    obs = Observation(np.exp(mu), sensors, ROI)
    # single source: sigma_m^2 is the same for every sensor
    assert nll(theta, obs, 2.5) == pytest.approx(25 * math.log(sig2[0]), rel=1e-12)


def test_permutation_invariance():
    _, obs = observation(1)
    t = ThetaEstimate([100.0, 900.0, 1500.0], [300.0, 1200.0, 400.0], [2100.0, 3300.0, 2900.0], 5.0)
    assert nll(t.permuted([2, 0, 1]), obs, 2.5) == pytest.approx(nll(t, obs, 2.5), rel=1e-13)


def test_truth_beats_displaced():
    rng = np.random.default_rng(2)
    wins = 0
    for seed in range(200):
        scene, obs = observation(seed, sigma=2.0, m=90)
        truth = ThetaEstimate.from_locations(scene.source_xy, scene.source_p, 2.0)
        ang = rng.uniform(0, 2 * np.pi, 3)
        moved = np.clip(scene.source_xy + 500 * np.column_stack([np.cos(ang), np.sin(ang)]), 0, 2000)
        displaced = ThetaEstimate.from_locations(moved, scene.source_p, 2.0)
        wins += nll(truth, obs, 2.5) < nll(displaced, obs, 2.5)
    assert wins >= 190


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    _, obs = observation(3, m=30)
    for _ in range(20):
        theta = random_interior_theta(rng)
        g = nll_gradient(theta, obs, 2.5)
        fd = fd_gradient(theta, obs, 2.5)
        assert np.all(np.abs(g - fd) <= np.maximum(1e-4 * np.abs(fd), 1e-7))


def test_gradient_mirror_symmetry():
    # sensors and sources mirrored about u = 1000
    rng = np.random.default_rng(4)
    half = rng.uniform(0, 1000, (10, 2))
    sensors = np.vstack([half, np.column_stack([2000 - half[:, 0], half[:, 1]])])
    rss = rng.uniform(1e-4, 1e-2, 10)
    obs = Observation(np.concatenate([rss, rss]), sensors, ROI)
    theta = ThetaEstimate([700.0, 1300.0], [900.0, 900.0], [3000.0, 3000.0], 4.0)
    g = nll_gradient(theta, obs, 2.5)
    assert g[0] == pytest.approx(-g[1], rel=1e-9)      # du antisymmetric
    assert g[2] == pytest.approx(g[3], rel=1e-9)       # dv symmetric
    assert g[4] == pytest.approx(g[5], rel=1e-9)       # dP symmetric


def test_sigma_must_be_positive():
    _, obs = observation(5)
    with pytest.raises(InfeasibleThetaError):
        nll(ThetaEstimate([1.0], [1.0], [2500.0], 0.0), obs, 2.5)


def test_bounds_check_names_field():
    t = ThetaEstimate([-10.0, 5.0], [3.0, 4.0], [2500.0, 2500.0], 5.0)
    with pytest.raises(InfeasibleThetaError, match="u0"):
        BOUNDS.check(t)


def test_solve_rejects_infeasible_start():
    _, obs = observation(6)
    with pytest.raises(InfeasibleThetaError):
        solve_ml(ThetaEstimate([-10.0], [100.0], [3000.0], 4.0), obs, 2.5, BOUNDS)


def test_solve_from_truth_near_noiseless():
    # noise-free data; the model's sigma sits at its lower bound
    scene, obs = observation(7, sigma=0.0, m=60, k=2)
    start = ThetaEstimate.from_locations(scene.source_xy, scene.source_p, 0.5)
    rep = solve_ml(start, obs, 2.5, BOUNDS)
    err = np.hypot(*(rep.theta.locations - scene.source_xy).T)
    assert err.max() < 1.0
    assert rep.objective <= rep.initial_objective


def test_solve_descends_from_perturbed_start():
    scene, obs = observation(8, sigma=2.0, m=60, k=2)
    start = ThetaEstimate.from_locations(np.clip(scene.source_xy + 50.0, 0, 2000), 3000.0, 4.0)
    rep = solve_ml(start, obs, 2.5, BOUNDS, SolverOptions(max_iter=300))
    assert rep.objective < rep.initial_objective
    BOUNDS.check(rep.theta)
    err = np.hypot(*(rep.theta.locations - scene.source_xy).T)
    assert err.max() < 60.0


def test_solution_stays_in_box():
    _, obs = observation(9, sigma=8.0)
    rep = solve_ml(ThetaEstimate([10.0, 1990.0, 1000.0], [10.0, 1990.0, 5.0],
                                 [2000.0, 4000.0, 3000.0], 13.9), obs, 2.5, BOUNDS)
    BOUNDS.check(rep.theta)
    assert np.isfinite(rep.kkt_residual)
