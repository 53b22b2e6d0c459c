"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line, printed in the terminal summary of the run
(and directly to stdout when this file is run as a script).  Tolerances are the
contract values; the Monte-Carlo studies use the library's default master seed.
"""
import itertools
import math
import sys
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy.optimize import nnls

from rssloc.bench import (TrialRecord, default_workers, make_record, match_sources, rmef, rrmse,
                          run_trials, write_trials_csv)
from rssloc.config import ExperimentConfig, load_config
from rssloc.fw import fw_match, log_moments, sum_moments
from rssloc.ml import ThetaEstimate, nll, nll_gradient
from rssloc.scene import Roi, generate_scene, simulate_rss
from rssloc.sparse import build_dictionary, build_grid, solve_sparse

from conftest import ACCEPTANCE_LINES

ROI = Roi(2000.0, 2000.0)
WORKERS = default_workers()


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------

def test_criterion_01_fw_single_source_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_mu = worst_s2 = 0.0
    for _ in range(1000):
        p, d, s = rng.uniform(2000, 4000), rng.uniform(1, 2000 * math.sqrt(2)), rng.uniform(0, 12)
        got = fw_match(sum_moments([p], [d], 2.5, s))
        mu = math.log(p * d ** -2.5)
        s2 = math.log(10) ** 2 * s ** 2 / 100
        worst_mu = max(worst_mu, abs(got.mu - mu) / abs(mu))
        worst_s2 = max(worst_s2, abs(got.sigma_sq - s2) / s2 if s2 else abs(got.sigma_sq))
    dt = time.perf_counter() - t0
    report(1, worst_mu <= 1e-12 and worst_s2 <= 1e-12 and dt < 1.0,
           f"max rel err mu={worst_mu:.2e} sigma^2={worst_s2:.2e} (tol 1e-12), {dt:.2f}s")


# -- 2 -------------------------------------------------------------------------

def test_criterion_02_fw_vs_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    n_draws = 1_000_000
    err_mu, err_s2 = [], []
    for c in range(50):
        sigma = rng.uniform(0.5, 6.0)
        scene = generate_scene(ExperimentConfig(m_sensors=1, k_sources=3, sigma_db=sigma), [202, c])
        mu, s2 = log_moments(scene.sensors, scene.source_xy, scene.source_p, sigma, 2.5)
        d = np.maximum(np.hypot(*(scene.source_xy - scene.sensors[0]).T), 1.0)
        a = scene.source_p * d ** -2.5
        log_r = np.log(a @ 10 ** (rng.normal(0.0, sigma, (3, n_draws)) / 10))
        err_mu.append(abs(mu[0] - log_r.mean()) / abs(log_r.mean()))
        err_s2.append(abs(s2[0] - log_r.var()) / log_r.var())
    dt = time.perf_counter() - t0
    err_mu, err_s2 = np.array(err_mu), np.array(err_s2)
    ok = err_mu.max() <= 0.05 and err_s2.max() <= 0.15 and dt < 120
    report(2, ok, f"max rel err mu={err_mu.max():.3f} (tol 0.05), sigma^2={err_s2.max():.3f} "
                  f"(tol 0.15; {np.sum(err_s2 > 0.15)}/50 configs over), {dt:.0f}s")


# -- 3 -------------------------------------------------------------------------

def central_difference(theta, obs, alpha):
    x = theta.to_vector()
    scale = np.concatenate([np.full(2 * theta.k, 2000.0), np.full(theta.k, 3000.0), [5.0]])
    g = np.empty_like(x)
    for i in range(len(x)):
        h = 1e-5 * scale[i]   # truncation error well below the tolerance
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (nll(ThetaEstimate.from_vector(xp), obs, alpha)
                - nll(ThetaEstimate.from_vector(xm), obs, alpha)) / (2 * h)
    return g


def test_criterion_03_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    scene = generate_scene(ExperimentConfig(m_sensors=40, sigma_db=4.0), [303, 1])
    obs = simulate_rss(scene, [303, 2])
    worst = 0.0
    for _ in range(100):
        theta = ThetaEstimate(rng.uniform(50, 1950, 3), rng.uniform(50, 1950, 3),
                              rng.uniform(2100, 3900, 3), rng.uniform(1.0, 12.0))
        g, fd = nll_gradient(theta, obs, 2.5), central_difference(theta, obs, 2.5)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1e-4 * np.abs(fd), 1e-7))))
    dt = time.perf_counter() - t0
    report(3, worst <= 1.0 and dt < 10, f"max error / allowed = {worst:.3f}, {dt:.1f}s")


# -- 4 -------------------------------------------------------------------------

def l0_support(phi, r, kmax=2):
    for size in range(1, kmax + 1):
        for sup in itertools.combinations(range(phi.shape[1]), size):
            x, res = nnls(phi[:, sup], r)
            if res <= 1e-9 * np.linalg.norm(r) and np.all(x > 0):
                return set(sup)
    return None


def test_criterion_04_sparse_vs_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    lam = ExperimentConfig().lam
    hits = 0
    for _ in range(50):
        n, k, m = int(rng.choice([16, 25, 36])), int(rng.integers(1, 3)), int(rng.integers(15, 41))
        d = build_dictionary(build_grid(ROI, n), rng.uniform(0, 2000, (m, 2)), 2.5)
        sup = rng.choice(n, k, replace=False)
        r = d.phi[:, sup] @ rng.uniform(2000, 4000, k)
        hits += set(solve_sparse(d, r, lam).support.tolist()) == l0_support(d.phi, r)
    dt = time.perf_counter() - t0
    report(4, hits >= 49 and dt < 60, f"{hits}/50 supports equal (need 49), {dt:.1f}s")


# -- Monte-Carlo studies (shared runs) -----------------------------------------

@lru_cache(maxsize=None)
def study(sweep, j_trials, checkpoints, **fields):
    cfg = load_config(None, dict(fields, j_trials=j_trials), sweep=sweep).validate()
    t0 = time.perf_counter()
    out = run_trials(cfg, list(checkpoints), workers=WORKERS)
    return out, time.perf_counter() - t0


def sigma_records(sigma, j):
    # the sigma = 2 dB run is shared with criterion 6; its first 200 trials are
    # exactly the trials of a J=200 run (per-trial seeds)
    jj = 500 if sigma == 2.0 else j
    recs, dt = study("sigma", jj, (1, 7), sigma_db=sigma)
    return {i: r[:j] for i, r in recs.items()}, dt


def p_over(records, d=0.1):
    return rmef(records, ROI, [d])[0][1]


@pytest.mark.slow
def test_criterion_05_sigma_trend():
    rows, total = [], 0.0
    for s in (2.0, 6.0, 10.0):
        recs, dt = sigma_records(s, 200)
        total += dt * (200 / 500 if s == 2.0 else 1.0)
        rows.append((s, rrmse(recs[7], ROI), rrmse(recs[1], ROI)))
    sdu = [r[1] for r in rows]
    increasing = all(a < b for a, b in zip(sdu, sdu[1:]))
    beats = all(r[1] <= r[2] for r in rows)
    detail = "; ".join(f"sigma={s:g}: SDU {a:.4f} SR-ML {b:.4f}" for s, a, b in rows)
    report(5, increasing and beats, f"{detail}; ~{total / 60:.0f} min")


@pytest.mark.slow
def test_criterion_06_fig5_anchor():
    recs, dt = sigma_records(2.0, 500)
    p = p_over(recs[7])
    report(6, 0.05 <= p <= 0.25, f"P(delta>0.10)={p:.3f} at sigma=2, J=500 (band [0.05, 0.25]), "
                                 f"{dt / 60:.0f} min")


@pytest.mark.slow
def test_criterion_07_fig7_anchor():
    recs, dt = study("sensors", 500, (7,), m_sensors=140)
    p = p_over(recs[7])
    report(7, 0.04 <= p <= 0.22, f"P(delta>0.10)={p:.3f} at M=140, J=500 (band [0.04, 0.22]), "
                                 f"{dt / 60:.0f} min")


@pytest.mark.slow
def test_criterion_08_iteration_saturation():
    recs, dt = study("iterations", 200, (1, 7, 15))
    e1, e7, e15 = (rrmse(recs[i], ROI) for i in (1, 7, 15))
    rel = abs(e7 - e15) / e15
    report(8, rel <= 0.10 and e7 < e1,
           f"RRMSE I=1 {e1:.4f}, I=7 {e7:.4f}, I=15 {e15:.4f}; |I7-I15|/I15={rel:.3f}, "
           f"{dt / 60:.0f} min")


# -- 9 -------------------------------------------------------------------------

def test_criterion_09_determinism(tmp_path):
    cfg = ExperimentConfig(m_sensors=40, n_grid=121, j_trials=8, iterations=3, master_seed=909)
    files = []
    for tag, workers in [("a", 1), ("b", 1), ("c", 2), ("d", 3)]:
        path = tmp_path / f"{tag}.csv"
        write_trials_csv(path, run_trials(cfg, workers=workers)[3])
        files.append(path.read_bytes())
    same = all(f == files[0] for f in files)
    report(9, same, "per-trial CSVs byte-identical across reruns and 1/2/3 workers" if same
           else "per-trial CSVs differ")


# -- 10 ------------------------------------------------------------------------

def rec(delta):
    z = np.zeros((1, 2))
    return TrialRecord(0, 0, z, z, np.zeros(1), delta)


def test_criterion_10_metric_examples():
    checks = {
        "permuted truth matched exactly": np.array_equal(
            np.array([[5.0, 1], [0, 0], [3, 3]])[match_sources([[0, 0], [3, 3], [5, 1]],
                                                               [[5.0, 1], [0, 0], [3, 3]])],
            [[0, 0], [3, 3], [5, 1]]),
        "K=1 identity": match_sources([[1.0, 2.0]], [[7.0, 9.0]]).tolist() == [0],
        "swap pairing, sq error 2":
            make_record(0, 0, [[0, 0], [10, 0]], [[9, 0], [1, 0]], 1.0).matched_sq_errors.sum() == 2.0,
        "zero errors give RRMSE 0": rrmse([make_record(0, 0, [[1, 1]], [[1, 1]], ROI.area)], ROI) == 0.0,
        "RRMSE 0.025": rrmse([make_record(0, 0, [[0, 0]], [[30, 40]], ROI.area)], ROI) == 0.025,
        "duplication invariance": rrmse([make_record(0, 0, [[0, 0]], [[30, 40]], ROI.area),
                                         make_record(1, 0, [[0, 0]], [[60, 80]], ROI.area)] * 2, ROI)
            == rrmse([make_record(0, 0, [[0, 0]], [[30, 40]], ROI.area),
                      make_record(1, 0, [[0, 0]], [[60, 80]], ROI.area)], ROI),
        "RMEF of zeros": rmef([rec(0.0)] * 3, ROI, [0.01, 0.1]) == [(0.01, 0.0), (0.1, 0.0)],
        "RMEF {0.05, 0.15} at 0.10": rmef([rec(0.05), rec(0.15)], ROI, [0.10]) == [(0.1, 0.5)],
        "RMEF at d=-1": rmef([rec(0.05), rec(0.15)], ROI, [-1.0]) == [(-1.0, 1.0)],
    }
    bad = [k for k, v in checks.items() if not v]
    report(10, not bad, f"{len(checks) - len(bad)}/{len(checks)} hand examples exact"
           + (f"; failing: {', '.join(bad)}" if bad else ""))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
