"""Monte-Carlo experiment runner and localization error metrics.

Every trial derives its own integer seed from (master_seed, trial_index), so
trials are order-independent and can run in any number of worker processes
with identical results.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from threadpoolctl import threadpool_limits

from .scene import Roi, generate_scene, simulate_rss

log = logging.getLogger(__name__)

EXHAUSTIVE_MAX_K = 6


@dataclass(frozen=True, eq=False)
class TrialRecord:
    trial_index: int
    seed: int
    true_locations: np.ndarray        # (K, 2)
    estimated_locations: np.ndarray   # (K, 2), reordered to match true_locations
    matched_sq_errors: np.ndarray     # (K,) m^2
    delta: float
    runtime_ms: float = 0.0
    sigma_hat: float = float("nan")
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class MetricsSummary:
    rrmse: float
    rmef_curve: list
    n_trials: int
    n_failed: int = 0
    config_echo: dict = field(default_factory=dict)


def match_sources(truth, estimate) -> np.ndarray:
    """Permutation ``perm`` minimizing sum_k ||truth[k] - estimate[perm[k]]||^2."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    estimate = np.atleast_2d(np.asarray(estimate, dtype=float))
    if truth.shape != estimate.shape:
        raise ValueError(f"cannot match {len(truth)} true sources with {len(estimate)} estimates")
    k = len(truth)
    cost = ((truth[:, None, :] - estimate[None, :, :]) ** 2).sum(axis=2)
    if k > EXHAUSTIVE_MAX_K:
        rows, cols = linear_sum_assignment(cost)
        return cols[np.argsort(rows)]
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(k)):
        c = cost[range(k), perm].sum()
        if c < best_cost:
            best, best_cost = perm, c
    return np.array(best)


def make_record(trial_index, seed, truth, estimate, area, **kw) -> TrialRecord:
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    estimate = np.atleast_2d(np.asarray(estimate, dtype=float))
    est = estimate[match_sources(truth, estimate)]
    sq = ((truth - est) ** 2).sum(axis=1)
    return TrialRecord(trial_index, int(seed), truth, est, sq, float(np.sqrt(sq.max() / area)), **kw)


def _ok_records(records):
    recs = [r for r in records if r.ok]
    if not recs:
        raise ValueError("no successful trial records")
    return recs


def rrmse(records, roi: Roi) -> float:
    recs = _ok_records(records)
    k = {len(r.matched_sq_errors) for r in recs}
    if len(k) != 1:
        raise ValueError("records disagree on the number of sources")
    total = sum(float(r.matched_sq_errors.sum()) for r in recs)
    return math.sqrt(total / (roi.area * len(recs) * k.pop()))


def rmef(records, roi: Roi, d_grid) -> list:
    """P(delta > d) for each d, as a list of (d, probability)."""
    recs = _ok_records(records)
    deltas = np.array([r.delta for r in recs])
    return [(float(d), float(np.mean(deltas > d))) for d in d_grid]


def summarize(records, roi: Roi, d_grid, config_echo=None) -> MetricsSummary:
    n_failed = sum(not r.ok for r in records)
    return MetricsSummary(rrmse(records, roi), rmef(records, roi, d_grid),
                          len(records) - n_failed, n_failed, dict(config_echo or {}))


# -- experiment runner --------------------------------------------------------

def trial_seed(master_seed: int, trial_index: int) -> int:
    return int(np.random.SeedSequence([master_seed, trial_index]).generate_state(1, np.uint32)[0])


def _run_trial(args):
    exp, trial_index, checkpoints, dump_dir = args
    from .sdu import run_sdu          # deferred: keeps worker start-up light

    seed = trial_seed(exp.master_seed, trial_index)
    roi = Roi(exp.roi_l, exp.roi_w)
    t0 = time.perf_counter()
    try:
        with threadpool_limits(1):
            scene = generate_scene(exp, [seed, 1])
            obs = simulate_rss(scene, [seed, 2])
            result = run_sdu(obs, exp.sdu_config(max(checkpoints)), [seed, 3],
                             keep_s_hat=dump_dir is not None)
        if dump_dir is not None:
            dump_trace(Path(dump_dir) / f"trial{trial_index:05d}.npz", result)
    except Exception as exc:      # recorded, excluded from aggregates, counted
        log.warning("trial %d failed: %s", trial_index, exc)
        nan = np.full((exp.k_sources, 2), np.nan)
        bad = TrialRecord(trial_index, seed, nan, nan, np.full(exp.k_sources, np.nan), float("nan"),
                          status="failed", error=f"{type(exc).__name__}: {exc}")
        return {c: bad for c in checkpoints}
    elapsed = (time.perf_counter() - t0) * 1e3
    out = {}
    for c in checkpoints:
        r = result.at_iteration(c)
        out[c] = make_record(trial_index, seed, scene.source_xy, r.locations, roi.area,
                             runtime_ms=elapsed, sigma_hat=r.sigma_hat)
    return out


def default_workers() -> int:
    return os.cpu_count() or 1


def dump_trace(path, result):
    """Save every iteration's s_hat and estimate to an .npz file."""
    arrays = {}
    for rec in result.trace:
        i = rec.iteration
        if rec.s_hat is not None:
            arrays[f"s_hat_{i}"] = rec.s_hat
        arrays[f"locations_{i}"] = rec.locations
        arrays[f"centers_{i}"] = rec.initial_centers
    np.savez_compressed(path, **arrays)


def run_trials(exp, checkpoints=None, workers: int | None = None, dump_dir=None) -> dict:
    """Run ``exp.j_trials`` trials; returns {iteration: [TrialRecord, ...]} in trial order.

    ``checkpoints`` lists iteration counts to report.  Because an SDU run's
    first i iterations do not depend on the total count, one run to
    max(checkpoints) yields the estimate of every shorter run.
    """
    checkpoints = sorted(set(checkpoints or [exp.effective_iterations]))
    workers = workers or exp.workers or default_workers()
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        dump_dir = str(dump_dir)
    jobs = [(exp, j, checkpoints, dump_dir) for j in range(exp.j_trials)]
    if workers <= 1:
        results = [_run_trial(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return {c: [r[c] for r in results] for c in checkpoints}


@dataclass(frozen=True)
class ExperimentResult:
    summary: MetricsSummary
    records: list


def run_experiment(exp, workers: int | None = None) -> ExperimentResult:
    recs = run_trials(exp, workers=workers)[exp.effective_iterations]
    roi = Roi(exp.roi_l, exp.roi_w)
    return ExperimentResult(summarize(recs, roi, exp.rmef_d, exp.to_dict()), recs)


# -- CSV output ----------------------------------------------------------------

def trial_columns(k: int) -> list:
    cols = ["trial", "seed", "status"]
    cols += [f"true_u{i}" for i in range(k)] + [f"true_v{i}" for i in range(k)]
    cols += [f"est_u{i}" for i in range(k)] + [f"est_v{i}" for i in range(k)]
    cols += ["sigma_hat", "delta"]
    return cols


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_trials_csv(path, records):
    k = len(records[0].true_locations)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trial_columns(k))
        for r in records:
            w.writerow([r.trial_index, r.seed, r.status]
                       + [_fmt(x) for x in r.true_locations[:, 0]] + [_fmt(x) for x in r.true_locations[:, 1]]
                       + [_fmt(x) for x in r.estimated_locations[:, 0]]
                       + [_fmt(x) for x in r.estimated_locations[:, 1]]
                       + [_fmt(r.sigma_hat), _fmt(r.delta)])


def write_timing_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "runtime_ms"])
        for r in records:
            w.writerow([r.trial_index, f"{r.runtime_ms:.3f}"])


def summary_columns(d_grid) -> list:
    return (["sweep", "value", "algorithm", "iterations", "n_trials", "n_failed", "rrmse"]
            + [f"rmef_{d:g}" for d in d_grid])


def summary_row(sweep, value, algorithm, iterations, s: MetricsSummary) -> list:
    return ([sweep, value, algorithm, iterations, s.n_trials, s.n_failed, repr(s.rrmse)]
            + [repr(p) for _, p in s.rmef_curve])
