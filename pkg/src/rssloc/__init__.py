"""Multi-source localization from received signal strength under unknown
log-normal shadow fading: scene simulation, the moment-matched likelihood,
sparse dictionary updating and a Monte-Carlo benchmark harness."""

__version__ = "0.1.0"

from .bench import MetricsSummary, TrialRecord, match_sources, rmef, rrmse, run_experiment
from .config import ExperimentConfig, load_config
from .fw import LogNormalParams, SumMoments, beta, fw_match, sum_moments
from .ml import Bounds, SolverOptions, ThetaEstimate, nll, nll_gradient, solve_ml
from .scene import Observation, Roi, Scene, generate_scene, simulate_rss
from .sdu import SduConfig, SduResult, run_sdu, run_sr_ml
from .sparse import build_dictionary, build_grid, solve_sparse
