"""Total events avoided (TEA) for multivariate continuous treatments.

Matching estimators with optional regression bias correction, a Poisson
regression baseline, BART counterfactual imputation, a two-resample
bootstrap and a synthetic-data simulation harness.
"""

from ._kernels import BACKEND
from .bart import BartConfig, BartPosterior, TeaInterval, estimate_tea_bart, fit_bart, posterior_predict
from .bootstrap import BootstrapConfig, bootstrap_tea
from .data import (Dataset, DatasetError, NumericalError, TeaError, Unit, ValidationReport,
                   from_arrays, rate, validate_dataset)
from .erf import ErfInput, erf_delta_events, erf_total
from .glm import GlmFit, estimate_tea_poisson, fit_poisson, linear_design, predict_count
from .harness import (HarnessConfig, ReplicationResult, SummaryTable, run_replication,
                      run_replication_grid, run_study, summarize)
from .io import load_csv, write_dataset, write_results
from .matching import (MatchAssignment, MetricMatrix, TeaResult, Tolerances, confounder_metric,
                       estimate_tea_match1, estimate_tea_match_bc, find_matches, mahalanobis,
                       nu_from_percentile, omega_from_sd_fraction, treatment_metric,
                       true_tea_trimmed)
from .simulate import SimDataset, SimScenario, eval_lambda, generate_scenario, scenario

__version__ = "0.1.0"
