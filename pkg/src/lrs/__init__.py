"""Multi-task linear models as a shared low-rank subspace plus per-task sparse
corrections, learned by alternating minimization with iterative hard
thresholding, with an optional user-level differentially private variant."""

from .adapt import NewTaskAdapter, adapt_new_task, mom_init
from .datagen import (
    GenConfig,
    gen_ground_truth,
    gen_samples,
    measure_incoherence,
    with_shared_weights,
)
from .dp import (
    PrivacyLedger,
    PrivateLRSRegressor,
    accountant_epsilon,
    calibrate_noise,
    calibrate_noise_simple,
    default_clip_levels,
    empirical_clip_levels,
    fit_private,
    noise_stds,
    private_update_u,
    theory_clip_levels,
    zcdp_to_epsilon,
)
from .errors import (
    ConfigError,
    DegenerateMoment,
    DegenerateMomentWarning,
    DomainError,
    FormatError,
    InfeasibleSparsity,
    LrsError,
    PrivacyBudgetMismatch,
    RankDeficient,
    SingularSystem,
)
from .evaluation import (
    RecoveryReport,
    baseline_full_finetune,
    baseline_rep_only,
    baseline_single,
    population_gap,
    recovery_errors,
    rmse,
    subspace_distance,
)
from .model import (
    FitReport,
    GroundTruth,
    ModelState,
    PrivacyConfig,
    SolverConfig,
    TaskDataset,
    theta,
)
from .numerics import (
    StructuredSystem,
    clip_frobenius,
    clip_scalar,
    clip_vector,
    hard_threshold,
    least_squares,
    qr_orthonormalize,
    solve_structured,
    top_r_eigvecs,
)
from .rank1 import Rank1LRS, fit_rank1
from .solver import LRSRegressor, fit_lrs, optimize_sparse_vector, update_u, update_w

__version__ = "0.1.0"

__all__ = [
    "NewTaskAdapter",
    "ConfigError",
    "DegenerateMoment",
    "DegenerateMomentWarning",
    "DomainError",
    "FitReport",
    "FormatError",
    "GenConfig",
    "GroundTruth",
    "InfeasibleSparsity",
    "LRSRegressor",
    "LrsError",
    "ModelState",
    "PrivacyBudgetMismatch",
    "PrivacyConfig",
    "PrivacyLedger",
    "PrivateLRSRegressor",
    "Rank1LRS",
    "RankDeficient",
    "RecoveryReport",
    "SingularSystem",
    "SolverConfig",
    "StructuredSystem",
    "TaskDataset",
    "accountant_epsilon",
    "adapt_new_task",
    "baseline_full_finetune",
    "baseline_rep_only",
    "baseline_single",
    "calibrate_noise",
    "calibrate_noise_simple",
    "clip_frobenius",
    "clip_scalar",
    "clip_vector",
    "default_clip_levels",
    "empirical_clip_levels",
    "fit_lrs",
    "fit_private",
    "fit_rank1",
    "gen_ground_truth",
    "gen_samples",
    "hard_threshold",
    "least_squares",
    "measure_incoherence",
    "mom_init",
    "noise_stds",
    "optimize_sparse_vector",
    "population_gap",
    "private_update_u",
    "qr_orthonormalize",
    "recovery_errors",
    "rmse",
    "solve_structured",
    "subspace_distance",
    "theory_clip_levels",
    "theta",
    "top_r_eigvecs",
    "update_u",
    "update_w",
    "with_shared_weights",
    "zcdp_to_epsilon",
]
