"""Simulation and verification toolkit for supercritical branching processes
with spine decompositions."""

__version__ = "0.1.0"

from .model import (
    BranchingParams,
    FiniteChainMotion,
    FiniteOffspring,
    HeavyTailOffspring,
    KilledDiffusion1D,
    ModelSpec,
    SizeBiasedHeavyTail,
    validate_model,
)
from .presets import PRESET_NAMES, default_root, preset
from .spectral import (
    Eigentriple,
    eigentriple_checks,
    llogl_criterion,
    principal_eigentriple,
    solve_u_equation,
    tilt_motion,
)
from .verify import (
    DichotomyReport,
    EstimatorReport,
    InconclusiveError,
    change_of_measure_test,
    dichotomy_experiment,
    eta_mean_test,
    laplace_functional_test,
    many_to_one_test,
    martingale_mean_test,
    spine_decomposition_test,
    spine_dynamics_test,
)

__all__ = [
    "BranchingParams",
    "FiniteChainMotion",
    "FiniteOffspring",
    "HeavyTailOffspring",
    "KilledDiffusion1D",
    "ModelSpec",
    "SizeBiasedHeavyTail",
    "validate_model",
    "PRESET_NAMES",
    "default_root",
    "preset",
    "Eigentriple",
    "eigentriple_checks",
    "llogl_criterion",
    "principal_eigentriple",
    "solve_u_equation",
    "tilt_motion",
    "DichotomyReport",
    "EstimatorReport",
    "InconclusiveError",
    "change_of_measure_test",
    "dichotomy_experiment",
    "eta_mean_test",
    "laplace_functional_test",
    "many_to_one_test",
    "martingale_mean_test",
    "spine_decomposition_test",
    "spine_dynamics_test",
    "__version__",
]
