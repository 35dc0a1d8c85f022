"""Transporting trial treatment effects to a target population, with
sensitivity analysis for missing treatment-effect modifiers."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    CombinedSample,
    CovariatePattern,
    CovSource,
    MissingLocation,
    MomentSummary,
    Schema,
    detect_pattern,
    estimate_moments,
    load_csv,
    write_csv,
)
from .estimators import (  # noqa: E402
    AIPSW,
    IPSW,
    AteEstimate,
    CrossFitPlan,
    DifferenceInMeans,
    GFormula,
    aipsw,
    bootstrap_ci,
    difference_in_means,
    g_formula,
    ipsw,
)
from .kernels import (  # noqa: E402
    NadarayaWatson,
    box_m_test,
    conditional_gaussian,
    fit_logistic,
    fit_ols,
    kernel_regress,
)
from .maps import render_grid  # noqa: E402
from .sensitivity import (  # noqa: E402
    BiasReport,
    LinearImputer,
    RLearner,
    RobinsonFit,
    SensitivityGrid,
    data_driven_delta,
    linear_impute,
    partial_r2,
    procedure_missing_in_obs,
    procedure_missing_in_rct,
    procedure_totally_missing,
    proxy_bias,
    proxy_bias_estimated,
    robinson_rlearner,
    theoretical_bias,
)
from .simulation import (  # noqa: E402
    ScenarioResult,
    ScenarioSpec,
    biased_subsample,
    calibrate_intercept,
    generate,
    heterogeneity_situations,
    run_scenario,
    sweep_selection_strength,
)
