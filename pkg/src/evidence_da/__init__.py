"""Contextual model evidence for chaotic state-space models via ensemble DA."""

__version__ = "0.1.0"

from .dynamics import (
    DEFAULT_FORCING_ANGLE,
    IntegratorSpec,
    L63Params,
    L95Params,
    Lorenz63,
    Lorenz95,
    interval_flow,
    l63_tendency,
    l95_tendency,
    make_model,
    matrix_flow,
    propagate,
    rk4_step,
)
from .errors import IllConditionedError, NumericalOverflowError
from .etkf import (
    AssimilationCycleState,
    EtkfConfig,
    etkf_analysis,
    inflate,
    initial_ensemble,
    run_cycles,
)
from .evidence import (
    CmeResult,
    EvidencingWindow,
    GaussNewtonSpec,
    cme_en4dvar,
    cme_enkf,
    cme_ienks,
    cme_is,
    discriminating_power,
    gauss_newton_ensemble,
    kf_evidence,
    window_logliks,
)
from .gaussian import (
    GaussianBelief,
    ObsErrorSpec,
    ObsOperator,
    ObservationRecord,
    innovation_loglik,
    log_sum_exp,
    mean_and_anomalies,
    svd_anomalies,
)
from .harness import (
    CmeSeries,
    RngStreams,
    SweepSpec,
    TwinConfig,
    TwinContext,
    build_context,
    estimate_parameter,
    generate_truth_and_obs,
    l63_default_config,
    l95_default_config,
    likelihood_interval,
    run_attribution,
    run_sweep,
    run_twin,
)
from .oracles import (
    PowerLawFit,
    QuadratureRule,
    gh_cme,
    gh_integrate_1d,
    gh_log_integral,
    hermite_rule,
    mc_cme,
    mc_cme_ladder,
    powerlaw_extrapolate,
)
