"""spillnet: simulation and estimation of treatment effects that spread
through geographic space and economic networks.

The toolkit solves the propagation equation on a lattice, evaluates effects
by path simulation with uncertainty splits, generates synthetic economies
with a border policy, and benchmarks six estimators for bias, RMSE, and
coverage.
"""

from .core import (
    ConfigId,
    Dataset,
    EstimatorError,
    InputError,
    SeedSpec,
    SolverError,
    SpatialDomain,
    StructuralParams,
    UnitRecord,
    config_params,
    derive_seed,
    load_dataset,
    save_dataset,
    validate,
)
from .dgp import DgpSettings, make_geography, simulate_dataset, source_term, true_effects
from .estimators import (
    ESTIMATORS,
    EstimateReport,
    HacSpec,
    event_study_decay_test,
    full_gmm,
    hac_cov,
    mutual_information,
    spillover_test,
)
from .feynman_kac import (
    PathBundle,
    PosteriorSummary,
    StochasticSource,
    delta_method_variance,
    distance_profile,
    fk_effect,
    fk_variance,
    pimc,
    sensitivities_fd,
    sensitivity_kappa,
    simulate_paths,
)
from .harness import McPlan, McSummary, event_study_panel, run_mc, summarize, uncertainty_table
from .network import GravityParams, NetworkStats, generate_network, graph_stats, lag_network
from .pde import (
    GridField,
    SolverOptions,
    amplification_factor,
    ar1_from_structural,
    diffusion_from_volatility,
    ecm_from_structural,
    half_life,
    network_te_coefficients,
    predicted_event_study,
    sar_from_structural,
    steady_state_dgp,
    steady_state_linear,
    structural_from_ar1,
    structural_from_sar,
    transient,
)

__version__ = "0.1.0"
