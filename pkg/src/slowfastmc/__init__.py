"""Monte Carlo toolkit for slow-fast SDE averaging and LSV pricing."""

from .coefficients import (
    CoefficientField,
    SlowFastSystem,
    constant_system,
    ou_fast_pair,
    ou_linear_system,
    ref_ou_system,
    system_from_catalog,
    zero_system,
)
from .engine import (
    check_dissipativity,
    check_moment_bounds,
    khasminskii_delta,
    simulate_auxiliary,
    simulate_slow_fast,
)
from .convergence import (
    FUNCTIONALS,
    auxiliary_gap,
    simulate_averaged,
    weak_convergence_report,
)
from .ergodic import (
    AveragedModel,
    CallableAveragedModel,
    ErgodicParams,
    FrozenEquation,
    estimate_averaged_diffusion,
    estimate_averaged_drift,
    estimate_invariant,
    psd_sqrt,
    simulate_frozen,
    tabulate_averaged_model,
    verify_contraction,
)
from .finance import (
    LSVModel,
    MeasureChange,
    OptionSpec,
    averaged_local_vol,
    girsanov_weight,
    lsv_from_catalog,
    lsv_tanh_model,
    mollify_lookback,
    price,
    price_convergence_experiment,
    price_from_bundle,
    risk_neutralize,
    standard_measure_change,
    to_log_system,
)
from .stochastic import (
    CorrelationSpec,
    MonteCarloEstimate,
    PathBundle,
    RngStream,
    StreamFamily,
    TimeGrid,
    build_correlation,
    ks_critical_value,
    ks_two_sample,
    mc_estimate,
    sample_increments,
)

__version__ = "0.1.0"
