"""Volume-dependent optimal execution toolkit.

Closed-form and adaptive liquidation strategies when temporary market impact
scales inversely with stochastic market volume, a penalized HJB solver for
the adaptive control problem, a small-noise expansion of its value function,
and Monte Carlo machinery to compare expected implementation-shortfall costs.
"""

__version__ = "0.1.0"

from .core import (
    CostReport,
    DomainError,
    ExecutionSchedule,
    GridMismatchError,
    MarketParams,
    QuadratureError,
    SolverError,
    TimeGrid,
    UnsupportedRegimeError,
    VolexError,
    holdings_from_rates,
    pathwise_cost,
)
from .expansion import ExpansionCoeffs, ou_moment_functions
from .hjb import (
    LambdaSweepResult,
    PdeGrid,
    ValueSurface,
    bs_closed_form_w,
    lambda_sweep,
    penalized_rate_path,
    solve_w_lambda,
    solve_w_lambda_noise,
)
from .montecarlo import (
    ExperimentConfig,
    SweepResult,
    epsilon_sweep,
    estimate_cost,
    evaluate_strategies,
    sample_strategy_paths,
    simulate_adaptive,
)
from .strategies import (
    AppendixBParams,
    analytic_adaptive_bs,
    appendix_b_strategy,
    bs_optimal_cost_model,
    exact_vwap,
    expected_vwap,
    permanent_mi_cost,
    twap,
    twisted_vwap,
)
from .volume import (
    Coef,
    ConstantVolume,
    PerturbedOU,
    TimeDepBS,
    VolumePath,
    harmonic_mean_u,
    log_moments,
    sample_block,
    sample_path,
)
