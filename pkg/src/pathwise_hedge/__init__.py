"""Pathwise delta hedging on sampled price paths.

Sewing and Young integration on grids, enhanced paths with local-vol
brackets, a finite-difference pricer, discrete and enlarged hedging
ledgers with financing-cost bounds, and Volterra-driven deceptive
dynamics.
"""

from .enhancement import EnhancedPath, LocalVolSpec, bracket_diff, diffusion_enhance, realized_bracket
from .grids import (
    ControlField,
    GridError,
    SampledPath,
    TimeGrid,
    TwoParamField,
    control_osc,
    delta_defect,
    increments_field,
    p_variation,
)
from .hedging import (
    BoundViolation,
    HedgeLedger,
    SwapQuote,
    discrete_delta_hedge,
    enlarged_hedge,
    financing_bound,
    ftdt_pnl,
    pathwise_value_path,
    robust_financing_bound,
)
from .integration import (
    ControlledPath,
    DivergenceError,
    SewingResult,
    compensated_integral,
    remainder_report,
    sew,
    young,
)
from .pde import ClosedFormBS, DomainError, NumericFailure, PayoffSpec, PdeSolution, SchemeParams, greeks, solve
from .volterra import (
    DeceptiveSpec,
    KernelParams,
    deceptive_path,
    dyadic_limit_demo,
    riemann_gap_closed_form,
    grid_concatenated_path,
    kernel_eval,
    simulate_zeta_psi,
)

__version__ = "0.1.0"
