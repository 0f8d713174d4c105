"""Higher-order geometric flows on flat tori: curvature, gauge fixing, symbols and jets."""

from .curvature import (
    CurvaturePack,
    ansatz_tensor,
    christoffel,
    lie_derivative,
    ricci_scalar,
    rough_laplacian_power,
)
from .flow import (
    AdjustedFlowIntegrator,
    DiffeoField,
    FlowHalted,
    FlowState,
    choose_dt,
    energy_monitor,
    integrate_adjusted,
    pullback_metric,
    reconstruct_pure_flow,
    step_adjusted_flow,
    step_diffeo,
)
from .gauge import deturck_field, difference_tensor, mixed_covariant_derivative
from .grid import (
    FieldError,
    Grid,
    MetricField,
    TensorField,
    VectorFieldOnGrid,
    dealias,
    interpolate,
    l2_inner,
    l2_norm,
    load_snapshot,
    save_snapshot,
    spectral_derivative,
)
from .identities import verify_identities
from .params import FlowParams, ParamError
from .symbol import (
    SymbolInput,
    SymbolReport,
    Verdict,
    brute_force_min,
    building_block_symbol,
    check_strong_ellipticity,
    combined_symbol,
    linearize_at_flat,
    reduced_symbol,
    symbol_matrix,
)

__version__ = "0.1.0"
