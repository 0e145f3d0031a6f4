"""Space-time threshold exceedances driven by Gamma random fields over moving elliptical cylinders."""

from .geometry import (
    CylinderKernel,
    Ellipse,
    SpaceTimePoint,
    cylinder_intersection_volume,
    ellipse_overlap_area,
    overlap_volumes,
)
from .likelihood import (
    FitResult,
    PairScheme,
    ParameterRegionError,
    SingularHessianError,
    clic,
    fit,
    godambe,
    pair_density,
    pairwise_loglik,
    per_time_loglik,
)
from .model import (
    ModelParams,
    PairExponents,
    chi_sub,
    chibar_limit,
    chibar_sub,
    exceedance_prob,
    inverse_marginal_transform,
    lp1,
    lp2,
    lp2_partials,
    marginal_transform,
    pair_exponents,
)
from .panel import ExceedancePanel
from .simulate import (
    GammaAtomSet,
    SimulationDesign,
    latent_field,
    scenario_a,
    scenario_b,
    simulate_gamma_measure,
    simulate_panel,
)

__version__ = "0.1.0"
