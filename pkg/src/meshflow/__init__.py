"""Variational anisotropic mesh adaptation by a discrete moving mesh PDE."""

from .geometry import (
    ElementGeometry,
    ReferenceElement,
    SimplicialMesh,
    build_reference_element,
    element_geometry,
    min_altitude_in_metric,
    read_mesh,
    uniform_square_mesh,
    write_mesh,
)
from .metric import (
    HessianRecoveryConfig,
    MetricField,
    absolute_value_spd,
    build_metric,
    element_average_metric,
    recover_hessian,
)
from .functional import (
    EnergyBreakdown,
    FunctionalSpec,
    GDerivatives,
    coercivity_constants,
    corollary_bounds,
    energy,
    g_existing,
    g_new,
    sigma_h,
)
from .mmpde import (
    MmpdeConfig,
    StagnationError,
    StepEnergy,
    TrajectoryRecord,
    assemble_velocities,
    boundary_project,
    integrate,
    local_velocities,
    step,
)
from .quality import QualityReport, bound_audit, l2_interpolation_error, quality_measures
from .render import render_svg, write_svg
from .verify import gradient_check

__version__ = "0.1.0"
