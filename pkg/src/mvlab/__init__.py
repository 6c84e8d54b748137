"""McKean-Vlasov numerics laboratory."""

__version__ = "0.1.0"

from .coefficients import (  # noqa: E402
    AssumptionReport,
    CoefficientSet,
    SamplePlan,
    kato_class_check,
    tilde_lpq_norm,
    verify_A1,
    verify_A2,
)
from .measures import (  # noqa: E402
    EmpiricalMeasure,
    MeasureFlow,
    MetricReport,
    flow_distance,
    gpp_report,
    theta_moment,
    total_variation,
    wasserstein,
    weighted_tv,
)
from .parametrix import (  # noqa: E402
    FrozenKernel,
    KernelGrid,
    ParametrixResult,
    freeze_covariance,
    frozen_density,
    frozen_density_grad,
    frozen_density_hess,
    h_kernel,
    h_kernel_iterated,
    parametrix_density,
    reference_kernel,
    verify_bounds,
)
from .simulator import (  # noqa: E402
    ParticleEnsemble,
    SimulationPlan,
    invariant_class_check,
    moment_report,
    phi_map,
    picard_solve,
    simulate_frozen,
    simulate_mckean_vlasov,
)
from .zvonkin import GridSpec, lambda_search, regularity_gate, solve_backward_pde, theta_transform  # noqa: E402
