"""Generalized contact process with Kac potentials: lattice simulation and limit equations."""
from .errors import ConfigurationError, KacContactError, NumericalError, ValidationError
from .lattice import BasicPartition, TorusLattice, build_lattice, build_partition
from .kernels import (
    BlockKernel,
    Kernel,
    KernelSet,
    MicroKernel,
    XiKernel,
    build_J_gamma,
    build_kernel_set,
    coarse_grain_A_gamma,
    coarse_grain_A_xi,
    make_kernel,
)
from .micro import (
    BlockDensityField,
    PotentialField,
    RngStream,
    block_density,
    init_state,
    run_ctmc,
    run_ctmc_variant,
)
from .events import (
    apply_window,
    branching_bound_probe,
    cluster_statistics,
    decompose_clusters,
    increment_identity_check,
    run_windows,
    sample_window,
)
from .macro import (
    MacroDensity,
    MacroGrid,
    ModelSpec,
    euler_scheme,
    homogeneous_fixed_point,
    integrate,
    integrate_rhs,
    rhs_contact,
    rhs_excitatory_inhibitory,
    rhs_general,
    rhs_with_recovery,
)
from .config import ExperimentConfig, load_config, validate_config
from .report import ConvergenceReport, StudyReport, emit_report, load_report
from .studies import (
    run_cluster_probe,
    run_correlation_study,
    run_delta_ladder,
    run_gamma_ladder,
    run_study,
    run_xi_ladder,
)

__version__ = "0.1.0"
