"""Learning feedback-linearizing coordinates and controllers.

Given candidate basis libraries for the coordinate change, the drift and the
input gain, the linearization conditions become a homogeneous linear system
on the stacked coefficients.  The system can be assembled either from a
known model (through a declared function basis) or directly from input-state
data; a one-dimensional kernel certifies that the recovered solution
linearizes the dynamics on the whole domain of interest, not just at the
samples.
"""

from .dictionary import (
    BasisFunction,
    Dictionary,
    FamilySpec,
    LibrarySpec,
    build_family,
    build_standard_library,
    parse_basis_function,
)
from .simulator import (
    ControlAffineSystem,
    Dataset,
    ExcitationSignal,
    TrajectoryEscapeError,
    collect_dataset,
    estimate_derivatives,
    make_system,
    read_dataset_csv,
    rk4_step,
    write_dataset_csv,
    write_dataset_json,
)
from .regressor import (
    BrunovskyStructure,
    RegressorBlock,
    StackedRegressor,
    SufficiencyReport,
    brunovsky,
    build_F,
    data_sufficiency,
    stack,
)
from .solver import (
    LinearizingSolution,
    NormalizedVector,
    NullspaceResult,
    RegularityReport,
    SolveOutcome,
    SparsifyResult,
    check_regularity,
    normalize,
    nullspace,
    pack,
    solution_report,
    solve_linearization,
    sparsify,
    unpack,
)
from .modelbased import (
    CoefficientTable,
    IncompleteFitError,
    PhiBasis,
    SampleGrid,
    assemble_theorem1_system,
    fit_coefficients,
    parse_phi,
    solve_model_based,
    suggest_phi_basis,
)
from .controller import (
    ClosedLoopTrajectory,
    DiffeoRegion,
    GammaSingularError,
    RoAEstimate,
    StateFeedback,
    StateGrid,
    closed_loop_simulate,
    control_law,
    diffeo_domain_check,
    estimate_roa,
    lyapunov_solve,
    place_poles_brunovsky,
    write_roa_json,
    write_trajectory_csv,
)

__version__ = "0.1.0"
