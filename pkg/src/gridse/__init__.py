"""Multi-area power-system state estimation.

Weighted-least-squares Gauss-Newton estimation with a centralized baseline
and a hierarchical boundary-condensed multi-area solver: typed
fixed-sparsity measurement templates, fused normal-equation accumulation,
per-area Schur condensation over a cached sparse factorization, and a
reduced dense boundary coordinator.
"""

from .assembly import (
    AreaNormalBlocks,
    AssemblyPattern,
    JacobianTriplets,
    build_patterns,
    explicit_assemble,
    fused_accumulate,
)
from .linalg import (
    NotPositiveDefiniteError,
    SchurResult,
    SparseCholeskyCache,
    dense_cholesky_solve,
    interior_recover,
    numeric_refactor,
    schur_condense,
    symbolic_analyze,
)
from .measurement import (
    MeasurementConfig,
    MeasurementSet,
    MeasurementType,
    StateVector,
    apply_mask,
    clear_mask,
    eval_h,
    eval_h_all,
    eval_row_gradient,
    generate_measurements,
    load_measurements,
    row_template,
    write_measurements,
)
from .network import (
    Branch,
    Bus,
    BusBranchNetwork,
    CaseError,
    build_ybus,
    load_case,
    parse_case,
    to_native_json,
)
from .partition import (
    AreaVariableMap,
    BoundaryOrdering,
    Partition,
    PartitionError,
    build_variable_maps,
    load_partition,
    partition_network,
    read_partition_file,
    write_partition_file,
)
from .solver import (
    BoundarySystem,
    SolveReport,
    SolverConfig,
    SolverError,
    assemble_boundary,
    objective,
    solve_centralized,
    solve_multiarea,
)

__version__ = "0.1.0"
