"""Random walks among i.i.d. bounded random conductances on finite boxes of Z^d.

Exact quenched heat kernels, percolation structure of strong/weak edges,
trap configurations, Monte Carlo walks and the experiments built on them.
"""

from rcmwalk.lattice import BoxGeometry, annulus, annulus_size, box_vertices, boundary
from rcmwalk.environment import (
    ConductanceField,
    LawSpec,
    TrapRecord,
    check_condition_C,
    detect_traps,
    is_trap_adjacent,
    plant_trap,
    sample_field,
    tail_exponent,
)
from rcmwalk.percolation import (
    ClusterLabeling,
    HiddenSet,
    clusters,
    hidden_set,
    hole,
    max_hidden_size,
    strong_cluster,
)
from rcmwalk.kernel import (
    DistributionVector,
    TransitionKernel,
    annulus_mass,
    check_reversibility,
    cs_lower_bound,
    heat_kernel,
    return_series,
    step,
)

__version__ = "0.1.0"

__all__ = [
    "BoxGeometry",
    "ClusterLabeling",
    "ConductanceField",
    "DistributionVector",
    "HiddenSet",
    "LawSpec",
    "TransitionKernel",
    "TrapRecord",
    "annulus",
    "annulus_mass",
    "annulus_size",
    "boundary",
    "box_vertices",
    "check_condition_C",
    "check_reversibility",
    "clusters",
    "cs_lower_bound",
    "detect_traps",
    "heat_kernel",
    "hidden_set",
    "hole",
    "is_trap_adjacent",
    "max_hidden_size",
    "plant_trap",
    "return_series",
    "sample_field",
    "step",
    "strong_cluster",
    "tail_exponent",
]
