"""Random-walk laboratory for non-intersection phenomena on Z^4.

Simulation and exact small-case machinery for walks on the integer lattice:
lattice geometry with exact ball membership, seeded reproducible walk
sampling, Monte Carlo estimators for hitting and intersection quantities,
and a constructive coupling pipeline that matches walk segments so two walks
never meet.
"""

from .errors import (
    AvoidanceError,
    BudgetExceeded,
    DegenerateFilter,
    DomainError,
    HorizonExceeded,
    InsufficientExtension,
    IoError,
    MarginalMismatch,
    SeparationInfeasible,
    StepFailed,
    UsageError,
)
from .estimators import (
    Estimate,
    ExitTimeTail,
    annulus_exit_limit,
    annulus_exit_prob,
    boundary_layer_tail,
    escape_curved_boundary_prob,
    estimate_green,
    exit_point_counts,
    exit_time_tail,
    green_exact,
    hitting_measure_max,
    inverse_square_samples,
    inverse_square_sum,
    thread_count,
)
from .coupling import (
    BipartiteInstance,
    CoupledDraw,
    CouplingTable,
    DriveResult,
    EventSpec,
    HallResult,
    OneStepResult,
    STEP_CONDITIONS,
    ScheduleStep,
    build_instance,
    build_path_sets,
    coupling_measure,
    default_separation,
    hall_check,
    make_schedule,
    mask_avoids,
    mask_stopped,
    max_matching,
    multiscale_drive,
    one_step_couple,
    pack_points,
)
from .intersections import (
    GoodTimeMask,
    HittabilityParams,
    classify_good_times,
    event_H_prob,
    event_h_threshold,
    expected_intersections,
    hittability_sweep,
    hittability_tail,
    intersection_prob,
    moment_sum,
    moment_sum_bound_shape,
    trace_intersection,
)
from .lattice import (
    BallSpec,
    LatticePoint,
    ball,
    boundary_points,
    boundary_size,
    neighbors,
    origin,
    sample_boundary_point,
    sample_separated_boundary_pair,
    step,
    unit,
)
from .streams import RandomStream
from .walker import (
    PathSet,
    WalkPath,
    default_step_cap,
    enumerate_paths,
    load_path_set,
    sample_paths,
    walk_fixed_length,
    walk_to_boundary,
)

__version__ = "0.1.0"

__all__ = [
    "annulus_exit_limit",
    "annulus_exit_prob",
    "AvoidanceError",
    "ball",
    "BallSpec",
    "BipartiteInstance",
    "boundary_layer_tail",
    "boundary_points",
    "boundary_size",
    "BudgetExceeded",
    "build_instance",
    "build_path_sets",
    "classify_good_times",
    "CoupledDraw",
    "coupling_measure",
    "CouplingTable",
    "default_separation",
    "default_step_cap",
    "DegenerateFilter",
    "DomainError",
    "DriveResult",
    "enumerate_paths",
    "escape_curved_boundary_prob",
    "Estimate",
    "estimate_green",
    "event_H_prob",
    "event_h_threshold",
    "EventSpec",
    "exit_point_counts",
    "exit_time_tail",
    "ExitTimeTail",
    "expected_intersections",
    "GoodTimeMask",
    "green_exact",
    "hall_check",
    "HallResult",
    "hittability_sweep",
    "hittability_tail",
    "HittabilityParams",
    "hitting_measure_max",
    "HorizonExceeded",
    "InsufficientExtension",
    "IoError",
    "intersection_prob",
    "inverse_square_samples",
    "inverse_square_sum",
    "LatticePoint",
    "load_path_set",
    "make_schedule",
    "MarginalMismatch",
    "mask_avoids",
    "mask_stopped",
    "max_matching",
    "moment_sum",
    "moment_sum_bound_shape",
    "multiscale_drive",
    "neighbors",
    "one_step_couple",
    "OneStepResult",
    "origin",
    "pack_points",
    "PathSet",
    "RandomStream",
    "sample_boundary_point",
    "sample_paths",
    "sample_separated_boundary_pair",
    "ScheduleStep",
    "SeparationInfeasible",
    "step",
    "STEP_CONDITIONS",
    "StepFailed",
    "thread_count",
    "trace_intersection",
    "unit",
    "UsageError",
    "walk_fixed_length",
    "walk_to_boundary",
    "WalkPath",
    "__version__",
]
