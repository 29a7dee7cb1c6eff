"""Simulation and analysis toolkit for dense networks of noisy
integrate-and-fire neurons and their spatially-extended mean-field limit.

The package is organized around six pieces:

* :mod:`spikefield.model` -- bounded intensity/drift families with exact norms;
* :mod:`spikefield.graphon` -- weight matrices, step graphons, cut norms,
  random-graph generators, and moduli of continuity;
* :mod:`spikefield.netsim` -- exact event-driven simulation of the finite
  network and of the mean-field-driven auxiliary processes;
* :mod:`spikefield.meanfield` -- the particle solver for the limit equation,
  the backward dual equation, and the regularity constants;
* :mod:`spikefield.metrics` -- computable weak distances between
  spatially-extended measures;
* :mod:`spikefield.lab` -- experiment orchestration, reporting, and the CLI.
"""

__version__ = "0.1.0"

from .model import Bounds, ModelFunctions, eval_model, make_model
from .graphon import (
    ModulusOfContinuity,
    Partition,
    StepGraphon,
    WeightMatrix,
    cut_distance,
    gen_uniform_attachment,
    gen_w_random,
    modulus_of_continuity,
    op_norm_inf_to_1,
    step_graphon,
)
from .meanfield import (
    DualTestFunction,
    InitialLaw,
    InputField,
    KappaReport,
    MeanFieldSolution,
    SpatialMeasure,
    duality_defect,
    initial_law,
    kappa_constants,
    measure_from_atoms,
    shift_by_input,
    solve_dual_backward,
    solve_meanfield,
    solve_meanfield_0d,
)
from .netsim import (
    NetworkState,
    PoissonStream,
    TrajectoryLog,
    coupling_distance,
    extended_empirical_measure,
    integrated_input_field,
    poisson_streams,
    simulate_auxiliary,
    simulate_network,
)
from .metrics import (
    MeasureDistanceReport,
    default_test_family,
    h11_distance,
    h1x_distance,
    phi_w_lb_distance,
    phi_w_norm,
    second_moment,
)
from .lab import (
    ExperimentConfig,
    ExperimentReport,
    default_config,
    emit_report,
    render_figures,
    run_experiment,
)

__all__ = [
    "Bounds", "ModelFunctions", "make_model", "eval_model",
    "WeightMatrix", "Partition", "StepGraphon", "ModulusOfContinuity",
    "gen_uniform_attachment", "gen_w_random", "step_graphon",
    "op_norm_inf_to_1", "cut_distance", "modulus_of_continuity",
    "NetworkState", "PoissonStream", "TrajectoryLog", "poisson_streams",
    "simulate_network", "simulate_auxiliary", "coupling_distance",
    "extended_empirical_measure", "integrated_input_field",
    "SpatialMeasure", "InitialLaw", "initial_law", "measure_from_atoms",
    "InputField", "MeanFieldSolution", "DualTestFunction",
    "KappaReport", "solve_meanfield", "solve_meanfield_0d", "shift_by_input",
    "solve_dual_backward", "duality_defect", "kappa_constants",
    "MeasureDistanceReport", "h11_distance", "h1x_distance",
    "phi_w_norm", "phi_w_lb_distance", "second_moment", "default_test_family",
    "ExperimentConfig", "ExperimentReport", "default_config",
    "run_experiment", "emit_report", "render_figures",
]
