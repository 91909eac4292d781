"""Runtime supervision of unverified controllers for stochastic systems.

A finite abstraction of the plant is coupled to the concrete system through
a probabilistic relation.  A safety advisor synthesized on the abstraction
provides a fallback input with a certified bound, and a supervisor accepts
inputs of an unverified controller only while the bound is preserved.
"""
from .abstraction import FiniteAbstraction, GridPartition, build_partition, locate, memory_estimate
from .controllers import RandomController, TrackingController, random_controller, tracking_controller
from .errors import ConfigError, ContractError, ValidationError
from .harness import RunMetrics, report, resolution_sweep, run_monte_carlo
from .model import SystemModel, recover_noise, step
from .relation import InterfaceForm, ProbRelation, compute_gamma, feasible_inputs, in_relation, refine_input
from .runtime import Architecture, Safevisor, run_single, simulate_batch
from .scenario import Scenario, build_architecture, load_scenario
from .spec import Box, LabellingFunction, Mode, SafetyAutomaton, accepts, dfa_step, label
from .synthesis import (Product, brute_force_values, build_product, synthesize, synthesize_robust,
                        synthesize_worst)

__version__ = "0.1.0"

__all__ = [
    "Architecture", "Box", "ConfigError", "ContractError", "FiniteAbstraction", "GridPartition", "InterfaceForm",
    "LabellingFunction", "Mode", "ProbRelation", "Product", "RandomController", "RunMetrics", "SafetyAutomaton",
    "Safevisor", "Scenario", "SystemModel", "TrackingController", "ValidationError", "accepts",
    "brute_force_values", "build_architecture", "build_partition", "build_product", "compute_gamma",
    "dfa_step", "feasible_inputs", "in_relation", "label", "load_scenario", "locate", "memory_estimate",
    "random_controller", "recover_noise", "refine_input", "report", "resolution_sweep", "run_monte_carlo",
    "run_single", "simulate_batch", "step", "synthesize", "synthesize_robust", "synthesize_worst",
    "tracking_controller",
]
