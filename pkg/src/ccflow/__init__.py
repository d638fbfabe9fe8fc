"""Chance-constrained optimal inflow control on hyperbolic supply networks."""
from .cost import CostWeights
from .demand import MeanLevel, OUProcess
from .fptd import Boundary, risk_level, solve_volterra
from .network import Network, simulate
from .optimize import ChanceConstraintSpec, ControlProblem, optimize
from .scenario import Scenario, load_scenario

__all__ = ["ChanceConstraintSpec", "ControlProblem", "CostWeights", "MeanLevel", "Network",
           "OUProcess", "Scenario", "Boundary", "load_scenario", "risk_level", "solve_volterra", "optimize", "simulate"]
__version__ = "0.1.0"
