"""Small control problems shared by the optimizer and acceptance tests."""
import math
from dataclasses import replace

import numpy as np

from ccflow.controls import ControlGrid
from ccflow.cost import CostWeights
from ccflow.demand import MeanLevel, OUProcess
from ccflow.network import BoundarySpec, Edge, EdgeModel, IboxSystem, Network, initial_state
from ccflow.optimize import ChanceConstraintSpec, ControlProblem, OptimizerSettings
from ccflow.scenario import load_scenario


def advection_problem(n_cells=10, cells_x=20, weights=None, cc=None, **settings):
    """Single advection edge (lam 4, s -0.1) on [0, 1] with T = 1."""
    net = Network([Edge("e", "vin", "vd", 0.0, 1.0, cells_x,
                        EdgeModel("advection", lam=4.0, s=-0.1))],
                  BoundarySpec("rho", control="u"))
    dt = 1.0 / cells_x / 4.0
    sysm = IboxSystem(net, dt)
    p = OUProcess(0.0, 1.0, 3.0, 0.1, MeanLevel.sinusoidal(1.0, 2.0, 8 * math.pi))
    grid = ControlGrid.constant(0.0, 1.0 / n_cells, n_cells, {"u": 1.0})
    return ControlProblem(net=net, x0=initial_state(sysm, {"e": [1.0]}), process=p,
                          weights=weights or CostWeights(), controls=grid, T=1.0, dt=dt,
                          cc=cc or ChanceConstraintSpec(), system=sysm,
                          settings=OptimizerSettings(**settings))


def tele_problem(n_cells=20, **kw):
    prob = load_scenario("tele").problem(**kw)
    cell = prob.T / n_cells
    return prob.with_(controls=ControlGrid.constant(0.0, cell, n_cells, {"u": 1.0}))


def rel_error(g, fd):
    return float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-300))
