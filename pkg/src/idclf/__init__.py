"""Planar human-prosthesis walking with inverse-dynamics CLF-QP prosthesis control."""
from .clf import make_clf, solve_care
from .constraints import constrained_accel, holonomic_set, impact_map
from .control import ControllerConfig, ProsthesisController
from .errors import (ConfigError, ConstraintRankError, IdclfError, ModelError, OutputRankError,
                     SimulationError, SolverError, TimingError)
from .gait import load_gait
from .model import FullState, MeasurableBundle, load_model, subsystem_model
from .qpsolve import QPProblem, solve_qp
from .sim import SimConfig, SimLog, walk

__version__ = "0.1.0"
