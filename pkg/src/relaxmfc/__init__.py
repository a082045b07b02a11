"""Relaxed (measure-valued) controls for first-order mean field control."""

__version__ = "0.1.0"

from .measures import AtomicMeasure, JointMeasure, TransportError, w1, w1_circle, w1_lp
from .problem import AssumptionError, ProblemSpec, builtin, load_spec, validate_assumptions
from .control import ControlAtoms, FeedbackControl, RelaxedControl, enforce_budget, moment
from .dynamics import FlowMeasure, NonFiniteError, Path, PathEnsemble, empirical_flow, flow_ensemble, integrate_path
from .cost import ensemble_cost, path_cost
from .solver import (BestResponse, EquilibriumResult, UnsupportedDimensionError, best_response_dp,
                     best_response_grad, certify, fixed_point_iterate)
from .strictify import NonConvexityError, strict_equilibrium_from
from .kernels import BACKEND
