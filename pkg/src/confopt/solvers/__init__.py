from .common import RandomizedClassifier, SolverTrace, TraceRecord
from .constrained import FeasibilityConfig, con_bisection, con_ellipsoid, con_gda, split_fw
from .unconstrained import EllipsoidState, bisection, ellipsoid, frank_wolfe, fw_weights, gda, jle

__all__ = [
    "EllipsoidState",
    "FeasibilityConfig",
    "RandomizedClassifier",
    "SolverTrace",
    "TraceRecord",
    "bisection",
    "con_bisection",
    "con_ellipsoid",
    "con_gda",
    "ellipsoid",
    "frank_wolfe",
    "fw_weights",
    "gda",
    "jle",
    "split_fw",
]
