"""GP-based parameterized high-order control barrier function safety filters."""
from .barrier import BarrierChain, EpsilonFn, LinearClassK, PsiEval, obstacle_chain
from .gp import Dataset, ErrorBound, GPModel, KernelSpec, fit
from .safety_filter import FilterMode, HalfspaceConstraint, InputBox, QPResult, solve_qp
from .systems import PointMass, SphereObstacle, TwoLinkArm

__all__ = [
    "BarrierChain",
    "EpsilonFn",
    "LinearClassK",
    "PsiEval",
    "obstacle_chain",
    "Dataset",
    "ErrorBound",
    "GPModel",
    "KernelSpec",
    "fit",
    "FilterMode",
    "HalfspaceConstraint",
    "InputBox",
    "QPResult",
    "solve_qp",
    "PointMass",
    "SphereObstacle",
    "TwoLinkArm",
]
