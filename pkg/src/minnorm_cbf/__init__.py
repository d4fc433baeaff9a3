"""Min-norm CBF controller analysis: discontinuity points and boundedness certificates."""

__version__ = "0.1.0"

from .boundedness import (
    BoundednessVerdict,
    Inevitability,
    RayProbeReport,
    TestMatrix,
    Verdict,
    assemble_test_matrix,
    decide_boundedness,
    inevitability_check,
    ray_probe,
)
from .model import (
    AlphaSpec,
    BarrierSpec,
    CBFViolation,
    ControlEvaluation,
    Region,
    SystemModel,
    evaluate_controller,
    feasible_set_check,
    load_model,
    sweep_grid,
)
from .simulate import Trajectory, hazard_scan, simulate
from .zset import StrengthReport, ZPoint, locate_zset, probe_weakness, verify_z_independence

__all__ = [
    "AlphaSpec",
    "BarrierSpec",
    "BoundednessVerdict",
    "CBFViolation",
    "ControlEvaluation",
    "Inevitability",
    "RayProbeReport",
    "Region",
    "StrengthReport",
    "SystemModel",
    "TestMatrix",
    "Trajectory",
    "Verdict",
    "ZPoint",
    "assemble_test_matrix",
    "decide_boundedness",
    "evaluate_controller",
    "feasible_set_check",
    "hazard_scan",
    "inevitability_check",
    "load_model",
    "locate_zset",
    "probe_weakness",
    "ray_probe",
    "simulate",
    "sweep_grid",
    "verify_z_independence",
]
