"""Flatness toolkit for discrete-time nonlinear systems with backward-shift flat outputs."""

from .expr import Expr, FlatDTError, ParseError, SingularEvaluation, UnboundSymbol, VarRef, parse_expr, to_text
from .feedback import build_feedback, complete_state_map, simulate_closed_loop, verify_brunovsky
from .flatness import FlatSpec, VerifyConfig, certify, normalize_to_forward
from .modelfile import load_model, parse_model
from .planner import PlanningProblem, plan_trajectory, synthesize_xu, validate_trajectory
from .system import SystemModel, Trajectory, simulate_forward, validate_system

__all__ = [
    "Expr",
    "FlatDTError",
    "FlatSpec",
    "ParseError",
    "PlanningProblem",
    "SingularEvaluation",
    "SystemModel",
    "Trajectory",
    "UnboundSymbol",
    "VarRef",
    "VerifyConfig",
    "build_feedback",
    "certify",
    "complete_state_map",
    "load_model",
    "normalize_to_forward",
    "parse_expr",
    "parse_model",
    "plan_trajectory",
    "simulate_closed_loop",
    "simulate_forward",
    "synthesize_xu",
    "to_text",
    "validate_system",
    "validate_trajectory",
    "verify_brunovsky",
]
