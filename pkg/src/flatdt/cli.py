"""``flatdt`` command line: check, plan, feedback, simulate.

Exit status: 0 success, 1 verification failure, 2 parse or validation error,
3 numeric non-convergence.  Errors are written to stderr as one JSON object
``{"code", "message", "location"}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .expr import FlatDTError, ParseError, SingularEvaluation
from .feedback import (
    FeedbackError,
    build_feedback,
    complete_state_map,
    guarded_input_sequence,
    sample_output_jets,
    simulate_closed_loop,
    verify_brunovsky,
    verify_deadbeat,
    write_closed_loop_csv,
)
from .flatness import VerifyConfig, certify
from .jet import GuardFailure
from .modelfile import load_model
from .numerics import ConvergenceError
from .planner import PlanningProblem, plan_trajectory, synthesize_xu, validate_trajectory, write_output_csv
from .system import simulate_forward, write_trajectory_csv

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class CLIError(Exception):
    def __init__(self, code: int, message: str, location=None):
        super().__init__(message)
        self.code = code
        self.message = message
        self.location = location


def _emit_error(err: CLIError) -> int:
    sys.stderr.write(json.dumps({"code": err.code, "message": err.message, "location": err.location}) + "\n")
    return err.code


def _vector(text: str, size: int, what: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CLIError(EXIT_INPUT, f"{what}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) != size:
        raise CLIError(EXIT_INPUT, f"{what}: expected {size} values, got {len(vals)}")
    return np.array(vals)


def _pair(text: str, n: int, m: int, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse ``x1,..,xn;u1,..,um``."""
    parts = text.split(";")
    if len(parts) != 2:
        raise CLIError(EXIT_INPUT, f"{what}: expected 'x1,..,xn;u1,..,um'")
    return _vector(parts[0], n, what + " (state)"), _vector(parts[1], m, what + " (input)")


def _rows(text: str, width: int, what: str) -> np.ndarray:
    return np.array([_vector(p, width, what) for p in text.split(";") if p.strip()]).reshape(-1, width)


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_check(args) -> int:
    mf = load_model(args.model)
    cfg = VerifyConfig(samples=args.samples, seed=args.seed, alpha=args.alpha, beta=args.beta)
    report = certify(mf.spec, cfg)
    _write(args.output, report.to_json())
    if not report.certified:
        failed = [c.check for c in report.checks if not c.passed]
        raise CLIError(EXIT_VERIFY, f"verification failed: {', '.join(failed)}", {"file": args.model})
    return EXIT_OK


def _y_path(plan_path: str) -> str:
    p = Path(plan_path)
    return str(p.with_name(p.stem + ".y" + (p.suffix or ".csv")))


def cmd_plan(args) -> int:
    mf = load_model(args.model)
    spec, model = mf.spec, mf.system
    x_i, u_i = _pair(args.start, model.n, model.m, "--from")
    x_f, u_f = _pair(args.end, model.n, model.m, "--to")
    problem = PlanningProblem(spec, x_i, u_i, x_f, u_f, args.ki, args.kf)
    y = plan_trajectory(problem, seed=args.seed)
    traj = synthesize_xu(spec, y, args.ki, args.kf)
    report = validate_trajectory(model, traj, problem)
    write_trajectory_csv(args.output, model, traj)
    write_output_csv(args.y_output or _y_path(args.output), spec, y)
    summary = {
        "max_defect": report.max_defect,
        "simulation_error": report.simulation_error,
        "boundary_residual": report.boundary_residual,
        "guard_margin": y.guard_margin,
        "passed": report.passed,
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    if not report.passed:
        raise CLIError(EXIT_VERIFY, "planned trajectory failed validation", {"file": args.model})
    return EXIT_OK


def _feedback(mf, args):
    spec = mf.spec
    if args.auto or not mf.completion:
        jet = sample_output_jets(spec, 1, args.seed)[0]
        completion = complete_state_map(spec, at=jet, names=mf.completion_names or None)
    else:
        completion = complete_state_map(spec, mf.completion, mf.completion_names, seed=args.seed)
    phi_hat = None if (args.numeric or args.auto) else mf.phi_hat
    return build_feedback(spec, completion, phi_hat, mf.input_names_v, seed=args.seed)


def cmd_feedback(args) -> int:
    mf = load_model(args.model)
    fb = _feedback(mf, args)
    brunovsky = verify_brunovsky(mf.spec, fb, args.samples, args.horizon, args.seed)
    deadbeat = verify_deadbeat(mf.spec, fb, seed=args.seed)
    out = fb.to_dict()
    out["brunovsky"] = brunovsky.to_dict()
    out["deadbeat"] = {"passed": deadbeat.passed, "max_error": deadbeat.max_error, "steps": deadbeat.steps}
    _write(args.output, json.dumps(out, indent=2) + "\n")
    if not (brunovsky.passed and deadbeat.passed):
        raise CLIError(EXIT_VERIFY, "closed loop is not in Brunovsky form", {"file": args.model})
    return EXIT_OK


def cmd_simulate(args) -> int:
    mf = load_model(args.model)
    model = mf.system
    rng = np.random.default_rng(args.seed)
    if not args.closed_loop:
        x0 = _vector(args.x0, model.n, "--x0") if args.x0 else model.x0
        if args.inputs:
            u_seq = _rows(args.inputs, model.m, "--inputs")
        else:
            u_seq = rng.uniform(model.u0 - 1.0, model.u0 + 1.0, size=(args.steps, model.m))
        traj = simulate_forward(model, x0, u_seq)
        write_trajectory_csv(args.output, model, traj)
        return EXIT_OK

    fb = _feedback(mf, args)
    jet = sample_output_jets(mf.spec, 1, args.seed)[0]
    x0, z0 = fb.forward_map(jet)
    if args.x0:
        x0 = _vector(args.x0, model.n, "--x0")
    if args.z0:
        z0 = _vector(args.z0, fb.p, "--z0")
    if args.inputs:
        v_seq = _rows(args.inputs, mf.spec.m, "--inputs")
    else:
        v_seq = guarded_input_sequence(fb, jet, args.steps, args.seed)
    cl = simulate_closed_loop(model, fb, x0, z0, v_seq, guess=jet)
    write_closed_loop_csv(args.output, fb, cl)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatdt", description="Flatness certificates for discrete-time systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("model", help="model file (.fdt)")
        p.add_argument("--seed", type=int, default=42, help="seed for all random sampling (default 42)")

    p = sub.add_parser("check", help="certify the flat output in a model file")
    common(p)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--alpha", type=int, default=None, help="zeta depth for the independence test")
    p.add_argument("--beta", type=int, default=None, help="input depth for the independence test")
    p.add_argument("-o", "--output", default=None, help="JSON report path (default stdout)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("plan", help="plan a point-to-point trajectory")
    common(p)
    p.add_argument("--from", dest="start", required=True, help="'x1,..,xn;u1,..,um' at k_i")
    p.add_argument("--to", dest="end", required=True, help="'x1,..,xn;u1,..,um' at k_f")
    p.add_argument("--ki", type=int, default=0)
    p.add_argument("--kf", type=int, required=True)
    p.add_argument("-o", "--output", required=True, help="trajectory CSV")
    p.add_argument("--y-output", default=None, help="flat-output CSV (default: <output>.y.csv)")
    p.set_defaults(func=cmd_plan)

    def feedback_opts(p):
        p.add_argument("--auto", action="store_true", help="choose the compensator state automatically")
        p.add_argument("--numeric", action="store_true", help="invert F_xz numerically even if phi_hat is given")

    p = sub.add_parser("feedback", help="build the linearizing feedback and verify the closed loop")
    common(p)
    feedback_opts(p)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--horizon", type=int, default=15)
    p.add_argument("-o", "--output", default=None, help="JSON path (default stdout)")
    p.set_defaults(func=cmd_feedback)

    p = sub.add_parser("simulate", help="open- or closed-loop simulation")
    common(p)
    feedback_opts(p)
    p.add_argument("--closed-loop", action="store_true")
    p.add_argument("--x0", default=None, help="initial state 'x1,..,xn'")
    p.add_argument("--z0", default=None, help="initial compensator state (closed loop)")
    p.add_argument("--inputs", default=None, help="'a,b;c,d;...' one row per step (u, or v in closed loop)")
    p.add_argument("--steps", type=int, default=30, help="random input steps when --inputs is absent")
    p.add_argument("-o", "--output", required=True, help="trajectory CSV")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    print(f"seed: {args.seed}", file=sys.stderr)
    try:
        return args.func(args)
    except CLIError as err:
        return _emit_error(err)
    except ParseError as exc:
        loc = {"file": args.model, "line": exc.line, "column": exc.column}
        return _emit_error(CLIError(EXIT_INPUT, exc.message, loc))
    except OSError as exc:
        return _emit_error(CLIError(EXIT_INPUT, str(exc), {"file": args.model}))
    except (ConvergenceError, SingularEvaluation, GuardFailure) as exc:
        return _emit_error(CLIError(EXIT_NUMERIC, str(exc), {"file": args.model}))
    except FeedbackError as exc:
        return _emit_error(CLIError(EXIT_VERIFY, str(exc), {"file": args.model}))
    except FlatDTError as exc:
        return _emit_error(CLIError(EXIT_INPUT, str(exc), {"file": args.model}))


if __name__ == "__main__":
    sys.exit(main())
