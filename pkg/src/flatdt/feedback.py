"""Linearizing dynamic feedback built from a flat parameterization.

The output-jet coordinates below the chain tops, Y = (y^j[0..r_j-1]), are
mapped to (x, z) by F_xz = (F_x, F_z).  Inverting F_xz and appending the new
input v = (y^j[r_j]) gives the full window, from which the compensator update
and the plant input follow by evaluating the shifted F_z and F_u.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .expr import (
    Binding,
    Expr,
    FlatDTError,
    SingularEvaluation,
    Var,
    VarRef,
    denominators,
    eval_many,
    eval_with_jacobian,
    free_vars,
    substitute,
    to_text,
)
from .flatness import FlatSpec
from .jet import GUARD_EPS, GuardFailure, JetChart, guards_ok, sample_jet_points, shift_output_by
from .numerics import ConvergenceError, damped_newton, numeric_rank
from .system import SystemModel, Trajectory

BRUNOVSKY_TOL = 1e-8
INVERSE_TOL = 1e-8
COMPLETION_SAMPLES = 20


class FeedbackError(FlatDTError):
    pass


def chain_refs(spec: FlatSpec) -> list[VarRef]:
    """Y = (y^1[0..r_1-1], ..., y^m[0..r_m-1])."""
    if min(w[0] for w in spec.windows) < 0:
        raise FeedbackError("the parameterization uses backward output shifts; normalize it first")
    return [VarRef(y, k) for y, r in zip(spec.output_names, spec.R) for k in range(r)]


def top_refs(spec: FlatSpec) -> list[VarRef]:
    return [VarRef(y, r) for y, r in zip(spec.output_names, spec.R)]


def _spec_guards(spec: FlatSpec) -> list[Expr]:
    out = list(spec.guards)
    for d in denominators(spec.F):
        if d not in out:
            out.append(d)
    return out


def sample_output_jets(spec: FlatSpec, count: int, seed: int) -> list[dict[VarRef, float]]:
    """Guarded points on the full window (Y, tops), as dictionaries."""
    chart = JetChart(tuple(chain_refs(spec) + top_refs(spec)))
    pts = sample_jet_points(
        chart,
        count,
        seed,
        _spec_guards(spec),
        params=spec.system.params,
        center=spec.output_center(chart.coords),
        radius=spec.system.radius,
    )
    return [p.as_dict() for p in pts]


@dataclass(frozen=True)
class StateCompletion:
    """Compensator coordinates z = F_z(Y).

    ``selection`` lists the chosen coordinates when F_z is a projection
    found automatically; it is None for user-supplied maps.
    """

    names: tuple[str, ...]
    F_z: tuple[Expr, ...]
    selection: tuple[VarRef, ...] | None = None
    rank: int = 0

    @property
    def p(self) -> int:
        return len(self.F_z)


def _completion_rank(spec: FlatSpec, F_z: Sequence[Expr], point: Mapping[VarRef, float]) -> int:
    refs = chain_refs(spec)
    b = Binding({r: point[r] for r in refs}, spec.system.params)
    jac = eval_with_jacobian(tuple(spec.F_x) + tuple(F_z), refs, b)[1]
    return numeric_rank(jac)


def complete_state_map(
    spec: FlatSpec,
    F_z: Sequence[Expr] | None = None,
    names: Sequence[str] | None = None,
    at: Mapping[VarRef, float] | None = None,
    samples: int = COMPLETION_SAMPLES,
    seed: int = 42,
) -> StateCompletion:
    """Complete F_x to a square diffeomorphism F_xz of the chain coordinates.

    With ``F_z`` given, its rank is checked at ``at`` (default: the
    equilibrium output jet) and at guarded samples.  Otherwise coordinates
    y^j[k], k < r_j, are added greedily (j first, then k) while they raise the
    rank of [dF_x; dF_z] at ``at``.
    """
    refs = chain_refs(spec)
    target = len(refs)
    p = target - spec.system.n
    if p < 0:
        raise FeedbackError(f"F_x needs more coordinates ({spec.system.n}) than the chains provide ({target})")
    if names is None:
        names = tuple(f"w{i + 1}" for i in range(p))
    names = tuple(names)
    point = dict(at) if at is not None else spec.output_center(refs)
    hint = "supply F_z explicitly or pass a non-equilibrium jet point"

    if F_z is not None:
        F_z = tuple(F_z)
        if len(F_z) != p or len(names) != p:
            raise FeedbackError(f"F_z must have p = sum(R) - n = {p} components, got {len(F_z)}")
        extra = free_vars(F_z) - set(refs)
        if extra:
            raise FeedbackError(f"F_z may use only chain coordinates below the tops; got {sorted(map(str, extra))}")
        rank = None
        try:
            rank = _completion_rank(spec, F_z, point)
        except SingularEvaluation as exc:
            # the equilibrium jet often lies on the singular locus; samples decide then
            if at is not None:
                raise FeedbackError(f"F_xz is singular at the chosen jet ({exc}); {hint}") from None
        if rank is not None and rank < target:
            raise FeedbackError(f"F_xz has rank {rank} < {target} at the chosen jet; {hint}")
        for pt in sample_output_jets(spec, samples, seed):
            r = _completion_rank(spec, F_z, pt)
            if r < target:
                raise FeedbackError(f"F_xz has rank {r} < {target} at a sampled jet")
        return StateCompletion(names, F_z, None, target)

    chosen: list[VarRef] = []
    try:
        rank = _completion_rank(spec, (), point) if spec.F_x else 0
        for ref in refs:
            if len(chosen) == p:
                break
            trial = _completion_rank(spec, [Var(*c) for c in chosen + [ref]], point)
            if trial > rank:
                chosen.append(ref)
                rank = trial
    except SingularEvaluation as exc:
        raise FeedbackError(f"F_x is singular at the chosen jet ({exc}); {hint}") from None
    if rank < target:
        raise FeedbackError(f"rank completion stopped at {rank} < {target} at the chosen jet; {hint}")
    return StateCompletion(names, tuple(Var(*c) for c in chosen), tuple(chosen), rank)


@dataclass(frozen=True)
class DynamicFeedback:
    """Compensator ``z+ = alpha(x, z, v)`` and input ``u = beta(x, z, v)``.

    Rows of ``alpha`` and ``beta`` that are None are evaluated numerically by
    inverting F_xz.  ``phi_hat``, when present, is the closed-form inverse of
    F_xz and replaces the numeric inversion.
    """

    spec: FlatSpec
    completion: StateCompletion
    v_names: tuple[str, ...]
    alpha: tuple[Expr | None, ...]
    beta: tuple[Expr | None, ...]
    phi_hat: dict[VarRef, Expr] | None = None
    tol: float = 1e-12
    max_iter: int = 50

    @property
    def system(self) -> SystemModel:
        return self.spec.system

    @property
    def p(self) -> int:
        return self.completion.p

    @property
    def chains(self) -> tuple[int, ...]:
        return self.spec.R

    @property
    def symbolic(self) -> bool:
        return all(e is not None for e in self.alpha + self.beta)

    @property
    def F_xz(self) -> tuple[Expr, ...]:
        return tuple(self.spec.F_x) + self.completion.F_z

    def with_alpha_row(self, i: int, e: Expr) -> "DynamicFeedback":
        rows = list(self.alpha)
        rows[i] = e
        return replace(self, alpha=tuple(rows))

    def xzv_binding(self, x, z, v) -> Binding:
        names = self.system.state_names + self.completion.names + self.v_names
        vals = np.concatenate([np.ravel(x), np.ravel(z), np.ravel(v)]).astype(float)
        return Binding({VarRef(n): float(a) for n, a in zip(names, vals)}, self.system.params)

    def forward_map(self, Y: Mapping[VarRef, float]) -> tuple[np.ndarray, np.ndarray]:
        """(x, z) = F_xz(Y)."""
        b = Binding({r: Y[r] for r in chain_refs(self.spec)}, self.system.params)
        vals = eval_many(self.F_xz, b)
        n = self.system.n
        return vals[:n], vals[n:]

    def invert(self, x, z, guess: Mapping[VarRef, float] | None = None, numeric: bool = False) -> dict[VarRef, float]:
        """Chain coordinates Y with F_xz(Y) = (x, z)."""
        refs = chain_refs(self.spec)
        if self.phi_hat is not None and not numeric:
            b = self.xzv_binding(x, z, ())
            return dict(zip(refs, map(float, eval_many([self.phi_hat[r] for r in refs], b))))
        target = np.concatenate([np.ravel(x), np.ravel(z)]).astype(float)
        params = self.system.params
        start = guess if guess is not None else self.spec.output_center(refs)
        y0 = np.array([start[r] for r in refs], dtype=float)

        def fun(yv):
            val, jac = eval_with_jacobian(self.F_xz, refs, Binding(dict(zip(refs, yv)), params))
            return val - target, jac

        try:
            sol = damped_newton(fun, y0, tol=self.tol, max_iter=self.max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"inversion of F_xz failed: {exc}") from None
        return dict(zip(refs, map(float, sol.x)))

    def full_window(self, Y: Mapping[VarRef, float], v) -> dict[VarRef, float]:
        out = dict(Y)
        out.update(zip(top_refs(self.spec), map(float, np.ravel(v))))
        return out

    def evaluate(self, x, z, v, guess: Mapping[VarRef, float] | None = None):
        """Return ``(z_plus, u, window)``; ``window`` is None when no inversion was needed."""
        window = None
        b = self.xzv_binding(x, z, v)
        if not self.symbolic:
            window = self.full_window(self.invert(x, z, guess), v)
        wb = Binding(window, self.system.params) if window is not None else None
        shifted = [shift_output_by(e, 1) for e in self.completion.F_z]
        z_plus = np.array(
            [eval_many([a], b)[0] if a is not None else eval_many([s], wb)[0] for a, s in zip(self.alpha, shifted)]
        )
        u = np.array(
            [eval_many([e], b)[0] if e is not None else eval_many([fu], wb)[0] for e, fu in zip(self.beta, self.spec.F_u)]
        )
        return z_plus, u, window

    def to_dict(self) -> dict:
        def rows(es):
            if any(e is None for e in es):
                return "numeric"
            return [to_text(e) for e in es]

        return {
            "p": self.p,
            "chains": list(self.chains),
            "completion": [f"{n} = {to_text(e)}" for n, e in zip(self.completion.names, self.completion.F_z)],
            "alpha": rows(self.alpha),
            "beta": rows(self.beta),
        }


def build_feedback(
    spec: FlatSpec,
    completion: StateCompletion,
    phi_hat: Mapping[VarRef, Expr] | None = None,
    v_names: Sequence[str] | None = None,
    samples: int = COMPLETION_SAMPLES,
    seed: int = 42,
) -> DynamicFeedback:
    """Assemble the feedback; symbolic when a closed-form inverse is supplied.

    A supplied ``phi_hat`` is checked against F_xz on guarded samples before
    use.
    """
    v_names = tuple(v_names or (f"v{j + 1}" for j in range(spec.m)))
    refs = chain_refs(spec)
    if phi_hat is None:
        return DynamicFeedback(spec, completion, v_names, (None,) * completion.p, (None,) * spec.m)

    phi_hat = dict(phi_hat)
    missing = [str(r) for r in refs if r not in phi_hat]
    if missing:
        raise FeedbackError(f"phi_hat lacks chain coordinates {', '.join(missing)}")
    fb = DynamicFeedback(spec, completion, v_names, (None,) * completion.p, (None,) * spec.m, phi_hat)
    err = inverse_identity_error(fb, samples, seed)
    if not err <= INVERSE_TOL:
        raise FeedbackError(f"phi_hat is not the inverse of F_xz (error {err:.3e})")

    rules = {r: phi_hat[r] for r in refs}
    rules.update({t: Var(v) for t, v in zip(top_refs(spec), v_names)})
    alpha = tuple(substitute(shift_output_by(e, 1), rules) for e in completion.F_z)
    beta = tuple(substitute(e, rules) for e in spec.F_u)
    return replace(fb, alpha=alpha, beta=beta)


def inverse_identity_error(fb: DynamicFeedback, samples: int = 100, seed: int = 42, numeric: bool = False) -> float:
    """max |Phi_hat(F_xz(Y)) - Y| over guarded jets.

    The numeric inverse starts from a perturbed copy of Y.
    """
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for Y in sample_output_jets(fb.spec, samples, seed):
        x, z = fb.forward_map(Y)
        guess = {r: v + 0.05 * rng.standard_normal() for r, v in Y.items()}
        got = fb.invert(x, z, guess, numeric=numeric)
        worst = max(worst, max(abs(got[r] - Y[r]) for r in got))
    return worst


# --------------------------------------------------------------------------
# closed loop


@dataclass
class ClosedLoopTrajectory:
    k_start: int
    x: np.ndarray
    z: np.ndarray
    v: np.ndarray
    u: np.ndarray
    windows: list = field(default_factory=list, repr=False)

    def plant(self) -> Trajectory:
        return Trajectory(self.k_start, self.x, self.u)


def simulate_closed_loop(
    sys: SystemModel,
    fb: DynamicFeedback,
    x0,
    z0,
    v_seq,
    guess: Mapping[VarRef, float] | None = None,
    k_start: int = 0,
) -> ClosedLoopTrajectory:
    """x+ = f(x, beta(x, z, v)), z+ = alpha(x, z, v).

    Numeric inversions are warm-started from the shifted previous window,
    which is exact along closed-loop solutions.
    """
    x = np.asarray(x0, dtype=float)
    z = np.asarray(z0, dtype=float)
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, fb.spec.m)
    xs, zs, us, windows = [x], [z], [], []
    for k, v in enumerate(v_seq):
        try:
            z_next, u, window = fb.evaluate(x, z, v, guess)
        except (ConvergenceError, SingularEvaluation) as exc:
            raise type(exc)(f"closed loop failed at step {k_start + k}: {exc}") from None
        x = sys.step(x, u)
        z = z_next
        xs.append(x)
        zs.append(z)
        us.append(u)
        windows.append(window)
        guess = _shift_window(fb.spec, window) if window is not None else None
    m = fb.spec.m
    return ClosedLoopTrajectory(
        k_start,
        np.array(xs),
        np.array(zs).reshape(len(zs), fb.p),
        v_seq,
        np.array(us).reshape(len(us), m),
        windows,
    )


def _shift_window(spec: FlatSpec, window: Mapping[VarRef, float]) -> dict[VarRef, float]:
    return {r: window[VarRef(r.name, r.shift + 1)] for r in chain_refs(spec)}


def _guarded_input(fb: DynamicFeedback, Y, rng, attempts: int = 1000) -> np.ndarray:
    spec = fb.spec
    tops = top_refs(spec)
    center = spec.output_center(tops)
    c = np.array([center[t] for t in tops])
    guards = _spec_guards(spec)
    rad = spec.system.radius
    for _ in range(attempts):
        v = rng.uniform(c - rad, c + rad)
        if guards_ok(guards, Binding(fb.full_window(Y, v), spec.system.params), GUARD_EPS):
            return v
    raise GuardFailure("no admissible input keeps the window off the guards")


def guarded_input_sequence(fb: DynamicFeedback, Y: Mapping[VarRef, float], steps: int, seed: int) -> np.ndarray:
    """Random bounded inputs v(0..steps-1) whose windows avoid the guards.

    Along the closed loop the chain coordinates only shift, so the windows
    are known in advance from Y and the inputs themselves.
    """
    rng = np.random.default_rng(seed)
    out = []
    Y = dict(Y)
    for _ in range(steps):
        v = _guarded_input(fb, Y, rng)
        out.append(v)
        Y = _shift_window(fb.spec, fb.full_window(Y, v))
    return np.array(out).reshape(steps, fb.spec.m)


@dataclass
class BrunovskyReport:
    passed: bool
    max_residual: float
    chains: tuple[int, ...]
    samples: int
    horizon: int
    seed: int
    failure: dict | None = None

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_residual": self.max_residual,
            "chains": list(self.chains),
            "samples": self.samples,
            "horizon": self.horizon,
            "seed": self.seed,
            "failure": self.failure,
        }


def chain_residual(spec: FlatSpec, before: Mapping[VarRef, float], v, after: Mapping[VarRef, float]) -> float:
    """Deviation of ``after`` from the shift-chain update of ``before`` with tops ``v``."""
    worst = 0.0
    for j, (y, r) in enumerate(zip(spec.output_names, spec.R)):
        for k in range(r):
            want = before[VarRef(y, k + 1)] if k + 1 < r else float(np.ravel(v)[j])
            worst = max(worst, abs(after[VarRef(y, k)] - want))
    return worst


def verify_brunovsky(
    spec: FlatSpec,
    fb: DynamicFeedback,
    samples: int = 20,
    horizon: int = 15,
    seed: int = 42,
    tol: float = BRUNOVSKY_TOL,
) -> BrunovskyReport:
    """Closed-loop runs from guarded jets must behave as pure shift chains.

    At each step the jet is recovered from (x, z) by numeric inversion
    warm-started from the previous jet, independently of how the feedback
    itself is evaluated.
    """
    sys = spec.system
    rng = np.random.default_rng(seed)
    worst = 0.0
    for s, jet in enumerate(sample_output_jets(spec, samples, seed) if horizon > 0 else []):
        Y = {r: jet[r] for r in chain_refs(spec)}
        x, z = fb.forward_map(Y)
        for k in range(horizon):
            v = _guarded_input(fb, Y, rng)
            try:
                z_next, u, _ = fb.evaluate(x, z, v, Y)
                x = sys.step(x, u)
                z = z_next
                Y_next = fb.invert(x, z, _shift_window(spec, fb.full_window(Y, v)), numeric=True)
            except (ConvergenceError, SingularEvaluation) as exc:
                return BrunovskyReport(
                    False, np.inf, spec.R, samples, horizon, seed, {"sample": s, "step": k + 1, "error": str(exc)}
                )
            res = chain_residual(spec, Y, v, Y_next)
            worst = max(worst, res)
            if not res <= tol:
                return BrunovskyReport(
                    False, worst, spec.R, samples, horizon, seed, {"sample": s, "step": k + 1, "residual": res}
                )
            Y = Y_next
    return BrunovskyReport(True, worst, spec.R, samples, horizon, seed)


def deadbeat_inputs(spec: FlatSpec, target: Mapping[VarRef, float], filler) -> np.ndarray:
    """Inputs driving every chain to ``target`` in max(R) steps.

    Chain j only needs its last r_j inputs; earlier entries come from
    ``filler`` (shape (max(R), m)).
    """
    r = spec.r
    v = np.array(filler, dtype=float).reshape(r, spec.m)
    for j, (y, rj) in enumerate(zip(spec.output_names, spec.R)):
        for i in range(rj):
            v[r - rj + i, j] = target[VarRef(y, i)]
    return v


@dataclass
class DeadbeatReport:
    passed: bool
    max_error: float
    targets: int
    steps: int
    seed: int


def verify_deadbeat(
    spec: FlatSpec, fb: DynamicFeedback, targets: int = 10, seed: int = 42, tol: float = BRUNOVSKY_TOL
) -> DeadbeatReport:
    """Reach random chain states in exactly max(R) steps from random starts."""
    rng = np.random.default_rng(seed)
    starts = sample_output_jets(spec, targets, seed)
    goals = sample_output_jets(spec, targets, seed + 1)
    refs = chain_refs(spec)
    worst = 0.0
    for start, goal in zip(starts, goals):
        Y = {r: start[r] for r in refs}
        filler = np.array([_guarded_input(fb, Y, rng) for _ in range(spec.r)])
        v = deadbeat_inputs(spec, goal, filler)
        x0, z0 = fb.forward_map(Y)
        try:
            cl = simulate_closed_loop(spec.system, fb, x0, z0, v, guess=Y)
            final = fb.invert(cl.x[-1], cl.z[-1], {r: goal[r] for r in refs}, numeric=True)
        except (ConvergenceError, SingularEvaluation):
            return DeadbeatReport(False, np.inf, targets, spec.r, seed)
        worst = max(worst, max(abs(final[r] - goal[r]) for r in refs))
    return DeadbeatReport(worst <= tol, worst, targets, spec.r, seed)


def write_closed_loop_csv(path, fb: DynamicFeedback, cl: ClosedLoopTrajectory) -> None:
    sys = fb.system
    header = ["k", *sys.state_names, *fb.completion.names, *fb.v_names, *sys.input_names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(cl.x)):
            row = [str(cl.k_start + i)] + [f"{a + 0.0:.17g}" for a in np.concatenate([cl.x[i], cl.z[i]])]
            if i < len(cl.u):
                row += [f"{a + 0.0:.17g}" for a in np.concatenate([cl.v[i], cl.u[i]])]
            else:
                row += [""] * (len(fb.v_names) + sys.m)
            w.writerow(row)
