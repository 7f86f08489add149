"""Point-to-point planning through the flat output."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .expr import Binding, FlatDTError, SingularEvaluation, Var, VarRef, denominators, eval_many, eval_with_jacobian
from .flatness import FlatSpec, build_shift_table, composed_guards
from .jet import GUARD_EPS, GuardFailure, JetChart, guard_values, sample_jet_points
from .numerics import ConvergenceError, gauss_newton
from .system import SystemModel, Trajectory, VALID_DEFECT, simulate_forward

BOUNDARY_WEIGHT = 1e6
BOUNDARY_TOL = 1e-8


class PlanningError(FlatDTError):
    pass


@dataclass
class PlanningProblem:
    """Connect (x_i, u_i) at step k_i with (x_f, u_f) at step k_f.

    ``nominal`` optionally fixes the profile that free flat-output values are
    pulled toward; it has one row per step of the output trajectory.
    """

    spec: FlatSpec
    x_i: np.ndarray
    u_i: np.ndarray
    x_f: np.ndarray
    u_f: np.ndarray
    k_i: int = 0
    k_f: int = 0
    nominal: np.ndarray | None = None

    def __post_init__(self):
        for name in ("x_i", "u_i", "x_f", "u_f"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.k_f - self.k_i <= self.spec.r:
            raise PlanningError(
                f"horizon too short: need k_f - k_i > r = {self.spec.r}, got {self.k_f - self.k_i}"
            )

    @property
    def lo(self) -> int:
        return min(0, min(w[0] for w in self.spec.windows))

    @property
    def k_range(self) -> range:
        """Steps at which y is an unknown."""
        return range(self.k_i + self.lo, self.k_f + self.spec.r + 1)


@dataclass
class OutputTrajectory:
    k_start: int
    y: np.ndarray
    guard_margin: float = np.inf
    iterations: int = 0
    detail: dict = field(default_factory=dict)

    @property
    def ks(self) -> range:
        return range(self.k_start, self.k_start + len(self.y))


class _WindowMap:
    """Evaluates F on the window of y that starts at a given step."""

    def __init__(self, spec: FlatSpec, k_start: int):
        self.spec = spec
        self.k_start = k_start
        self.refs = [VarRef(y, s) for y, (lo, hi) in zip(spec.output_names, spec.windows) for s in range(lo, hi + 1)]
        self.guards = list(spec.guards) + [d for d in denominators(spec.F) if d not in spec.guards]

    def columns(self, k: int) -> list[int]:
        """Flat indices into y (steps x m) of the window coordinates at step k."""
        m = self.spec.m
        out = []
        for ref in self.refs:
            j = self.spec.output_names.index(ref.name)
            out.append((k + ref.shift - self.k_start) * m + j)
        return out

    def binding(self, y_flat: np.ndarray, k: int) -> Binding:
        cols = self.columns(k)
        return Binding(dict(zip(self.refs, map(float, y_flat[cols]))), self.spec.system.params)

    def evaluate(self, y_flat: np.ndarray, k: int) -> np.ndarray:
        return eval_many(self.spec.F, self.binding(y_flat, k))

    def evaluate_with_jacobian(self, y_flat: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
        val, jac = eval_with_jacobian(self.spec.F, self.refs, self.binding(y_flat, k))
        return val, jac, self.columns(k)

    def margin(self, y_flat: np.ndarray, k: int) -> float:
        if not self.guards:
            return np.inf
        return float(np.min(np.abs(guard_values(self.guards, self.binding(y_flat, k)))))


def boundary_window(spec: FlatSpec, x, u, seed: int, lo: int, hi: int) -> np.ndarray:
    """Exact flat-output values y(k+lo..k+hi) for a trajectory through (x, u) at k.

    The past extension outputs and future inputs that the flat output needs
    are drawn at random (seeded), subject to the pulled-back guards.
    """
    sys = spec.system
    table = build_shift_table(spec, max(0, -lo), max(0, hi))
    chart = JetChart.covering(sys, list(table.values()) + [Var(s) for s in sys.state_names + sys.input_names])
    fixed = {VarRef(s): float(v) for s, v in zip(sys.state_names, x)}
    fixed.update({VarRef(s): float(v) for s, v in zip(sys.input_names, u)})
    point = sample_jet_points(
        chart,
        1,
        seed,
        composed_guards(spec, table),
        params=sys.params,
        center=sys.equilibrium_values(chart.coords),
        radius=sys.radius,
        fixed=fixed,
    )[0]
    b = point.binding(sys.params)
    out = np.empty((hi - lo + 1, spec.m))
    for j, y in enumerate(spec.output_names):
        out[:, j] = eval_many([table[VarRef(y, t)] for t in range(lo, hi + 1)], b)
    return out


def plan_trajectory(
    p: PlanningProblem,
    seed: int = 42,
    weight: float = BOUNDARY_WEIGHT,
    max_iter: int = 200,
    max_reseeds: int = 100,
) -> OutputTrajectory:
    """Find y(k) meeting both boundary conditions through F.

    Minimizes ``weight^2 |boundary residual|^2 + |y - nominal|^2`` by damped
    Gauss-Newton.  The default nominal is exact on both boundary windows and
    linear in between; if a window in between hits a guard, the interior is
    perturbed with seeded noise and the attempt repeated.
    """
    spec = p.spec
    sys = spec.system
    m, r, lo = spec.m, spec.r, p.lo
    ks = p.k_range
    n_steps = len(ks)
    wm = _WindowMap(spec, ks.start)
    rng = np.random.default_rng(seed)
    target_i = np.concatenate([p.x_i, p.u_i])
    target_f = np.concatenate([p.x_f, p.u_f])

    start_i = boundary_window(spec, p.x_i, p.u_i, seed, lo, r)
    start_f = boundary_window(spec, p.x_f, p.u_f, seed + 1, lo, r)
    base = np.empty((n_steps, m))
    i0 = p.k_i + lo - ks.start
    f0 = p.k_f + lo - ks.start
    base[i0 : i0 + len(start_i)] = start_i
    base[f0 : f0 + len(start_f)] = start_f
    a, b = i0 + len(start_i) - 1, f0
    for t in range(a + 1, b):
        w = (t - a) / (b - a)
        base[t] = (1 - w) * base[a] + w * base[b]
    interior = np.arange(a + 1, b)

    windows = range(p.k_i, p.k_f + 1)
    guess = base.copy()
    for attempt in range(max_reseeds + 1):
        flat = guess.ravel()
        try:
            if min(wm.margin(flat, k) for k in windows) > GUARD_EPS:
                break
        except SingularEvaluation:
            pass
        guess = base.copy()
        guess[interior] += rng.uniform(-1.0, 1.0, size=(len(interior), m)) * sys.radius / 2
    else:
        raise GuardFailure("could not find a guard-free interior for the nominal profile")

    nominal = guess.ravel() if p.nominal is None else np.asarray(p.nominal, dtype=float).reshape(n_steps * m)

    def residual(y_flat):
        vi, ji, ci = wm.evaluate_with_jacobian(y_flat, p.k_i)
        vf, jf, cf = wm.evaluate_with_jacobian(y_flat, p.k_f)
        nb = len(target_i)
        res = np.concatenate([weight * (vi - target_i), weight * (vf - target_f), y_flat - nominal])
        jac = np.zeros((2 * nb + len(y_flat), len(y_flat)))
        for col, c in enumerate(ci):
            jac[:nb, c] += weight * ji[:, col]
        for col, c in enumerate(cf):
            jac[nb : 2 * nb, c] += weight * jf[:, col]
        jac[2 * nb :, :] = np.eye(len(y_flat))
        return res, jac

    try:
        sol = gauss_newton(residual, guess.ravel(), max_iter=max_iter)
    except ConvergenceError as exc:
        raise ConvergenceError(f"planner: {exc}") from None
    y = sol.x.reshape(n_steps, m)
    flat = sol.x
    bres = max(
        float(np.max(np.abs(wm.evaluate(flat, p.k_i) - target_i))),
        float(np.max(np.abs(wm.evaluate(flat, p.k_f) - target_f))),
    )
    if bres > BOUNDARY_TOL:
        raise ConvergenceError(f"planner: boundary residual {bres:.3e} exceeds {BOUNDARY_TOL:g}")
    margins = []
    for k in windows:
        mk = wm.margin(flat, k)
        if mk <= GUARD_EPS:
            raise GuardFailure(f"guard violated on the window starting at k = {k} (margin {mk:.3e})")
        margins.append(mk)
    return OutputTrajectory(
        ks.start, y, min(margins), sol.iterations, {"boundary_residual": bres, "attempts": attempt + 1}
    )


def synthesize_xu(spec: FlatSpec, y: OutputTrajectory, k_i: int | None = None, k_f: int | None = None) -> Trajectory:
    """(x(k), u(k)) = F(window of y at k) for every complete window."""
    lo = min(0, min(w[0] for w in spec.windows))
    if k_i is None:
        k_i = y.k_start - lo
    if k_f is None:
        k_f = y.k_start + len(y.y) - 1 - spec.r
    wm = _WindowMap(spec, y.k_start)
    flat = y.y.ravel()
    n = spec.system.n
    xs, us = [], []
    for k in range(k_i, k_f + 1):
        try:
            v = wm.evaluate(flat, k)
        except SingularEvaluation as exc:
            raise SingularEvaluation(f"window k = {k}: {exc}", exc.expr) from None
        xs.append(v[:n])
        us.append(v[n:])
    return Trajectory(k_i, np.array(xs), np.array(us).reshape(len(us), spec.system.m))


@dataclass
class TrajectoryReport:
    max_defect: float
    simulation_error: float
    boundary_residual: float
    defects: np.ndarray

    @property
    def passed(self) -> bool:
        return (
            self.max_defect <= VALID_DEFECT
            and self.simulation_error <= VALID_DEFECT
            and self.boundary_residual <= BOUNDARY_TOL
        )


def validate_trajectory(sys: SystemModel, t: Trajectory, boundary: PlanningProblem | None = None) -> TrajectoryReport:
    """Dynamics defects, an open-loop re-simulation, and the boundary pairs."""
    defects = t.defects(sys)
    max_defect = float(defects.max()) if defects.size else 0.0
    n_in = min(len(t.u), len(t.x) - 1)
    sim = simulate_forward(sys, t.x[0], t.u[:n_in])
    sim_err = float(np.max(np.abs(sim.x - t.x[: n_in + 1])))
    bres = 0.0
    if boundary is not None:
        first = boundary.k_i - t.k_start
        last = boundary.k_f - t.k_start
        parts = [t.x[first] - boundary.x_i, t.x[last] - boundary.x_f, t.u[first] - boundary.u_i]
        if last < len(t.u):
            parts.append(t.u[last] - boundary.u_f)
        bres = float(np.max(np.abs(np.concatenate(parts))))
    return TrajectoryReport(max_defect, sim_err, bres, defects)


def write_output_csv(path, spec: FlatSpec, y: OutputTrajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", *spec.output_names])
        for k, row in zip(y.ks, y.y):
            w.writerow([str(k)] + [f"{v + 0.0:.17g}" for v in row])
