"""Discrete-time systems x+ = f(x, u) with an extension output zeta = g(x, u)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import (
    Binding,
    Expr,
    FlatDTError,
    SingularEvaluation,
    VarRef,
    eval_many,
    eval_with_jacobian,
    free_vars,
)
from .numerics import ConvergenceError, damped_newton, numeric_rank

RANK_SAMPLES = 50
EQUILIBRIUM_TOL = 1e-12
INVERSE_TOL = 1e-10
VALID_DEFECT = 1e-8


class ModelError(FlatDTError):
    pass


@dataclass(frozen=True)
class SystemModel:
    """System record.

    ``f`` and ``g`` are expressions in the unshifted states and inputs.
    ``psi`` (optional) holds the n + m expressions of the inverse of
    ``(f, g)``, written in ``x`` (standing for x+) and ``zeta[-1]``.
    """

    name: str
    state_names: tuple[str, ...]
    input_names: tuple[str, ...]
    ext_names: tuple[str, ...]
    f: tuple[Expr, ...]
    g: tuple[Expr, ...]
    x0: np.ndarray
    u0: np.ndarray
    params: dict[str, float] = field(default_factory=dict)
    psi: tuple[Expr, ...] | None = None
    radius: float = 2.0

    def __post_init__(self):
        n, m = len(self.state_names), len(self.input_names)
        if len(self.f) != n:
            raise ModelError(f"expected {n} dynamics equations, got {len(self.f)}")
        if len(self.g) != m or len(self.ext_names) != m:
            raise ModelError(f"expected {m} extension outputs")
        if self.psi is not None and len(self.psi) != n + m:
            raise ModelError(f"inverse needs {n + m} equations, got {len(self.psi)}")
        names = self.state_names + self.input_names + self.ext_names
        if len(set(names)) != len(names):
            raise ModelError("state, input and extension names must be distinct")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(n))
        object.__setattr__(self, "u0", np.asarray(self.u0, dtype=float).reshape(m))
        xu = {VarRef(s) for s in self.state_names + self.input_names}
        for e in self.f + self.g:
            extra = free_vars(e) - xu
            if extra:
                raise ModelError(f"f and g may only use unshifted x and u, found {sorted(map(str, extra))}")
        if self.psi is not None:
            allowed = {VarRef(s) for s in self.state_names} | {VarRef(z, -1) for z in self.ext_names}
            for e in self.psi:
                extra = free_vars(e) - allowed
                if extra:
                    raise ModelError(f"inverse may only use x and zeta[-1], found {sorted(map(str, extra))}")

    @property
    def n(self) -> int:
        return len(self.state_names)

    @property
    def m(self) -> int:
        return len(self.input_names)

    @property
    def xu_refs(self) -> list[VarRef]:
        return [VarRef(s) for s in self.state_names + self.input_names]

    def binding(self, x, u) -> Binding:
        vals = dict(zip(self.xu_refs, map(float, np.concatenate([x, u]))))
        return Binding(vals, self.params)

    def step(self, x, u) -> np.ndarray:
        return eval_many(self.f, self.binding(x, u))

    def extension(self, x, u) -> np.ndarray:
        return eval_many(self.g, self.binding(x, u))

    def psi_eval(self, xplus, zeta) -> tuple[np.ndarray, np.ndarray]:
        vals = {VarRef(s): float(v) for s, v in zip(self.state_names, xplus)}
        vals.update({VarRef(z, -1): float(v) for z, v in zip(self.ext_names, zeta)})
        out = eval_many(self.psi, Binding(vals, self.params))
        return out[: self.n], out[self.n :]

    def equilibrium_values(self, refs) -> dict[VarRef, float]:
        """Jet coordinate values along the constant equilibrium trajectory."""
        zeta0 = self.extension(self.x0, self.u0)
        lookup = dict(zip(self.state_names, self.x0))
        lookup.update(zip(self.input_names, self.u0))
        lookup.update(zip(self.ext_names, zeta0))
        return {VarRef(*r): float(lookup[VarRef(*r).name]) for r in refs}


# --------------------------------------------------------------------------
# validation


@dataclass
class RankCheck:
    name: str
    required: int
    min_rank: int
    passed: bool
    informational: bool = False


@dataclass
class ValidationReport:
    equilibrium_defect: float
    checks: list[RankCheck]
    inverse_residual: float | None
    samples: int
    seed: int

    @property
    def passed(self) -> bool:
        ok = self.equilibrium_defect <= EQUILIBRIUM_TOL
        ok = ok and all(c.passed for c in self.checks if not c.informational)
        if self.inverse_residual is not None:
            ok = ok and self.inverse_residual <= INVERSE_TOL
        return ok

    def check(self, name: str) -> RankCheck:
        return next(c for c in self.checks if c.name == name)


def _sample_xu(sys: SystemModel, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    center = np.concatenate([sys.x0, sys.u0])
    return [center + rng.uniform(-sys.radius, sys.radius, size=center.size) for _ in range(count)]


def validate_system(sys: SystemModel, samples: int = RANK_SAMPLES, seed: int = 42) -> ValidationReport:
    """Check the rank and equilibrium assumptions at the equilibrium and samples.

    rank d_x f is reported but never fails validation.
    """
    n, m = sys.n, sys.m
    try:
        defect = float(np.max(np.abs(sys.step(sys.x0, sys.u0) - sys.x0)))
    except SingularEvaluation:
        defect = np.inf
    if not defect <= EQUILIBRIUM_TOL:
        return ValidationReport(defect, [], None, 0, seed)

    points = [np.concatenate([sys.x0, sys.u0])] + _sample_xu(sys, samples, seed)
    refs = sys.xu_refs
    ranks = {"rank_dxu_f": [], "rank_du_f": [], "rank_dxu_fg": [], "rank_dx_f": []}
    used = 0
    for p in points:
        b = Binding(dict(zip(refs, map(float, p))), sys.params)
        try:
            _, jac = eval_with_jacobian(sys.f + sys.g, refs, b)
        except SingularEvaluation:
            continue
        used += 1
        jf = jac[:n]
        ranks["rank_dxu_f"].append(numeric_rank(jf))
        ranks["rank_du_f"].append(numeric_rank(jf[:, n:]))
        ranks["rank_dxu_fg"].append(numeric_rank(jac))
        ranks["rank_dx_f"].append(numeric_rank(jf[:, :n]))
    required = {"rank_dxu_f": n, "rank_du_f": m, "rank_dxu_fg": n + m, "rank_dx_f": n}
    checks = []
    for name, values in ranks.items():
        lo = min(values) if values else 0
        checks.append(
            RankCheck(name, required[name], lo, lo == required[name], informational=name == "rank_dx_f")
        )

    inverse_residual = None
    if sys.psi is not None:
        inverse_residual = _inverse_residual(sys, points)
    return ValidationReport(defect, checks, inverse_residual, used, seed)


def _inverse_residual(sys: SystemModel, points: Sequence[np.ndarray]) -> float:
    worst = 0.0
    n = sys.n
    for p in points:
        x, u = p[:n], p[n:]
        try:
            # psi o (f, g)
            xp, zeta = sys.step(x, u), sys.extension(x, u)
            xb, ub = sys.psi_eval(xp, zeta)
            worst = max(worst, float(np.max(np.abs(np.concatenate([xb - x, ub - u])))))
            # (f, g) o psi, reading the sample as (x+, zeta)
            xb, ub = sys.psi_eval(x, u)
            back = np.concatenate([sys.step(xb, ub), sys.extension(xb, ub)])
            worst = max(worst, float(np.max(np.abs(back - p))))
        except SingularEvaluation:
            continue
    return worst


# --------------------------------------------------------------------------
# inversion and simulation


def invert_extension(
    sys: SystemModel, xplus, zeta, seed: tuple | None = None, tol: float = INVERSE_TOL, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``f(x, u) = xplus, g(x, u) = zeta`` for ``(x, u)``.

    Uses the symbolic inverse when the model has one, otherwise damped Newton
    started from ``seed`` (default: the equilibrium).
    """
    xplus = np.asarray(xplus, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    if sys.psi is not None:
        return sys.psi_eval(xplus, zeta)
    target = np.concatenate([xplus, zeta])
    if seed is None:
        start = np.concatenate([sys.x0, sys.u0])
    else:
        start = np.concatenate([np.asarray(seed[0], float), np.asarray(seed[1], float)])
    refs = sys.xu_refs

    def fun(p):
        b = Binding(dict(zip(refs, map(float, p))), sys.params)
        val, jac = eval_with_jacobian(sys.f + sys.g, refs, b)
        return val - target, jac

    sol = damped_newton(fun, start, tol=tol, max_iter=max_iter)
    return sol.x[: sys.n], sol.x[sys.n :]


@dataclass
class Trajectory:
    """States and inputs over consecutive steps starting at ``k_start``.

    ``u`` may have one row less than ``x`` (no input at the final state).
    """

    k_start: int
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.u = np.asarray(self.u, dtype=float)
        if self.u.ndim != 2:
            raise ValueError("u must be a 2-d array (steps x inputs)")
        if len(self.u) not in (len(self.x), len(self.x) - 1):
            raise ValueError("u must have as many rows as x, or one less")

    @property
    def steps(self) -> int:
        return len(self.x)

    @property
    def ks(self) -> range:
        return range(self.k_start, self.k_start + len(self.x))

    def defects(self, sys: SystemModel) -> np.ndarray:
        """||x(k+1) - f(x(k), u(k))||_inf for every step with a successor."""
        count = min(len(self.u), len(self.x) - 1)
        return np.array(
            [float(np.max(np.abs(self.x[k + 1] - sys.step(self.x[k], self.u[k])))) for k in range(count)]
        )

    def is_valid(self, sys: SystemModel, tol: float = VALID_DEFECT) -> bool:
        d = self.defects(sys)
        return bool(d.size == 0 or d.max() <= tol)


def simulate_forward(sys: SystemModel, x0, u_seq) -> Trajectory:
    """Iterate the dynamics; errors report the failing step."""
    x = [np.asarray(x0, dtype=float)]
    us = [np.asarray(u, dtype=float) for u in u_seq]
    for k, u in enumerate(us):
        try:
            x.append(sys.step(x[-1], u))
        except SingularEvaluation as exc:
            raise SingularEvaluation(f"step {k}: {exc}", exc.expr) from None
    u_arr = np.array(us).reshape(len(us), sys.m)
    return Trajectory(0, np.array(x), u_arr)


def reconstruct_backward(
    sys: SystemModel, x_k, zeta_past: Sequence, k: int = 0, seed: tuple | None = None
) -> Trajectory:
    """Recover (x(k-j), u(k-j)) from x(k) and zeta(k-1), zeta(k-2), ...

    The returned trajectory starts at ``k - len(zeta_past)`` and ends at the
    input-free state ``x(k)``.
    """
    xs = [np.asarray(x_k, dtype=float)]
    us: list[np.ndarray] = []
    guess = seed
    for depth, zeta in enumerate(zeta_past, start=1):
        try:
            x_prev, u_prev = invert_extension(sys, xs[0], zeta, seed=guess)
        except (ConvergenceError, SingularEvaluation) as exc:
            raise ConvergenceError(f"backward reconstruction failed at depth {depth}: {exc}") from None
        xs.insert(0, x_prev)
        us.insert(0, u_prev)
        guess = (x_prev, u_prev)
    u_arr = np.array(us).reshape(len(us), sys.m)
    return Trajectory(k - len(us), np.array(xs), u_arr)


def write_trajectory_csv(path, sys: SystemModel, traj: Trajectory) -> None:
    """CSV with columns k, states, inputs, defect (17 significant digits)."""
    defects = traj.defects(sys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", *sys.state_names, *sys.input_names, "defect"])
        for i, k in enumerate(traj.ks):
            row = [str(k)] + [f"{v + 0.0:.17g}" for v in traj.x[i]]
            row += [f"{v + 0.0:.17g}" for v in traj.u[i]] if i < len(traj.u) else [""] * sys.m
            row.append(f"{defects[i]:.17g}" if i < len(defects) else "")
            w.writerow(row)
