"""Jet coordinates, shift operators and guarded sampling of jet points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .expr import (
    Binding,
    Expr,
    FlatDTError,
    SingularEvaluation,
    VarRef,
    Var,
    eval_expr,
    free_vars,
    substitute,
)

if TYPE_CHECKING:
    from .system import SystemModel

GUARD_EPS = 1e-3
MAX_ATTEMPTS = 1000


class JetError(FlatDTError):
    """A coordinate lies outside the chart an operator works on."""


class GuardFailure(FlatDTError):
    pass


@dataclass(frozen=True)
class JetChart:
    """An ordered, finite list of jet coordinates."""

    coords: tuple[VarRef, ...]

    def __post_init__(self):
        if len(set(self.coords)) != len(self.coords):
            raise ValueError("jet chart coordinates must be distinct")

    @property
    def dim(self) -> int:
        return len(self.coords)

    def index(self, ref: VarRef) -> int:
        return self.coords.index(ref)

    @classmethod
    def system(cls, sys: "SystemModel", alpha: int, beta: int) -> "JetChart":
        """Chart (zeta[-alpha], ..., zeta[-1], x, u, ..., u[beta])."""
        coords = [VarRef(z, -k) for k in range(alpha, 0, -1) for z in sys.ext_names]
        coords += [VarRef(x, 0) for x in sys.state_names]
        coords += [VarRef(u, k) for k in range(beta + 1) for u in sys.input_names]
        return cls(tuple(coords))

    @classmethod
    def output(cls, names: Sequence[str], windows: Sequence[tuple[int, int]]) -> "JetChart":
        """Chart of y^j[lo_j..hi_j], component by component."""
        return cls(tuple(VarRef(y, k) for y, (lo, hi) in zip(names, windows) for k in range(lo, hi + 1)))

    @classmethod
    def covering(cls, sys: "SystemModel", exprs: Iterable[Expr]) -> "JetChart":
        """Smallest system chart containing every variable of ``exprs``."""
        alpha, beta = system_depths(sys, exprs)
        return cls.system(sys, alpha, beta)


@dataclass(frozen=True)
class JetPoint:
    chart: JetChart
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.chart.dim:
            raise ValueError("jet point length does not match its chart")

    def as_dict(self) -> dict[VarRef, float]:
        return dict(zip(self.chart.coords, map(float, self.values)))

    def binding(self, params: Mapping[str, float] | None = None) -> Binding:
        return Binding(self.as_dict(), dict(params or {}))

    def __getitem__(self, ref) -> float:
        return float(self.values[self.chart.index(VarRef(*ref))])


def system_depths(sys: "SystemModel", exprs: Iterable[Expr]) -> tuple[int, int]:
    """(alpha, beta) needed to hold ``exprs``; raises on foreign coordinates."""
    alpha, beta = 0, 0
    for ref in free_vars(list(exprs)):
        _check_system_coord(sys, ref)
        if ref.name in sys.ext_names:
            alpha = max(alpha, -ref.shift)
        elif ref.name in sys.input_names:
            beta = max(beta, ref.shift)
    return alpha, beta


def _check_system_coord(sys: "SystemModel", ref: VarRef) -> None:
    if ref.name in sys.state_names:
        ok = ref.shift == 0
    elif ref.name in sys.input_names:
        ok = ref.shift >= 0
    elif ref.name in sys.ext_names:
        ok = ref.shift <= -1
    else:
        ok = False
    if not ok:
        raise JetError(f"{ref} is not a system jet coordinate")


def shift_forward(e: Expr, sys: "SystemModel") -> Expr:
    """Forward shift: zeta[-k] -> zeta[-k+1], zeta[-1] -> g, x -> f, u[k] -> u[k+1]."""
    rules: dict[VarRef, Expr] = {}
    for ref in free_vars(e):
        _check_system_coord(sys, ref)
        if ref.name in sys.state_names:
            rules[ref] = sys.f[sys.state_names.index(ref.name)]
        elif ref.name in sys.input_names:
            rules[ref] = Var(ref.name, ref.shift + 1)
        elif ref.shift == -1:
            rules[ref] = sys.g[sys.ext_names.index(ref.name)]
        else:
            rules[ref] = Var(ref.name, ref.shift + 1)
    return substitute(e, rules)


def shift_backward(e: Expr, sys: "SystemModel") -> Expr:
    """Backward shift using the symbolic inverse of the extended map."""
    if sys.psi is None:
        raise JetError(f"system {sys.name!r} has no symbolic inverse; backward shifts are unavailable")
    psi_x, psi_u = sys.psi[: sys.n], sys.psi[sys.n :]
    rules: dict[VarRef, Expr] = {}
    for ref in free_vars(e):
        _check_system_coord(sys, ref)
        if ref.name in sys.state_names:
            rules[ref] = psi_x[sys.state_names.index(ref.name)]
        elif ref.name in sys.input_names:
            if ref.shift == 0:
                rules[ref] = psi_u[sys.input_names.index(ref.name)]
            else:
                rules[ref] = Var(ref.name, ref.shift - 1)
        else:
            rules[ref] = Var(ref.name, ref.shift - 1)
    return substitute(e, rules)


def shift_by(e: Expr, sys: "SystemModel", s: int) -> Expr:
    """``s``-fold forward (s > 0) or backward (s < 0) shift."""
    step = shift_forward if s > 0 else shift_backward
    for _ in range(abs(s)):
        e = step(e, sys)
    return e


def shift_output_by(e: Expr, s: int, names: Iterable[str] | None = None) -> Expr:
    """Re-index y^j[k] -> y^j[k+s]; restricted to ``names`` when given."""
    names = None if names is None else set(names)
    rules = {
        ref: Var(ref.name, ref.shift + s)
        for ref in free_vars(e)
        if names is None or ref.name in names
    }
    return substitute(e, rules)


def guard_values(guards: Sequence[Expr], b: Binding) -> np.ndarray:
    out = np.empty(len(guards))
    for i, g in enumerate(guards):
        try:
            out[i] = eval_expr(g, b)
        except SingularEvaluation:
            out[i] = 0.0
    return out


def guards_ok(guards: Sequence[Expr], b: Binding, eps: float = GUARD_EPS) -> bool:
    return bool(np.all(np.abs(guard_values(guards, b)) > eps))


def sample_jet_points(
    chart: JetChart,
    count: int,
    seed: int,
    guards: Sequence[Expr] = (),
    params: Mapping[str, float] | None = None,
    center: Mapping[VarRef, float] | None = None,
    radius: float = 2.0,
    fixed: Mapping[VarRef, float] | None = None,
    eps: float = GUARD_EPS,
    max_attempts: int = MAX_ATTEMPTS,
) -> list[JetPoint]:
    """Draw ``count`` points uniformly from a box, rejecting guard violations.

    Every coordinate is drawn from ``[c - radius, c + radius]`` with ``c``
    taken from ``center`` (default 0); coordinates in ``fixed`` are not
    drawn.  A point is accepted when ``|g| > eps`` for every guard and all
    guards evaluate.
    """
    rng = np.random.default_rng(seed)
    params = dict(params or {})
    center = center or {}
    fixed = {VarRef(*k): float(v) for k, v in (fixed or {}).items()}
    lo = np.array([center.get(c, 0.0) - radius for c in chart.coords])
    hi = lo + 2 * radius
    free = np.array([c not in fixed for c in chart.coords])
    fixed_vals = np.array([fixed.get(c, 0.0) for c in chart.coords])
    points = []
    for _ in range(count):
        for _attempt in range(max_attempts):
            vals = np.where(free, rng.uniform(lo, hi), fixed_vals)
            point = JetPoint(chart, vals)
            if not guards or guards_ok(guards, point.binding(params), eps):
                points.append(point)
                break
        else:
            raise GuardFailure(
                f"no point satisfying the guards found after {max_attempts} attempts"
            )
    return points


def sample_jet_point(
    chart: JetChart, seed: int, guards: Sequence[Expr] = (), **kwargs
) -> JetPoint:
    return sample_jet_points(chart, 1, seed, guards, **kwargs)[0]
