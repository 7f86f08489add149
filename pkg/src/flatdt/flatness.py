"""Certificates of flatness: a flat output together with its parameterization.

A certificate is checked numerically at random guarded jet points.  A failed
check refutes only the supplied certificate, never flatness itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expr import (
    Binding,
    Expr,
    FlatDTError,
    SingularEvaluation,
    VarRef,
    Var,
    denominators,
    eval_many,
    eval_with_jacobian,
    free_vars,
    substitute,
    to_text,
)
from .jet import (
    JetChart,
    JetPoint,
    sample_jet_points,
    shift_backward,
    shift_by,
    shift_forward,
    shift_output_by,
)
from .numerics import numeric_rank
from .system import SystemModel, ValidationReport, validate_system

IDENTITY_TOL = 1e-9
DEFAULT_SAMPLES = 200
RANK_SAMPLES = 50


class NormalizationError(FlatDTError):
    pass


@dataclass(frozen=True)
class FlatSpec:
    """Candidate flat output ``phi`` with parameterization ``F = (F_x, F_u)``.

    ``phi`` lives on the system jet (zeta[-k], x, u[k]); ``F`` and ``guards``
    live on the output jet y^j[k].  Shift windows, R and the depths q1, q2
    are read off the expressions.
    """

    system: SystemModel
    output_names: tuple[str, ...]
    phi: tuple[Expr, ...]
    F_x: tuple[Expr, ...]
    F_u: tuple[Expr, ...]
    guards: tuple[Expr, ...] = ()

    def __post_init__(self):
        if len(self.phi) != len(self.output_names):
            raise FlatDTError("one flat output expression per output name is required")
        allowed = set(self.output_names)
        for e in self.F + self.guards:
            bad = {r for r in free_vars(e) if r.name not in allowed}
            if bad:
                raise FlatDTError(f"parameterization uses non-output symbols {sorted(map(str, bad))}")

    @property
    def m(self) -> int:
        return len(self.output_names)

    @property
    def F(self) -> tuple[Expr, ...]:
        return tuple(self.F_x) + tuple(self.F_u)

    @property
    def windows(self) -> list[tuple[int, int]]:
        """Per component (lowest, highest) shift of y^j used by F."""
        refs = free_vars(self.F)
        out = []
        for y in self.output_names:
            shifts = [r.shift for r in refs if r.name == y]
            out.append((min(shifts), max(shifts)) if shifts else (0, 0))
        return out

    @property
    def R(self) -> tuple[int, ...]:
        return tuple(hi for _, hi in self.windows)

    @property
    def r(self) -> int:
        return max(self.R)

    @property
    def q1(self) -> tuple[int, ...]:
        ext = set(self.system.ext_names)
        return tuple(
            max([-r.shift for r in free_vars(p) if r.name in ext], default=0) for p in self.phi
        )

    @property
    def q2(self) -> tuple[int, ...]:
        inputs = set(self.system.input_names)
        return tuple(
            max([r.shift for r in free_vars(p) if r.name in inputs], default=0) for p in self.phi
        )

    @property
    def output_chart(self) -> JetChart:
        return JetChart.output(self.output_names, self.windows)

    def output_center(self, refs) -> dict[VarRef, float]:
        """Equilibrium values of the output-jet coordinates ``refs``, for centering samples."""
        sys = self.system
        try:
            b = Binding(sys.equilibrium_values(free_vars(self.phi)), sys.params)
            y0 = dict(zip(self.output_names, eval_many(self.phi, b)))
        except SingularEvaluation:
            y0 = {}
        return {VarRef(*r): float(y0.get(VarRef(*r).name, 0.0)) for r in refs}


# --------------------------------------------------------------------------
# shift table


def build_shift_table(spec: FlatSpec, depth_back: int, depth_fwd: int) -> dict[VarRef, Expr]:
    """Map y^j[i] -> delta^i(phi^j) for i in [-depth_back, depth_fwd].

    Each entry is obtained from its neighbour by one shift and folded.
    """
    sys = spec.system
    table: dict[VarRef, Expr] = {}
    for y, p in zip(spec.output_names, spec.phi):
        table[VarRef(y, 0)] = p
        cur = p
        for i in range(1, depth_fwd + 1):
            cur = shift_forward(cur, sys)
            table[VarRef(y, i)] = cur
        cur = p
        for i in range(1, depth_back + 1):
            cur = shift_backward(cur, sys)
            table[VarRef(y, -i)] = cur
    return dict(sorted(table.items(), key=lambda kv: (spec.output_names.index(kv[0].name), kv[0].shift)))


def _system_center(sys: SystemModel, chart: JetChart) -> dict[VarRef, float]:
    try:
        return sys.equilibrium_values(chart.coords)
    except SingularEvaluation:
        return {}


# --------------------------------------------------------------------------
# checks


@dataclass
class CheckResult:
    check: str
    passed: bool
    max_residual: float | None
    min_rank: int | None
    samples: int
    seed: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "pass": self.passed,
            "max_residual": _json_float(self.max_residual),
            "min_rank": self.min_rank,
            "samples": self.samples,
            "seed": self.seed,
            **self.detail,
        }


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _xu_refs(sys: SystemModel) -> list[VarRef]:
    return sys.xu_refs


def composed_guards(spec: FlatSpec, table: dict[VarRef, Expr]) -> list[Expr]:
    """Guards of F pulled back to the system jet, plus the table's own denominators."""
    out: list[Expr] = []
    for h in list(spec.guards) + denominators(spec.F):
        if free_vars(h) <= set(table):
            g = substitute(h, table)
            if g not in out:
                out.append(g)
    for d in denominators(list(table.values())):
        if d not in out:
            out.append(d)
    return out


def identity_setup(spec: FlatSpec) -> tuple[dict[VarRef, Expr], JetChart, list[Expr]]:
    """Shift table covering F's windows, its system chart, and pulled-back guards."""
    lo = min(w[0] for w in spec.windows)
    hi = max(w[1] for w in spec.windows)
    table = build_shift_table(spec, max(0, -lo), max(0, hi))
    sys = spec.system
    chart = JetChart.covering(sys, list(table.values()) + [Var(s) for s in sys.state_names + sys.input_names])
    return table, chart, composed_guards(spec, table)


def verify_parameterization_identity(
    spec: FlatSpec, samples: int = DEFAULT_SAMPLES, seed: int = 42, tol: float = IDENTITY_TOL
) -> CheckResult:
    """Check x = F_x(phi, ..., delta^r phi) and u = F_u(...) at random jet points."""
    sys = spec.system
    name = "parameterization_identity"
    if len(spec.F_x) != sys.n or len(spec.F_u) != sys.m:
        return CheckResult(name, False, np.inf, None, 0, seed, {"error": "F has the wrong number of rows"})
    table, chart, guards = identity_setup(spec)
    points = sample_jet_points(
        chart, samples, seed, guards, params=sys.params, center=_system_center(sys, chart), radius=sys.radius
    )
    keys = list(table)
    worst = 0.0
    for pt in points:
        b = pt.binding(sys.params)
        y_vals = eval_many([table[k] for k in keys], b)
        fb = Binding(dict(zip(keys, y_vals)), sys.params)
        xu = eval_many(spec.F, fb)
        truth = np.array([pt[r] for r in _xu_refs(sys)])
        worst = max(worst, float(np.max(np.abs(xu - truth))))
    return CheckResult(name, worst <= tol, worst, None, len(points), seed)


def verify_system_compatibility(
    spec: FlatSpec, samples: int = DEFAULT_SAMPLES, seed: int = 42, tol: float = IDENTITY_TOL
) -> CheckResult:
    """Check delta_y(F_x) = f(F_x, F_u) at random output-jet points."""
    sys = spec.system
    name = "system_compatibility"
    if len(spec.F_x) != sys.n or len(spec.F_u) != sys.m:
        return CheckResult(name, False, np.inf, None, 0, seed, {"error": "F has the wrong number of rows"})
    shifted = [shift_output_by(e, 1, spec.output_names) for e in spec.F_x]
    base_guards = list(spec.guards) + denominators(spec.F)
    guards = base_guards + [shift_output_by(g, 1, spec.output_names) for g in base_guards]
    guards += [d for d in denominators(shifted) if d not in guards]
    refs = sorted(free_vars(list(spec.F) + shifted), key=lambda r: (spec.output_names.index(r.name), r.shift))
    chart = JetChart(tuple(refs))
    guards = [g for g in guards if free_vars(g) <= set(refs)]
    points = sample_jet_points(
        chart, samples, seed, guards, params=sys.params, center=spec.output_center(chart.coords), radius=sys.radius
    )
    worst = 0.0
    for pt in points:
        b = pt.binding(sys.params)
        vals = eval_many(spec.F, b)
        lhs = eval_many(shifted, b)
        rhs = sys.step(vals[: sys.n], vals[sys.n :])
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return CheckResult(name, worst <= tol, worst, None, len(points), seed)


def default_depths(spec: FlatSpec) -> tuple[int, int]:
    return max(spec.q1) + 1, spec.r + 1


def verify_independence_ranks(
    spec: FlatSpec,
    alpha: int | None = None,
    beta: int | None = None,
    samples: int = RANK_SAMPLES,
    seed: int = 42,
) -> CheckResult:
    """Rank of d(delta^i phi), i in [-alpha, beta], must be (alpha + beta + 1) m."""
    da, db = default_depths(spec)
    alpha = da if alpha is None else alpha
    beta = db if beta is None else beta
    sys = spec.system
    table = build_shift_table(spec, alpha, beta)
    exprs = list(table.values())
    chart = JetChart.covering(sys, exprs)
    guards = denominators(exprs)
    points = sample_jet_points(
        chart, samples, seed, guards, params=sys.params, center=_system_center(sys, chart), radius=sys.radius
    )
    required = (alpha + beta + 1) * spec.m
    ranks = [numeric_rank(eval_with_jacobian(exprs, chart.coords, p.binding(sys.params))[1]) for p in points]
    lo = min(ranks) if ranks else 0
    return CheckResult(
        "independence_ranks", lo == required, None, lo, len(points), seed,
        {"alpha": alpha, "beta": beta, "required_rank": required},
    )


def verify_submersion_and_structure(
    spec: FlatSpec, samples: int = DEFAULT_SAMPLES, seed: int = 42
) -> CheckResult:
    """F must have rank n + m on the output jet, and F_x must avoid every y^j[r_j]."""
    sys = spec.system
    chart = spec.output_chart
    guards = [g for g in list(spec.guards) + denominators(spec.F) if free_vars(g) <= set(chart.coords)]
    points = sample_jet_points(
        chart, samples, seed, guards, params=sys.params, center=spec.output_center(chart.coords), radius=sys.radius
    )
    ranks = [numeric_rank(eval_with_jacobian(spec.F, chart.coords, p.binding(sys.params))[1]) for p in points]
    lo = min(ranks) if ranks else 0
    top = {VarRef(y, hi) for y, (_, hi) in zip(spec.output_names, spec.windows)}
    offending = sorted(str(r) for r in free_vars(spec.F_x) & top)
    required = sys.n + sys.m
    return CheckResult(
        "submersion_and_structure", lo == required and not offending, None, lo, len(points), seed,
        {"required_rank": required, "F_x_top_shifts": offending},
    )


# --------------------------------------------------------------------------
# classification and normalization


def classify_flat_output(spec: FlatSpec) -> str:
    ext = set(spec.system.ext_names)
    if any(r.name in ext for r in free_vars(spec.phi)):
        return "general_flat_form"
    return "forward_flat_form"


def normalize_to_forward(spec: FlatSpec, offsets: Sequence[int]) -> FlatSpec:
    """Replace phi^j by delta^{s_j}(phi^j) and re-index F accordingly.

    The old y^j[k] equals the new y^j[k - s_j].  A component shifted forward
    that still depends on past zeta is rejected.
    """
    if len(offsets) != spec.m:
        raise NormalizationError("one offset per flat output component is required")
    ext = set(spec.system.ext_names)
    phi = []
    for y, p, s in zip(spec.output_names, spec.phi, offsets):
        new = shift_by(p, spec.system, s)
        if s > 0 and any(r.name in ext for r in free_vars(new)):
            raise NormalizationError(
                f"component {y} still depends on past extension outputs after {s} forward shifts: {to_text(new)}"
            )
        phi.append(new)
    shift_of = dict(zip(spec.output_names, offsets))

    def reindex(e: Expr) -> Expr:
        rules = {r: Var(r.name, r.shift - shift_of[r.name]) for r in free_vars(e) if r.name in shift_of}
        return substitute(e, rules)

    return FlatSpec(
        spec.system,
        spec.output_names,
        tuple(phi),
        tuple(map(reindex, spec.F_x)),
        tuple(map(reindex, spec.F_u)),
        tuple(map(reindex, spec.guards)),
    )


# --------------------------------------------------------------------------
# full certification


@dataclass
class VerifyConfig:
    samples: int = DEFAULT_SAMPLES
    rank_samples: int = RANK_SAMPLES
    seed: int = 42
    tol: float = IDENTITY_TOL
    alpha: int | None = None
    beta: int | None = None


def _system_check(report: ValidationReport) -> CheckResult:
    fails = [c.name for c in report.checks if not c.passed and not c.informational]
    detail = {
        "equilibrium_defect": _json_float(report.equilibrium_defect),
        "ranks": {c.name: {"min": c.min_rank, "required": c.required, "informational": c.informational}
                  for c in report.checks},
        "failed": fails,
    }
    residual = report.inverse_residual if report.inverse_residual is not None else report.equilibrium_defect
    min_rank = report.check("rank_dxu_fg").min_rank if report.checks else None
    return CheckResult("system_validation", report.passed, residual, min_rank, report.samples, report.seed, detail)


@dataclass
class FlatnessReport:
    name: str
    checks: list[CheckResult]
    info: dict

    @property
    def certified(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        return next(c for c in self.checks if c.check == name)

    def to_dict(self) -> dict:
        return {
            "system": self.name,
            "certified": self.certified,
            "checks": [c.to_dict() for c in self.checks],
            "info": self.info,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def certify(spec: FlatSpec, config: VerifyConfig | None = None) -> FlatnessReport:
    """Run system validation and the four certificate checks."""
    cfg = config or VerifyConfig()
    sys = spec.system
    validation = validate_system(sys, seed=cfg.seed)
    checks = [_system_check(validation)]
    if validation.checks:
        checks += [
            verify_parameterization_identity(spec, cfg.samples, cfg.seed, cfg.tol),
            verify_system_compatibility(spec, cfg.samples, cfg.seed, cfg.tol),
            verify_independence_ranks(spec, cfg.alpha, cfg.beta, cfg.rank_samples, cfg.seed),
            verify_submersion_and_structure(spec, cfg.samples, cfg.seed),
        ]
    rank_dx = validation.check("rank_dx_f").min_rank if validation.checks else None
    info = {
        "classification": classify_flat_output(spec),
        "R": list(spec.R),
        "windows": [list(w) for w in spec.windows],
        "q1": list(spec.q1),
        "q2": list(spec.q2),
        "rank_dx_f": rank_dx,
        "n": sys.n,
        "singular_locus": [to_text(g) for g in list(spec.guards) + [
            d for d in denominators(spec.F) if d not in spec.guards]],
    }
    if rank_dx is not None and rank_dx < sys.n:
        info["note"] = f"rank d_x f = {rank_dx} < n = {sys.n}: g = u cannot complete f to a diffeomorphism"
    return FlatnessReport(sys.name, checks, info)
