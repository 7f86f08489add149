"""Reader for ``.fdt`` model files.

A model file is a sequence of sections in fixed order::

    system NAME
    params            (optional)  name = value
    states  a, b, ...
    inputs  a, b, ...
    ext_outputs a, b, ...
    dynamics          one equation per state
    ext_map           one equation per extension output
    inverse           (optional)  one equation per state and input
    equilibrium       name = value for every state and input
    flat_output       one equation per flat output component
    parameterization  one equation per state and input
    guards            (optional)  one expression per line
    state_completion  (optional)  compensator state = output-jet expression
    phi_hat           (optional)  y[k] = expression in states and compensator

Equations are ``lhs = expr``; ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import Expr, ParseError, Var, VarRef, free_vars, parse_expr
from .flatness import FlatSpec
from .system import SystemModel

SECTIONS = (
    "system",
    "params",
    "states",
    "inputs",
    "ext_outputs",
    "dynamics",
    "ext_map",
    "inverse",
    "equilibrium",
    "flat_output",
    "parameterization",
    "guards",
    "state_completion",
    "phi_hat",
)
OPTIONAL = {"params", "inverse", "guards", "state_completion", "phi_hat"}
INLINE = {"system", "states", "inputs", "ext_outputs"}


class ModelParseError(ParseError):
    pass


@dataclass
class _Line:
    text: str
    line: int
    column: int


@dataclass
class ModelFile:
    system: SystemModel
    spec: FlatSpec
    completion_names: tuple[str, ...] = ()
    completion: tuple[Expr, ...] = ()
    phi_hat: dict[VarRef, Expr] | None = None
    input_names_v: tuple[str, ...] = ()
    source: str = "<string>"
    text: str = field(default="", repr=False)


def _split_sections(text: str) -> dict[str, tuple[_Line, list[_Line]]]:
    sections: dict[str, tuple[_Line, list[_Line]]] = {}
    current = None
    last_index = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].rstrip()
        if not body.strip():
            continue
        indent = len(body) - len(body.lstrip())
        stripped = body.strip()
        head, _, rest = stripped.partition(" ")
        if head in SECTIONS and "=" not in stripped.split(None, 1)[0]:
            idx = SECTIONS.index(head)
            if head in sections:
                raise ModelParseError(f"duplicate section {head!r}", lineno, indent + 1)
            if idx < last_index:
                raise ModelParseError(
                    f"section {head!r} out of order (expected order: {', '.join(SECTIONS)})", lineno, indent + 1
                )
            last_index = idx
            inline = _Line(rest.strip(), lineno, indent + len(head) + 2)
            sections[head] = (inline, [])
            current = head
            continue
        if current is None:
            raise ModelParseError("content before the first section", lineno, indent + 1)
        sections[current][1].append(_Line(stripped, lineno, indent + 1))
    for name in SECTIONS:
        if name not in sections and name not in OPTIONAL:
            raise ModelParseError(f"missing section {name!r}", 1, 1)
    return sections


def _names(entry: tuple[_Line, list[_Line]], what: str) -> tuple[str, ...]:
    inline, lines = entry
    parts = " ".join([inline.text] + [l.text for l in lines]).replace(",", " ").split()
    if not parts:
        raise ModelParseError(f"no {what} declared", inline.line, inline.column)
    for p in parts:
        if not p[0].isalpha() or not p.replace("_", "a").isalnum():
            raise ModelParseError(f"invalid name {p!r}", inline.line, inline.column)
    return tuple(parts)


def _expr(line: _Line, text: str, offset: int, params) -> Expr:
    try:
        return parse_expr(text, params)
    except ParseError as exc:
        column = line.column + offset + exc.column - 1 if exc.line == 1 else exc.column
        raise ModelParseError(exc.message, line.line + exc.line - 1, column) from None


def _equations(lines: list[_Line], params) -> list[tuple[_Line, Expr, Expr]]:
    out = []
    for l in lines:
        lhs, eq, rhs = l.text.partition("=")
        if not eq:
            raise ModelParseError("expected an equation 'lhs = expr'", l.line, l.column)
        left = _expr(l, lhs, 0, ())
        right = _expr(l, rhs, len(lhs) + 1, params)
        out.append((l, left, right))
    return out


def _lhs_var(l: _Line, e: Expr, allow_shift: bool = False) -> VarRef:
    if not isinstance(e, Var) or (e.shift != 0 and not allow_shift):
        raise ModelParseError("left-hand side must be a plain name", l.line, l.column)
    return e.ref


def _ordered(eqs, names: tuple[str, ...], what: str, line: _Line) -> tuple[Expr, ...]:
    by_name: dict[str, Expr] = {}
    for l, lhs, rhs in eqs:
        ref = _lhs_var(l, lhs)
        if ref.name not in names:
            raise ModelParseError(f"{ref.name!r} is not a declared {what}", l.line, l.column)
        if ref.name in by_name:
            raise ModelParseError(f"duplicate equation for {ref.name!r}", l.line, l.column)
        by_name[ref.name] = rhs
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ModelParseError(f"missing equations for {', '.join(missing)}", line.line, line.column)
    return tuple(by_name[n] for n in names)


def _check_symbols(exprs, allowed, l: _Line, what: str) -> None:
    for e in exprs:
        for ref in free_vars(e):
            if not allowed(ref):
                raise ModelParseError(f"symbol {ref} is not allowed in {what}", l.line, l.column)


def parse_model(text: str, source: str = "<string>") -> ModelFile:
    sec = _split_sections(text)
    name = sec["system"][0].text or "unnamed"

    params: dict[str, float] = {}
    if "params" in sec:
        for l in sec["params"][1]:
            key, eq, val = l.text.partition("=")
            key = key.strip()
            if not eq or not key.isidentifier():
                raise ModelParseError("expected 'name = value'", l.line, l.column)
            try:
                params[key] = float(val)
            except ValueError:
                raise ModelParseError(f"parameter {key!r} needs a numeric value", l.line, l.column) from None
    pnames = tuple(params)

    states = _names(sec["states"], "states")
    inputs = _names(sec["inputs"], "inputs")
    exts = _names(sec["ext_outputs"], "extension outputs")
    if len(exts) != len(inputs):
        l = sec["ext_outputs"][0]
        raise ModelParseError("one extension output per input is required", l.line, l.column)
    declared = states + inputs + exts + pnames
    if len(set(declared)) != len(declared):
        l = sec["states"][0]
        raise ModelParseError("declared names must be distinct", l.line, l.column)

    xu = set(states) | set(inputs)

    def head(s):
        return sec[s][0]

    dyn = _equations(sec["dynamics"][1], pnames)
    f = _ordered(dyn, states, "state", head("dynamics"))
    _check_symbols(f, lambda r: r.name in xu and r.shift == 0, head("dynamics"), "dynamics")
    ext = _equations(sec["ext_map"][1], pnames)
    g = _ordered(ext, exts, "extension output", head("ext_map"))
    _check_symbols(g, lambda r: r.name in xu and r.shift == 0, head("ext_map"), "ext_map")

    psi = None
    if "inverse" in sec:
        inv = _equations(sec["inverse"][1], pnames)
        psi = _ordered(inv, states + inputs, "state or input", head("inverse"))
        _check_symbols(
            psi,
            lambda r: (r.name in states and r.shift == 0) or (r.name in exts and r.shift == -1),
            head("inverse"),
            "inverse",
        )

    eq_lines = sec["equilibrium"][1]
    eq_vals: dict[str, float] = {}
    for l in eq_lines:
        key, eq, val = l.text.partition("=")
        key = key.strip()
        if not eq or key not in xu:
            raise ModelParseError("expected 'state_or_input = value'", l.line, l.column)
        try:
            eq_vals[key] = float(val)
        except ValueError:
            raise ModelParseError(f"equilibrium value for {key!r} must be numeric", l.line, l.column) from None
    missing = [n for n in states + inputs if n not in eq_vals]
    if missing:
        l = head("equilibrium")
        raise ModelParseError(f"equilibrium missing {', '.join(missing)}", l.line, l.column)

    system = SystemModel(
        name,
        states,
        inputs,
        exts,
        f,
        g,
        np.array([eq_vals[s] for s in states]),
        np.array([eq_vals[u] for u in inputs]),
        params,
        psi,
    )

    flat = _equations(sec["flat_output"][1], pnames)
    ynames = tuple(_lhs_var(l, lhs).name for l, lhs, _ in flat)
    if len(ynames) != len(inputs) or len(set(ynames)) != len(ynames):
        l = head("flat_output")
        raise ModelParseError(f"exactly {len(inputs)} distinct flat output components are required", l.line, l.column)
    if set(ynames) & set(declared):
        l = head("flat_output")
        raise ModelParseError("flat output names clash with declared names", l.line, l.column)
    phi = tuple(rhs for _, _, rhs in flat)

    def system_coord(r: VarRef) -> bool:
        if r.name in states:
            return r.shift == 0
        if r.name in inputs:
            return r.shift >= 0
        return r.name in exts and r.shift <= -1

    _check_symbols(phi, system_coord, head("flat_output"), "flat_output")

    par = _equations(sec["parameterization"][1], pnames)
    F = _ordered(par, states + inputs, "state or input", head("parameterization"))
    _check_symbols(F, lambda r: r.name in ynames, head("parameterization"), "parameterization")

    guards: list[Expr] = []
    for l in sec.get("guards", (None, []))[1]:
        g_expr = _expr(l, l.text, 0, pnames)
        _check_symbols([g_expr], lambda r: r.name in ynames, l, "guards")
        guards.append(g_expr)

    spec = FlatSpec(system, ynames, phi, F[: len(states)], F[len(states) :], tuple(guards))

    vnames = tuple(f"v{j + 1}" for j in range(len(inputs)))
    comp_names: tuple[str, ...] = ()
    completion: tuple[Expr, ...] = ()
    if "state_completion" in sec:
        comp = _equations(sec["state_completion"][1], pnames)
        comp_names = tuple(_lhs_var(l, lhs).name for l, lhs, _ in comp)
        clash = set(comp_names) & (set(declared) | set(ynames) | set(vnames))
        if clash or len(set(comp_names)) != len(comp_names):
            l = head("state_completion")
            raise ModelParseError(f"compensator names must be new and distinct: {sorted(clash)}", l.line, l.column)
        completion = tuple(rhs for _, _, rhs in comp)
        _check_symbols(completion, lambda r: r.name in ynames, head("state_completion"), "state_completion")

    phi_hat = None
    if "phi_hat" in sec:
        if not comp_names and sum(spec.R) != len(states):
            l = head("phi_hat")
            raise ModelParseError("phi_hat needs a state_completion section", l.line, l.column)
        phi_hat = {}
        for l, lhs, rhs in _equations(sec["phi_hat"][1], pnames):
            ref = _lhs_var(l, lhs, allow_shift=True)
            if ref.name not in ynames:
                raise ModelParseError(f"{ref} is not an output-jet coordinate", l.line, l.column)
            _check_symbols([rhs], lambda r: (r.name in states or r.name in comp_names) and r.shift == 0, l, "phi_hat")
            phi_hat[ref] = rhs

    return ModelFile(system, spec, comp_names, completion, phi_hat, vnames, source, text)


def load_model(path) -> ModelFile:
    path = Path(path)
    return parse_model(path.read_text(), str(path))
