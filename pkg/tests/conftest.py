from pathlib import Path

import numpy as np
import pytest
import sympy

from flatdt.expr import Binding, Var, VarRef, eval_many, to_text
from flatdt.jet import JetChart, sample_jet_points, shift_backward, shift_by, shift_forward
from flatdt.modelfile import load_model

MODELS = Path(__file__).resolve().parent.parent / "models"


def bind(values=None, params=None) -> Binding:
    """Binding from ``{"x1": 2, ("z1", -1): 3}``-style dictionaries."""
    out = {}
    for k, v in (values or {}).items():
        out[VarRef(k) if isinstance(k, str) else VarRef(*k)] = float(v)
    return Binding(out, dict(params or {}))


@pytest.fixture(scope="session")
def product():
    return load_model(MODELS / "product.fdt")


@pytest.fixture(scope="session")
def brocket():
    return load_model(MODELS / "brocket.fdt")


@pytest.fixture(scope="session", params=["product", "brocket"])
def example(request):
    return load_model(MODELS / f"{request.param}.fdt")


MUTATIONS = {
    "x2_numerator": ("x2 = T*(y2 - y2[1])/", "x2 = (T*(y2 - y2[1]) + 0.01)/"),
    "u1_zero": ("u1 = (y1[2] - y1[1])/T", "u1 = 0"),
}


def mutated_text(name: str, mutation: str) -> str:
    text = (MODELS / f"{name}.fdt").read_text()
    old, new = MUTATIONS[mutation]
    assert old in text
    return text.replace(old, new)


def sym(e) -> sympy.Expr:
    """sympy image of an expression, with shifted coordinates renamed."""
    text = e if isinstance(e, str) else to_text(e)
    text = text.replace("^", "**")
    for name in ("x1", "x2", "x3", "u1", "u2", "z1", "z2", "y1", "y2", "w1", "w2", "v1", "v2"):
        for s in range(-3, 5):
            text = text.replace(f"{name}[{s}]", f"{name}_{s if s >= 0 else 'm' + str(-s)}")
    return sympy.sympify(text)


def same(a, b) -> bool:
    return sympy.simplify(sympy.cancel(sym(a) - sym(b))) == 0


def algebra_residuals(model, count=100, seed=0):
    """Worst residuals of the inverse, homomorphism and commutation identities.

    Test functions are the chart coordinates, the flat output components and
    pairwise products, evaluated at random points of a chart deep enough for
    every shifted expression.
    """
    sys = model.system
    spec = model.spec
    base = JetChart.system(sys, 2, 2)
    funcs = list(map(lambda r: Var(*r), base.coords)) + list(spec.phi)
    funcs += [a * b for a, b in zip(funcs, funcs[1:])]
    fwd = [shift_forward(e, sys) for e in funcs]
    bwd = [shift_backward(e, sys) for e in funcs]
    round_fb = [shift_backward(e, sys) for e in fwd]
    round_bf = [shift_forward(e, sys) for e in bwd]
    pairs = list(zip(funcs, funcs[1:]))
    prod_f = [shift_forward(a * b, sys) for a, b in pairs]
    sum_b = [shift_backward(a + b, sys) for a, b in pairs]
    # delta commutes with delta_y through the flat output: delta(delta^i phi) = delta^{i+1} phi
    comm_lhs = [shift_forward(shift_by(p, sys, i), sys) for p in spec.phi for i in (-1, 0, 1)]
    comm_rhs = [shift_by(p, sys, i + 1) for p in spec.phi for i in (-1, 0, 1)]
    everything = funcs + fwd + bwd + round_fb + round_bf + prod_f + sum_b + comm_lhs + comm_rhs
    chart = JetChart.covering(sys, everything)
    worst = {"inverse": 0.0, "homomorphism": 0.0, "commutation": 0.0}
    for p in sample_jet_points(chart, count, seed, params=sys.params):
        b = p.binding(sys.params)
        f0 = eval_many(funcs, b)
        ff = eval_many(fwd, b)
        fb = eval_many(bwd, b)
        worst["inverse"] = max(
            worst["inverse"],
            np.max(np.abs(eval_many(round_fb, b) - f0)),
            np.max(np.abs(eval_many(round_bf, b) - f0)),
        )
        hom_f = eval_many(prod_f, b) - ff[:-1] * ff[1:]
        hom_b = eval_many(sum_b, b) - (fb[:-1] + fb[1:])
        worst["homomorphism"] = max(worst["homomorphism"], np.max(np.abs(hom_f)), np.max(np.abs(hom_b)))
        worst["commutation"] = max(
            worst["commutation"], np.max(np.abs(eval_many(comm_lhs, b) - eval_many(comm_rhs, b)))
        )
    return worst
