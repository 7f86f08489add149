"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (or ``-s``); the summary lines
go straight to the terminal either way.
"""
import time

import numpy as np
import pytest

from conftest import MODELS, algebra_residuals, mutated_text, same
from flatdt.cli import main
from flatdt.expr import FlatDTError, VarRef, to_text
from flatdt.feedback import build_feedback, complete_state_map, verify_brunovsky, verify_deadbeat
from flatdt.flatness import (
    VerifyConfig,
    build_shift_table,
    certify,
    classify_flat_output,
    normalize_to_forward,
    verify_independence_ranks,
)
from flatdt.planner import OutputTrajectory, PlanningProblem, plan_trajectory, synthesize_xu, validate_trajectory

TOL = 1e-9


@pytest.fixture
def report(capsys):
    def emit(n: int, passed: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return emit


def _certify_timed(spec):
    start = time.perf_counter()
    rep = certify(spec, VerifyConfig(samples=200, seed=42))
    return rep, time.perf_counter() - start


def _worst(rep) -> float:
    return max((c.max_residual or 0.0) for c in rep.checks)


def test_criterion_1_product_certification(product, tmp_path, report):
    rep, elapsed = _certify_timed(product.spec)
    bad = tmp_path / "mutated.fdt"
    bad.write_text(mutated_text("product", "x2_numerator"))
    code = main(["check", str(bad), "-o", str(tmp_path / "r.json")])
    ok = rep.certified and _worst(rep) <= TOL and elapsed < 2.0 and code == 1
    assert report(1, ok, f"worst residual {_worst(rep):.1e}, {elapsed:.2f} s, mutated exit {code}")


def test_criterion_2_brocket_certification(brocket, tmp_path, report):
    rep, elapsed = _certify_timed(brocket.spec)
    code = main(["check", str(MODELS / "brocket.fdt"), "-o", str(tmp_path / "r.json")])
    rank = rep.info.get("rank_dx_f")
    ok = rep.certified and _worst(rep) <= TOL and elapsed < 2.0 and code == 0 and rank == 1 < 3
    assert report(2, ok, f"worst residual {_worst(rep):.1e}, {elapsed:.2f} s, rank dx f = {rank}")


PRODUCT_TABLE = {
    ("y1", 0): "x1 - T*z1[-1]",
    ("y1", 1): "x1",
    ("y1", 2): "x1 + T*u1",
    ("y1", 3): "x1 + T*(u1 + u1[1])",
    ("y2", 0): "x3 - x2*z1[-1]",
    ("y2", 1): "x3 - u1*x2",
    ("y2", 2): "x3 + T*u1*u2 - u1[1]*(x2 + T*u2)",
}
BROCKET_TABLE = {
    ("y1", 0): "z1[-1]",
    ("y1", 1): "x1",
    ("y1", 2): "u1",
    ("y1", 3): "u1[1]",
    ("y2", 0): "x3 - x2*z1[-1]",
    ("y2", 1): "x3 + x2*u1",
    ("y2", 2): "x3 + x2*u1 + u2*(x1 + u1[1])",
}


def test_criterion_3_shift_tables(product, brocket, report):
    mismatches = []
    for model, expected in ((product, PRODUCT_TABLE), (brocket, BROCKET_TABLE)):
        table = build_shift_table(model.spec, 0, 3)
        mismatches += [
            f"{model.system.name} {key}: {to_text(table[VarRef(*key)])}"
            for key, text in expected.items()
            if not same(table[VarRef(*key)], text)
        ]
    ok = not mismatches
    assert report(3, ok, f"{14 - len(mismatches)}/14 entries match {mismatches}")


JETS = {
    "product": [[1.0, 1.0], [2.0, -11.0], [7.0, -29.0], [14.0, 0.0]],
    "brocket": [[1.0, 1.0], [2.0, 19.0], [5.0, 73.0], [7.0, 0.0]],
}


def test_criterion_4_point_recovery(product, brocket, report):
    worst = 0.0
    for model in (product, brocket):
        traj = synthesize_xu(model.spec, OutputTrajectory(0, np.array(JETS[model.system.name])), 0, 0)
        got = np.concatenate([traj.x[0], traj.u[0]])
        worst = max(worst, float(np.max(np.abs(got - [2, 3, 4, 5, 6]))))
    assert report(4, worst <= 1e-12, f"worst error {worst:.1e}")


def test_criterion_5_independence_ranks(product, brocket, report):
    ranks = [verify_independence_ranks(m.spec, alpha=1, beta=3, samples=50, seed=42) for m in (product, brocket)]
    ok = all(r.passed and r.min_rank == 10 and r.samples == 50 for r in ranks)
    assert report(5, ok, f"min ranks {[r.min_rank for r in ranks]}")


def test_criterion_6_planning(product, brocket, report):
    rng = np.random.default_rng(42)
    start = time.perf_counter()
    worst_defect = worst_boundary = 0.0
    failures = []
    for model in (product, brocket):
        spec = model.spec
        for i in range(20):
            x_i, x_f = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            u_i, u_f = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
            k_i = int(rng.integers(0, 5))
            p = PlanningProblem(spec, x_i, u_i, x_f, u_f, k_i, k_i + spec.r + 3)
            try:
                traj = synthesize_xu(spec, plan_trajectory(p, seed=int(rng.integers(1 << 30))), p.k_i, p.k_f)
                rep = validate_trajectory(spec.system, traj, p)
            except FlatDTError as exc:
                failures.append(f"{model.system.name}#{i}: {exc}")
                continue
            worst_defect = max(worst_defect, rep.max_defect)
            worst_boundary = max(worst_boundary, rep.boundary_residual)
    elapsed = time.perf_counter() - start
    ok = not failures and worst_defect <= 1e-8 and worst_boundary <= 1e-8 and elapsed < 30.0
    detail = f"defect {worst_defect:.1e}, boundary {worst_boundary:.1e}, {elapsed:.2f} s, failures {failures}"
    assert report(6, ok, detail)


FEEDBACK = {
    "alpha": ["x1", "v1"],
    "beta": ["(w2 - x1)/T", "((x3 - v2)*T - x2*(v1 - w2))/((x1 - 2*w2 + v1)*T)"],
}


@pytest.fixture(scope="module")
def product_feedback(product):
    comp = complete_state_map(product.spec, product.completion, product.completion_names)
    return build_feedback(product.spec, comp, product.phi_hat)


def test_criterion_7_feedback(product_feedback, report):
    fb = product_feedback
    got = list(fb.alpha) + list(fb.beta)
    want = FEEDBACK["alpha"] + FEEDBACK["beta"]
    matches = [same(g, w) for g, w in zip(got, want)]
    structural = [to_text(e) for e in fb.alpha] == FEEDBACK["alpha"] and to_text(fb.beta[0]) == FEEDBACK["beta"][0]
    ok = fb.symbolic and all(matches) and structural
    assert report(7, ok, f"{sum(matches)}/4 equations match: {[to_text(e) for e in got]}")


def test_criterion_8_brunovsky(product, product_feedback, report):
    bru = verify_brunovsky(product.spec, product_feedback, samples=20, horizon=15, seed=42)
    dead = verify_deadbeat(product.spec, product_feedback, targets=10, seed=42)
    ok = bru.passed and bru.max_residual <= 1e-8 and dead.passed and dead.steps == max(product.spec.R)
    assert report(8, ok, f"chain residual {bru.max_residual:.1e}, dead-beat in {dead.steps} steps")


def test_criterion_9_normalization(product, brocket, report):
    details, ok = [], True
    for model in (product, brocket):
        new = normalize_to_forward(model.spec, (1, 1))
        rep = certify(new, VerifyConfig(samples=200, seed=42))
        ok &= classify_flat_output(new) == "forward_flat_form" and rep.certified and _worst(rep) <= TOL
        details.append(f"{model.system.name} {_worst(rep):.1e}")
    assert report(9, ok, ", ".join(details))


def test_criterion_10_shift_algebra(product, brocket, report):
    worst = {}
    for model in (product, brocket):
        for key, value in algebra_residuals(model, count=100, seed=42).items():
            worst[key] = max(worst.get(key, 0.0), value)
    ok = all(v <= 1e-10 for v in worst.values())
    assert report(10, ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
