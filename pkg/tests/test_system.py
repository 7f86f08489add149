import dataclasses

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from conftest import MODELS
from flatdt.expr import Var, parse_expr
from flatdt.modelfile import load_model
from flatdt.numerics import ConvergenceError, numeric_rank
from flatdt.system import (
    ModelError,
    SystemModel,
    Trajectory,
    invert_extension,
    reconstruct_backward,
    simulate_forward,
    validate_system,
    write_trajectory_csv,
)

XU = (np.array([2.0, 3.0, 4.0]), np.array([5.0, 6.0]))


def _no_inverse(model):
    return dataclasses.replace(model.system, psi=None)


def test_product_validates(product):
    report = validate_system(product.system)
    assert report.passed
    assert report.equilibrium_defect == 0.0
    assert report.check("rank_dx_f").min_rank == 3
    assert report.inverse_residual <= 1e-10


def test_brocket_reports_state_rank_informationally(brocket):
    report = validate_system(brocket.system)
    assert report.passed
    dx = report.check("rank_dx_f")
    assert dx.informational and dx.min_rank == 1 and not dx.passed


def test_collapsing_extension_fails():
    sys = SystemModel("bad", ("x",), ("u",), ("z",), (Var("u"),), (Var("u"),), [0.0], [0.0])
    report = validate_system(sys)
    assert not report.passed
    assert report.check("rank_dxu_fg").min_rank == 1


def test_equilibrium_defect_fails_fast():
    sys = SystemModel("drift", ("x",), ("u",), ("z",), (parse_expr("x + u + 1"),), (Var("x"),), [0.0], [0.0])
    report = validate_system(sys)
    assert not report.passed and report.checks == []
    assert report.equilibrium_defect == 1.0


def test_model_rejects_shifted_dynamics():
    with pytest.raises(ModelError):
        SystemModel("s", ("x",), ("u",), ("z",), (Var("u", 1),), (Var("x"),), [0.0], [0.0])


def test_numeric_rank_survives_row_scaling():
    a = np.array([[1e6, 2e6], [1.0, 0.0], [3e-7, 3e-7]])
    assert numeric_rank(a) == 2
    assert numeric_rank(np.zeros((3, 3))) == 0


def test_invert_product(product):
    sys = product.system
    xplus, zeta = sys.step(*XU), sys.extension(*XU)
    assert xplus.tolist() == [7.0, 9.0, 34.0] and zeta.tolist() == [5.0, 6.0]
    x, u = invert_extension(sys, xplus, zeta)
    assert np.allclose(x, XU[0], atol=1e-12) and np.allclose(u, XU[1], atol=1e-12)
    x, u = invert_extension(_no_inverse(product), xplus, zeta, seed=(np.ones(3), np.ones(2)))
    assert np.allclose(x, XU[0], atol=1e-10) and np.allclose(u, XU[1], atol=1e-10)


def test_invert_brocket(brocket):
    sys = brocket.system
    xplus, zeta = sys.step(*XU), sys.extension(*XU)
    # x3+ = x3 + x1*u2 + x2*u1 = 4 + 12 + 15
    assert xplus.tolist() == [5.0, 6.0, 31.0] and zeta.tolist() == [2.0, 3.0]
    for model in (sys, _no_inverse(brocket)):
        x, u = invert_extension(model, xplus, zeta)
        assert np.max(np.abs(model.step(x, u) - xplus)) <= 1e-10
        assert np.allclose(np.concatenate([x, u]), np.concatenate(XU), atol=1e-10)


def test_invert_at_equilibrium(example):
    sys = example.system
    x, u = invert_extension(_no_inverse(example), sys.x0, sys.extension(sys.x0, sys.u0))
    assert np.allclose(x, sys.x0) and np.allclose(u, sys.u0)


def test_newton_reports_non_convergence():
    sys = SystemModel("sq", ("x",), ("u",), ("z",), (parse_expr("x^2 + u"),), (Var("u"),), [0.0], [0.0])
    with pytest.raises(ConvergenceError):
        invert_extension(sys, [-1.0], [0.0], seed=([1.0], [0.0]))


def test_simulate_product(product):
    traj = simulate_forward(product.system, [0, 0, 0], [[1, 1], [2, 0]])
    assert traj.x.tolist() == [[0, 0, 0], [1, 1, 1], [3, 1, 1]]
    assert traj.is_valid(product.system)


def test_simulate_edge_cases(example):
    sys = example.system
    single = simulate_forward(sys, sys.x0, [])
    assert single.steps == 1 and single.u.shape == (0, sys.m)
    steady = simulate_forward(sys, sys.x0, [sys.u0] * 5)
    assert np.all(steady.x == sys.x0)


def test_reconstruct_product(product):
    traj = reconstruct_backward(product.system, XU[0], [(1.0, 2.0)], k=5)
    assert traj.k_start == 4
    assert traj.x[0].tolist() == [1.0, 1.0, 2.0] and traj.u[0].tolist() == [1.0, 2.0]
    assert reconstruct_backward(product.system, XU[0], []).steps == 1


@hypothesis.given(st.integers(0, 2**31), st.integers(1, 8))
@hypothesis.settings(max_examples=30, deadline=None)
def test_simulate_then_reconstruct(seed, steps):
    for name in ("product", "brocket"):
        model = load_model(MODELS / f"{name}.fdt")
        sys = model.system
        rng = np.random.default_rng(seed)
        fwd = simulate_forward(sys, rng.uniform(-2, 2, sys.n), rng.uniform(-2, 2, (steps, sys.m)))
        zetas = [sys.extension(fwd.x[k], fwd.u[k]) for k in range(steps)][::-1]
        back = reconstruct_backward(sys, fwd.x[-1], zetas, k=steps)
        assert back.k_start == 0
        assert np.allclose(back.x, fwd.x, atol=1e-8) and np.allclose(back.u, fwd.u, atol=1e-8)
        nopsi = reconstruct_backward(dataclasses.replace(sys, psi=None), fwd.x[-1], zetas[:1], seed=(fwd.x[-2], fwd.u[-1]))
        assert np.allclose(nopsi.x[0], fwd.x[-2], atol=1e-8)


def test_trajectory_shapes():
    with pytest.raises(ValueError):
        Trajectory(0, np.zeros((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        Trajectory(0, np.zeros((3, 1)), np.zeros((5, 1)))


def test_defect_detects_perturbation(product):
    traj = simulate_forward(product.system, [0, 0, 0], [[1, 1], [2, 0], [0.5, 0.5]])
    traj.u[1, 0] += 1e-3
    d = traj.defects(product.system)
    assert d[0] == 0.0 and d[1] >= 1e-4


def test_trajectory_csv(tmp_path, product):
    traj = simulate_forward(product.system, [0, 0, 0], [[1, 1], [2, 0]])
    path = tmp_path / "t.csv"
    write_trajectory_csv(path, product.system, traj)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,x1,x2,x3,u1,u2,defect"
    assert lines[1] == "0,0,0,0,1,1,0"
    assert lines[-1] == "2,3,1,1,,,"
