import numpy as np
import pytest

from fmtrecon.baselines import (JacobianModel, build_jacobian,
                                estimate_operator_norm, soft_threshold,
                                solve_l1fista, solve_l2cg)
from fmtrecon.fem import OpticalParams, assemble, compose
from fmtrecon.forward import LayoutConfig, build_layout, factorize, forward_model
from fmtrecon.mesh import generate_slab_mesh


@pytest.fixture(scope="module")
def small_problem():
    mesh = generate_slab_mesh((15, 15, 7.5), 2.5)
    sys = assemble(mesh)
    fact = factorize(compose(sys, OpticalParams(0.1, 1.0)))
    src = [(x, y) for x in (4, 7.5, 11) for y in (4, 11)]
    det = [(x, y) for x in (3, 7.5, 12) for y in (3, 7.5, 12)]
    layout = build_layout(mesh, src, det, LayoutConfig(detector_sigma=1.5))
    return mesh, fact, layout


def test_jacobian_reproduces_forward_model(small_problem):
    mesh, fact, layout = small_problem
    jac = build_jacobian(fact, layout)
    assert jac.dense is not None
    rng = np.random.default_rng(0)
    for _ in range(5):
        c = rng.random(mesh.n_nodes)
        _, stack = forward_model(fact, layout, c)
        expected = stack.values.ravel()
        got = jac.matvec(c)
        assert np.abs(got - expected).max() < 1e-10 * np.abs(expected).max()


def test_jacobian_implicit_mode_matches_dense(small_problem):
    mesh, fact, layout = small_problem
    dense = build_jacobian(fact, layout)
    implicit = build_jacobian(fact, layout, dense_cap=0)
    assert implicit.dense is None
    rng = np.random.default_rng(1)
    c = rng.random(mesh.n_nodes)
    r = rng.standard_normal(dense.shape[0])
    assert np.allclose(implicit.matvec(c), dense.matvec(c), rtol=1e-12)
    assert np.allclose(implicit.rmatvec(r), dense.rmatvec(r), rtol=1e-12)


def test_jacobian_unit_vector_probe(small_problem):
    mesh, fact, layout = small_problem
    jac = build_jacobian(fact, layout)
    n = mesh.n_nodes // 2
    e = np.zeros(mesh.n_nodes)
    e[n] = 1.0
    assert np.allclose(jac.matvec(e), jac.dense[:, n], rtol=1e-14)


def test_jacobian_zero_field(small_problem):
    mesh, fact, layout = small_problem
    jac = build_jacobian(fact, layout, dense_cap=0)
    assert np.all(jac.matvec(np.zeros(mesh.n_nodes)) == 0)


def test_l2cg_identity_small_alpha():
    jac = np.eye(6)
    m = np.arange(6, dtype=float)
    c, ok = solve_l2cg(jac, m, alpha=1e-12, iters=50)
    assert ok
    assert np.allclose(c, m, atol=1e-6)


def test_l2cg_huge_alpha_shrinks_to_zero():
    jac = np.eye(4)
    m = np.ones(4)
    c, _ = solve_l2cg(jac, m, alpha=1e12, iters=50)
    assert np.abs(c).max() < 1e-10


def test_l2cg_matches_dense_normal_equations():
    rng = np.random.default_rng(2)
    jac = rng.standard_normal((10, 5))
    m = rng.standard_normal(10)
    alpha = 0.37
    c, ok = solve_l2cg(jac, m, alpha, iters=100)
    assert ok
    direct = np.linalg.solve(jac.T @ jac + alpha * np.eye(5), jac.T @ m)
    assert np.abs(c - direct).max() < 1e-8 * np.abs(direct).max()
    # normal-equations residual at convergence
    resid = jac.T @ (jac @ c - m) + alpha * c
    assert np.linalg.norm(resid) < 1e-6 * np.linalg.norm(jac.T @ m)


def test_l2cg_objective_decreases_monotonically():
    rng = np.random.default_rng(3)
    jac = rng.standard_normal((20, 12))
    m = rng.standard_normal(20)
    alpha = 0.1
    objectives = []
    for iters in range(1, 13):
        c, _ = solve_l2cg(jac, m, alpha, iters=iters)
        objectives.append(np.sum((jac @ c - m) ** 2) + alpha * np.sum(c * c))
    assert all(b <= a + 1e-12 for a, b in zip(objectives, objectives[1:]))


def test_l2cg_rejects_bad_alpha():
    with pytest.raises(ValueError):
        solve_l2cg(np.eye(2), np.ones(2), alpha=0.0)


def test_soft_threshold_arithmetic():
    assert soft_threshold(np.array([3.0]), 1.0)[0] == 2.0
    assert max(soft_threshold(np.array([-3.0]), 1.0)[0], 0.0) == 0.0
    assert soft_threshold(np.array([0.5]), 1.0)[0] == 0.0


def test_fista_1d_closed_form():
    # minimize (x - 2)^2 + 2 |x|  ->  x* = 1
    jac = np.array([[1.0]])
    m = np.array([2.0])
    c, history = solve_l1fista(jac, m, lam=2.0, iters=500)
    assert abs(c[0] - 1.0) < 1e-6
    assert history[-1] <= history[0]


def test_fista_orthonormal_lambda_zero():
    rng = np.random.default_rng(4)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    target = rng.standard_normal(8)
    m = q @ target
    c, _ = solve_l1fista(q, m, lam=0.0, iters=400)
    assert np.allclose(c, np.maximum(target, 0.0), atol=1e-6)


def test_fista_iterates_nonnegative(small_problem):
    mesh, fact, layout = small_problem
    jac = build_jacobian(fact, layout)
    rng = np.random.default_rng(5)
    c_true = np.maximum(rng.standard_normal(mesh.n_nodes), 0)
    m = jac.matvec(c_true)
    c, history = solve_l1fista(jac, m, lam=1e-9 * np.abs(m).max(), iters=60)
    assert (c >= 0).all()
    assert history[-1] <= history[0]


def test_fista_rejects_negative_lambda():
    with pytest.raises(ValueError):
        solve_l1fista(np.eye(2), np.ones(2), lam=-1.0)


def test_operator_norm_estimate():
    rng = np.random.default_rng(6)
    jac = rng.standard_normal((30, 10))
    est = estimate_operator_norm(jac, iters=200)
    exact = np.linalg.eigvalsh(jac.T @ jac).max()
    assert est == pytest.approx(exact, rel=1e-6)
