import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mgdun import classical as cl
from mgdun import degradation as deg
from mgdun.selftest import pgd_problem


def dense(apply, shape):
    n = int(np.prod(shape))
    return np.stack([apply(np.eye(n)[k].reshape(shape)).ravel() for k in range(n)], axis=1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), thr=st.floats(0, 2))
def test_prox_l1_is_argmin(seed, thr):
    v = np.random.default_rng(seed).standard_normal(20)
    p = cl.prox_l1(v, thr)
    # coordinatewise optimality of 1/2 (u - v)^2 + thr |u| against nearby candidates
    f = lambda u: 0.5 * (u - v) ** 2 + thr * np.abs(u)  # noqa: E731
    for d in (1e-3, -1e-3):
        assert np.all(f(p) <= f(p + d) + 1e-12)
    assert np.all(np.abs(p) <= np.abs(v))


def test_prox_rejects_negative_threshold():
    with pytest.raises(ValueError):
        cl.prox_l1(np.zeros(2), -1.0)


def test_lipschitz_matches_dense_eigenvalue():
    ops = cl.Operators(deg.DegradationOp(sigma=1.0, scale=2), deg.LinearCrossModalOp.gaussian(0.5, 0.8))
    params = cl.SolverParams(eta=0.7, beta1=0.3, beta2=0.2)
    shape = (1, 1, 8, 8)
    h = dense(lambda z: cl.hessian_apply(z, ops, params), shape)
    assert np.allclose(h, h.T, atol=1e-13)
    top = np.linalg.eigvalsh(h).max()
    assert cl.lipschitz_bound(shape, ops, params, iters=500) == pytest.approx(top, rel=1e-6)


def test_cg_against_dense_solve():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((30, 30))
    a = m @ m.T + 30 * np.eye(30)
    b = rng.standard_normal(30)
    x, res, _ = cl.cg_solve(lambda v: a @ v, b, tol=1e-12)
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-9)
    with pytest.raises(cl.ConvergenceError):
        cl.cg_solve(lambda v: a @ v, b, tol=1e-30, maxiter=2)


def test_oracle_satisfies_normal_equations():
    prob, ops = pgd_problem(2)
    params = cl.SolverParams(eta=1.0)
    z = cl.cg_quadratic_oracle(prob, ops, params)
    lhs = cl.hessian_apply(z, ops, params, with_splitting=False)
    rhs = ops.apply_dk_t(prob.x) + ops.apply_p_t(prob.y)
    assert np.linalg.norm(lhs - rhs) < 1e-7
    with pytest.raises(ValueError, match="lambda"):
        cl.cg_quadratic_oracle(prob, ops, replace(params, lambda1=0.1))


@pytest.mark.parametrize("scale", [2, 4])
def test_pgd_converges_to_oracle_monotonically(scale):
    prob, ops = pgd_problem(scale)
    params = cl.SolverParams(eta=1.0, iters=300)
    res = cl.solve(prob, ops, params)
    ref = cl.cg_quadratic_oracle(prob, ops, params)
    assert np.linalg.norm(res.z - ref) / np.linalg.norm(ref) < 1e-3
    objs = [o for _, o, _ in res.trace]
    assert all(b <= a + 1e-8 for a, b in zip(objs, objs[1:]))


def test_objective_nonincreasing_with_l1():
    prob, ops = pgd_problem(2, seed=4)
    res = cl.solve(prob, ops, cl.SolverParams(eta=0.5, lambda1=1e-3, lambda2=2e-3, iters=60))
    objs = [o for _, o, _ in res.trace]
    assert all(b <= a + 1e-8 for a, b in zip(objs, objs[1:]))


def test_zero_iterations_returns_bicubic():
    prob, ops = pgd_problem(2)
    res = cl.solve(prob, ops, cl.SolverParams(iters=0))
    assert np.array_equal(res.z, deg.bicubic_resize(prob.x, 2, "up"))
    assert len(res.trace) == 1


def test_default_steps():
    prob, ops = pgd_problem(2)
    p = cl.resolve_steps(prob, ops, cl.SolverParams(beta1=2.0, beta2=4.0))
    assert p.delta1 == 0.5 and p.delta2 == 0.25
    lip = cl.lipschitz_bound(prob.hr_shape, ops, p)
    assert p.delta3 == pytest.approx(0.9 / lip)


def test_divergence_is_reported():
    prob, ops = pgd_problem(2)
    with pytest.raises(cl.DivergenceError, match="delta3"):
        cl.solve(prob, ops, cl.SolverParams(delta3=50.0, iters=100))


def test_trace_csv_columns():
    prob, ops = pgd_problem(2)
    res = cl.solve(prob, ops, cl.SolverParams(iters=3))
    lines = res.trace_csv().splitlines()
    assert lines[0] == "iteration,objective,psnr" and len(lines) == 5
    assert math.isfinite(float(lines[-1].split(",")[2]))


def test_params_validated():
    with pytest.raises(ValueError):
        cl.SolverParams(eta=-1.0)
    with pytest.raises(ValueError):
        cl.SolverParams(delta3=-0.1)
