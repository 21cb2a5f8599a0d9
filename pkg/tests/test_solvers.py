import numpy as np
import pytest

from fpcert.bounds import worst_case_rate
from fpcert.fixed_point import run_trace
from fpcert.problems import SparseCodingFamily, UnconstrainedQPFamily
from fpcert.solvers import (
    dr_boxqp_operator,
    fista_run,
    gd_operator,
    ista_operator,
    lasso_objective,
    nn_warmstart,
    power_iteration,
    soft_threshold,
)

from .oracles import box_qp_by_enumeration, lasso_kkt_violation


def _random_psd(rng, n, lo=0.1, hi=5.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    return Q @ np.diag(rng.uniform(lo, hi, n)) @ Q.T


def _run(op, x, z, steps):
    for _ in range(steps):
        z = op(z, x)
    return z


def test_gd_rate_on_paper_qp():
    fam = UnconstrainedQPFamily(20, seed=0)
    op = gd_operator(fam.P, 2.0 / 101.0)
    assert op.rate == ("linear", pytest.approx(99.0 / 101.0, rel=1e-14))


def test_gd_step_and_fixed_point():
    fam = UnconstrainedQPFamily(20, seed=0)
    gamma = 2.0 / 101.0
    op = gd_operator(fam.P, gamma)
    batch = fam.sample(5)
    np.testing.assert_array_equal(op(np.zeros((5, 20)), batch.x), -gamma * batch.x)
    z = _run(op, batch.x, np.zeros((5, 20)), 3000)
    assert np.max(np.abs(z @ fam.P + batch.x)) <= 1e-9
    with pytest.raises(ValueError):
        gd_operator(fam.P, 0.02)


def test_soft_threshold_cases():
    assert soft_threshold(1.2, 0.5) == pytest.approx(0.7)
    assert soft_threshold(-0.3, 0.5) == 0.0
    assert soft_threshold(-2.0, 0.5) == -1.5
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_power_iteration():
    rng = np.random.default_rng(1)
    M = _random_psd(rng, 12)
    assert power_iteration(M, iters=1000) == pytest.approx(np.linalg.eigvalsh(M)[-1], rel=1e-8)


def _lasso_setup(n_inst=20, seed=3):
    fam = SparseCodingFamily(20, 40, seed=seed)
    return fam, fam.sample(n_inst).x


def test_ista_fixed_points_pass_lasso_kkt():
    fam, b = _lasso_setup()
    rho = 0.1
    op = ista_operator(fam.D, rho)
    z = _run(op, b, np.zeros((b.shape[0], 40)), 20000)
    for i in range(b.shape[0]):
        assert lasso_kkt_violation(fam.D, b[i], rho, z[i]) <= 1e-8


def test_fista_fixed_points_pass_lasso_kkt():
    fam, b = _lasso_setup()
    z = fista_run(fam.D, b, 0.1, k_max=20000)[-1]
    for i in range(b.shape[0]):
        assert lasso_kkt_violation(fam.D, b[i], 0.1, z[i]) <= 1e-8


def test_ista_without_penalty_is_gradient_descent():
    fam, b = _lasso_setup(5)
    L = power_iteration(fam.D.T @ fam.D)
    op = ista_operator(fam.D, 0.0, L)
    z = np.random.default_rng(0).normal(size=(5, 40))
    np.testing.assert_array_equal(op(z, b), z - (1.0 / L) * ((z @ fam.D.T - b) @ fam.D))


def test_ista_forms_agree():
    fam, b = _lasso_setup(5)
    z = np.random.default_rng(0).normal(size=(5, 40))
    a = ista_operator(fam.D, 0.1, form="gradient")(z, b)
    c = ista_operator(fam.D, 0.1, form="affine")(z, b)
    np.testing.assert_allclose(a, c, atol=1e-12)
    with pytest.raises(ValueError):
        ista_operator(fam.D, 0.1, form="other")


def test_ista_piecewise_linear():
    fam, b = _lasso_setup(1)
    op = ista_operator(fam.D, 0.1)
    rng = np.random.default_rng(4)
    z = rng.normal(size=40)
    d = rng.normal(size=40)
    h = 1e-7
    out = [op(z + t * h * d, b[0]) for t in (-1, 0, 1)]
    # linear on a neighbourhood away from kinks: second difference vanishes
    assert out[0].shape == (40,)
    np.testing.assert_allclose(out[2] - out[1], out[1] - out[0], atol=1e-15)


def test_fista_without_momentum_is_ista():
    fam, b = _lasso_setup(4)
    op = ista_operator(fam.D, 0.1)
    seq = fista_run(fam.D, b, 0.1, k_max=30, momentum=False)
    z = np.zeros((4, 40))
    for k in range(31):
        np.testing.assert_array_equal(seq[k], z)
        z = op(z, b)


def _fista_objectives(k_max=300):
    fam, b = _lasso_setup(20, seed=5)
    rho = 0.1
    L = power_iteration(fam.D.T @ fam.D)
    z_star = _run(ista_operator(fam.D, rho, L), b, np.zeros((20, 40)), 30000)
    f_star = lasso_objective(fam.D, b, rho, z_star)
    f = lasso_objective(fam.D, b, rho, fista_run(fam.D, b, rho, L, k_max=k_max))
    return f, f_star, L, np.sum(z_star**2, axis=1)


def test_fista_objective_envelope():
    f, f_star, L, dist2 = _fista_objectives()
    for k in range(f.shape[0]):
        assert np.all(f[k] <= f_star + 2 * L * dist2 / (k + 1) ** 2 + 1e-12)


def test_fista_objective_mostly_monotone():
    # at most 5% of steps may increase the objective after a 10-step burn-in
    f, _, _, _ = _fista_objectives(100)
    steps = np.diff(f[10:], axis=0)
    assert np.mean(steps > 0.0) <= 0.05


def test_dr_unconstrained_limit():
    rng = np.random.default_rng(6)
    P = _random_psd(rng, 5)
    op = dr_boxqp_operator(P, -np.inf, np.inf)
    q = rng.normal(size=(4, 5))
    z = _run(op, q, np.zeros((4, 5)), 2000)
    u = op.solution(z, q)
    np.testing.assert_allclose(u @ P + q, 0.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_dr_matches_active_set_enumeration(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 7))
    P = _random_psd(rng, n)
    q = rng.normal(scale=3.0, size=n)
    lower, upper = -rng.uniform(0.1, 1.0, n), rng.uniform(0.1, 1.0, n)
    op = dr_boxqp_operator(P, lower, upper)
    z = _run(op, q[None], np.zeros((1, n)), 5000)
    y = op.solution(z, q[None])[0]
    np.testing.assert_allclose(y, box_qp_by_enumeration(P, q, lower, upper), atol=1e-7)


def test_dr_reflection_is_nonexpansive():
    rng = np.random.default_rng(7)
    n = 6
    P = _random_psd(rng, n, lo=0.0, hi=3.0)
    op = dr_boxqp_operator(P, -np.ones(n), np.ones(n))
    q = np.tile(rng.normal(size=n), (10**4, 1))
    z, y = rng.normal(scale=3, size=(2, 10**4, n))
    Rz, Ry = 2 * op(z, q) - z, 2 * op(y, q) - y
    lhs = np.linalg.norm(Rz - Ry, axis=1)
    rhs = np.linalg.norm(z - y, axis=1)
    assert np.all(lhs <= rhs * (1 + 1e-12))


def test_dr_rejects_bad_factorization():
    with pytest.raises(ValueError):
        dr_boxqp_operator(-3 * np.eye(3), 0, 1)


def test_dr_warm_start_invariance():
    rng = np.random.default_rng(8)
    n = 5
    P = _random_psd(rng, n)
    op = dr_boxqp_operator(P, np.zeros(n), np.ones(n))
    base_q = rng.normal(size=(10, n))
    base_z = op.solution(_run(op, base_q, np.zeros((10, n)), 4000), base_q)
    q = rng.normal(size=(6, n))
    warm = nn_warmstart(base_q, base_z, q)
    cold_sol = op.solution(_run(op, q, np.zeros((6, n)), 4000), q)
    warm_sol = op.solution(_run(op, q, warm, 4000), q)
    np.testing.assert_allclose(cold_sol, warm_sol, atol=1e-7)


def test_averaged_envelope_on_dr_trace():
    rng = np.random.default_rng(9)
    n = 5
    P = _random_psd(rng, n)
    op = dr_boxqp_operator(P, np.zeros(n), np.ones(n))
    q = rng.normal(size=(30, n))
    z_fix = _run(op, q, np.zeros((30, n)), 5000)
    trace = run_trace(op, q, 60, "fp_residual")
    dist = np.linalg.norm(z_fix, axis=1)
    for k in range(61):
        assert np.all(trace.values[:, 0, k] <= worst_case_rate("averaged", 0.5, k) * dist * (1 + 1e-9))


def test_nn_warmstart_cases():
    rng = np.random.default_rng(10)
    bx, bz = rng.normal(size=(30, 4)), rng.normal(size=(30, 3))
    np.testing.assert_array_equal(nn_warmstart(bx, bz, bx[7]), bz[7])
    np.testing.assert_array_equal(nn_warmstart(bx[:1], bz[:1], rng.normal(size=4)), bz[0])
    queries = rng.normal(size=(50, 4))
    picks = nn_warmstart(bx, bz, queries)
    for i, x in enumerate(queries):
        best, best_d = 0, np.inf
        for j in range(30):
            d = np.sum((bx[j] - x) ** 2)
            if d < best_d:
                best, best_d = j, d
        np.testing.assert_array_equal(picks[i], bz[best])
    # exact tie goes to the lowest index
    tie_x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert nn_warmstart(tie_x, np.array([[10.0], [20.0]]), np.zeros(2))[0] == 10.0
    with pytest.raises(ValueError):
        nn_warmstart(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(2))
