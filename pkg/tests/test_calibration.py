import math

import numpy as np
import pytest

from fpcert.bounds import PriorGridSpec, regularizer_B, round_prior
from fpcert.calibration import CalibrationConfig, RiskGrid, calibrate_bound, certify_learned, mc_empirical_risk
from fpcert.fixed_point import NonFiniteError, certify_classical, default_tolerance_grid, evaluate_metric, run_trace
from fpcert.kl import GroupedGaussianSpec, kl_inverse
from fpcert.learned import ALISTA, L2WS
from fpcert.problems import InstanceBatch, SparseCodingFamily, UnconstrainedQPFamily
from fpcert.rng import stream
from fpcert.solvers import ista_operator, power_iteration

GRID = PriorGridSpec()


@pytest.fixture(scope="module")
def setup():
    fam = SparseCodingFamily(8, 16, seed=3)
    return fam, fam.sample(40), ALISTA(fam.D, 4)


def _spec(arch, w, s):
    lam = round_prior(np.full(len(arch.partition), 1.0), GRID)
    return GroupedGaussianSpec(w, np.broadcast_to(s, w.shape), arch.prior_mean(), arch.partition, lam)


def _cal(**kw):
    base = dict(H=3, delta=1e-3, omega=1e-3, tolerances=(-40.0, -20.0, -10.0, -5.0, 0.0), ks=(0, 2, 4), seed=7)
    base.update(kw)
    return CalibrationConfig(**base)


def test_zero_variance_single_sample_is_deterministic_risk(setup):
    fam, batch, arch = setup
    w = arch.init_mean()
    cal = _cal(H=1)
    grid = mc_empirical_risk(_spec(arch, w, 0.0), arch, batch, cal)["nmse"]
    seq = arch.iterates(w, batch.x)
    for r, k in enumerate(cal.ks):
        vals = evaluate_metric("nmse", seq[k], batch.x, None, batch.z_star)
        for c, eps in enumerate(cal.tolerances):
            assert grid.risk[r, c] == np.mean(vals >= eps)


def test_tolerance_below_every_value_gives_full_risk(setup):
    fam, batch, arch = setup
    grid = mc_empirical_risk(_spec(arch, arch.init_mean(), 1e-4), arch, batch, _cal(tolerances=(-1000.0,)))["nmse"]
    assert np.all(grid.risk == 1.0)


def test_matches_triple_loop():
    fam = SparseCodingFamily(6, 10, seed=4)
    batch = fam.sample(5)
    arch = ALISTA(fam.D, 2)
    spec = _spec(arch, arch.init_mean(), 0.01)
    cal = _cal(H=3, ks=(0, 1, 2), metrics=("nmse", "fp_residual"), tolerances=(-10.0, -3.0, 0.01, 0.1))
    grids = mc_empirical_risk(spec, arch, batch, cal, keep_trace=True)
    op = ista_operator(fam.D, 0.1)
    for metric in cal.metrics:
        expected = np.zeros((3, 4))
        for j in range(3):
            theta = spec.w + stream(7, "calibration", j).standard_normal(spec.w.size) * np.sqrt(spec.s)
            for i in range(5):
                b = batch.x[i]
                z = np.zeros(10)
                for k in range(3):
                    if metric == "nmse":
                        t = batch.z_star[i]
                        val = 10 * math.log10(np.sum((z - t) ** 2) / np.sum(t**2))
                    else:
                        val = np.linalg.norm(op(z, b) - z)
                    for c, eps in enumerate(cal.tolerances):
                        expected[k, c] += val >= eps
                    if k < 2:
                        psi, gamma = theta[k], theta[2 + k]
                        v = z - gamma * arch.W.T @ (fam.D @ z - b)
                        z = np.sign(v) * np.maximum(np.abs(v) - psi, 0)
        np.testing.assert_allclose(grids[metric].risk, expected / 15, rtol=0, atol=1e-15)
        assert grids[metric].trace.values.shape == (5, 3, 3)


def test_threads_do_not_change_counts(setup):
    fam, batch, arch = setup
    spec = _spec(arch, arch.init_mean(), 0.01)
    one = mc_empirical_risk(spec, arch, batch, _cal(H=40, threads=1))["nmse"].risk
    many = mc_empirical_risk(spec, arch, batch, _cal(H=40, threads=4))["nmse"].risk
    assert one.tobytes() == many.tobytes()


def test_nonfinite_policy(setup):
    fam, batch, arch = setup
    w = arch.layout.pack({"psi": np.zeros(4), "gamma": np.full(4, 1e200)})
    spec = _spec(arch, w, 0.0)
    with pytest.raises(NonFiniteError):
        mc_empirical_risk(spec, arch, batch, _cal(H=1))
    grid = mc_empirical_risk(spec, arch, batch, _cal(H=1, strict_finite=False))["nmse"]
    assert np.all(grid.risk[1:] == 1.0) and grid.nonfinite


def test_calibrate_zero_risk_analytic():
    grid = RiskGrid("nmse", (10,), (0.0,), np.zeros((1, 1)), 1000, 20000)
    cal = CalibrationConfig(H=20000, delta=1e-5, omega=1e-5, tolerances=(0.0,), ks=(10,))
    _, r_bar, r_star, _ = calibrate_bound(grid, 0.0, cal)
    c = math.log(2e5) / 2e4
    assert r_bar[0, 0] == pytest.approx(1.0 - math.exp(-c), rel=1e-10)
    assert r_bar[0, 0] == pytest.approx(6.1e-4, abs=0.05e-4)
    assert r_star[0, 0] == r_bar[0, 0]


def test_calibrate_composition_and_ordering():
    rng = np.random.default_rng(2)
    risk = np.sort(rng.uniform(size=(3, 6)), axis=1)[:, ::-1]
    grid = RiskGrid("mse", (1, 2, 3), tuple(np.linspace(0.1, 1, 6)), risk, 500, 100)
    cal = CalibrationConfig(H=100, delta=1e-3, omega=1e-4, tolerances=grid.tolerances, ks=grid.ks)
    certs, r_bar, r_star, ledger = calibrate_bound(grid, 0.05, cal, n_btargets=2)
    for (r, c), r_hat in np.ndenumerate(risk):
        rb = kl_inverse(r_hat, math.log(2e4) / 100)
        assert r_bar[r, c] == rb and r_star[r, c] == kl_inverse(rb, 0.05)
        assert r_hat <= r_bar[r, c] <= r_star[r, c]
    assert all(cert.confidence == pytest.approx(1 - 2 * 1.1e-3, abs=1e-15) for cert in certs)
    assert ledger.confidence == pytest.approx(1 - 2 * 6 * 1.1e-3, abs=1e-15)


def test_more_samples_tighten_r_bar():
    values = [kl_inverse(0.1, math.log(2 / 1e-5) / H) for H in (10, 100, 1000, 20000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_certify_learned_quantile_confidence(setup):
    fam, batch, arch = setup
    cal = _cal(H=4, delta=1e-5, omega=1e-5, tolerances=tuple(default_tolerance_grid("nmse")), ks=(4,))
    bundle = certify_learned(_spec(arch, arch.init_mean(), 1e-4), arch, batch, cal, GRID, quantiles=(0.5,), n_btargets=6)
    assert bundle.ledger.confidence == pytest.approx(0.99028, abs=1e-12)
    assert bundle.risk_confidence == pytest.approx(0.99988, abs=1e-12)
    assert all(row.confidence == bundle.ledger.confidence for row in bundle.quantiles)
    again = certify_learned(_spec(arch, arch.init_mean(), 1e-4), arch, batch, cal, GRID, quantiles=(0.5,), n_btargets=6)
    assert [c.risk_bound for c in again.certificates] == [c.risk_bound for c in bundle.certificates]


def test_degenerate_posterior_not_tighter_than_classical():
    fam = SparseCodingFamily(8, 16, seed=5)
    batch = fam.sample(50)
    L = power_iteration(fam.D.T @ fam.D)
    arch = ALISTA(fam.D, 6, W=fam.D)
    w = arch.layout.pack({"psi": np.full(6, 0.1 / L), "gamma": np.full(6, 1.0 / L)})
    spec = _spec(arch, w, 1e-30)
    tol = tuple(np.linspace(-30, 0, 16))
    delta = 1e-3
    cal = CalibrationConfig(H=1, delta=delta, omega=1e-3, tolerances=tol, ks=tuple(range(7)))
    bundle = certify_learned(spec, arch, batch, cal, GRID)
    trace = run_trace(ista_operator(fam.D, 0.1, L), batch.x, 6, "nmse", z_true=batch.z_star)
    classical, _, _ = certify_classical(trace, tol, delta)
    table = {(c.k, c.epsilon): c for c in classical}
    for cert in bundle.certificates:
        ref = table[(cert.k, cert.epsilon)]
        assert cert.empirical_risk == ref.empirical_risk
        assert cert.risk_bound >= ref.risk_bound


def test_l2ws_calibration_extends_past_training_horizon():
    fam = UnconstrainedQPFamily(20, seed=0)
    batch = InstanceBatch(fam.sample(30).x / 1e4)
    arch = L2WS(fam.P, (20, 10, 20), 3)
    w = arch.init_mean() * 0.1
    spec = _spec(arch, w, 1e-8)
    cal = _cal(H=5, ks=(0, 3, 10, 1000), metrics=("fp_residual",), tolerances=(1e-6, 1e-3, 1e-1))
    bundle = certify_learned(spec, arch, batch, cal, GRID, dist_bound=(1e3, 1e-4))
    ks = {c.k for c in bundle.certificates}
    assert ks == {0, 3, 10, 1000}
    combined = [c for c in bundle.certificates if c.method == "combined"]
    assert len(combined) == 12
    assert bundle.ledger.confidence == pytest.approx(1 - 3 * 2e-3 - 1e-4, abs=1e-14)
    # at k=1000 the linear rate 2 (99/101)^k times the distance bound is below 0.1
    pb = {(c.k, c.epsilon): c.risk_bound for c in bundle.certificates if c.method == "pac_bayes"}
    cb = {(c.k, c.epsilon): c.risk_bound for c in combined}
    assert pb[(1000, 1e-1)] > 0 and cb[(1000, 1e-1)] == 0.0
    assert cb[(0, 1e-1)] == pb[(0, 1e-1)]
    assert regularizer_B(spec, GRID, 30, cal.delta) == bundle.B_star
