import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprobe import (ConvergenceError, Dataset, LossKind, TrainedModel, hessian, point_grad,
                       point_hess, synth_gaussian_binary, train)
from grouprobe.model import default_tol, phi, phi1, phi2, phi3

# theta_hat for {(1,+1),(2,+1),(-1,-1)}, lambda = 1, from a 40-digit mpmath root solve
THETA_1D = 0.87996671118195043373642362177
# T6 optimum, same oracle
THETA_T6 = (1.015794459880538870746341, -0.1449098538628237727206586)


def golden_section(fn, lo, hi, tol=1e-13):
    g = (mpmath.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    while b - a > tol:
        if fn(c) < fn(d):
            b, d = d, c
            c = b - g * (b - a)
        else:
            a, c = c, d
            d = a + g * (b - a)
    return 0.5 * (a + b)


def one_d():
    return Dataset(np.array([[1.0], [2.0], [-1.0]]), np.array([1, 1, 0]), np.ones(3), 2)


def test_one_d_matches_golden_section():
    m = train(one_d(), 1.0)
    # float64 objective values only pin the argmin to ~sqrt(eps); evaluate at 30 digits
    mpmath.mp.dps = 30
    obj = lambda t: sum(mpmath.log1p(mpmath.exp(-y * x * t)) for x, y in ((1, 1), (2, 1), (-1, -1))) + t * t / 2
    oracle = float(golden_section(obj, mpmath.mpf(-5), mpmath.mpf(5)))
    assert abs(m.theta[0] - oracle) <= 1e-8
    assert abs(m.theta[0] - THETA_1D) <= 1e-12


def test_t6_optimum(t6_model):
    np.testing.assert_allclose(t6_model.theta, THETA_T6, atol=1e-12)
    assert t6_model.grad_norm <= default_tol(6)


def test_symmetric_pair_gives_zero():
    ds = Dataset(np.array([[1.3, -0.2], [1.3, -0.2]]), np.array([1, 0]), np.ones(2), 2)
    np.testing.assert_allclose(train(ds, 0.1).theta, 0.0, atol=1e-14)


def test_huge_lambda_shrinks(syn200):
    m = train(syn200, 1e9)
    c_ell = np.max(np.linalg.norm(syn200.features, axis=1))
    assert np.linalg.norm(m.theta) <= syn200.n * c_ell / 1e9


@pytest.mark.parametrize("kind", list(LossKind))
def test_optimality_certificate(kind):
    ds = synth_gaussian_binary(30, 4, 1.0, 2)
    if kind is LossKind.SOFTMAX:
        ds = Dataset(ds.features, np.arange(ds.n) % 3, ds.base_weights, 3)
    keep = np.linspace(0.1, 1.0, ds.n)
    m = train(ds, 0.3, kind, keep_weights=keep)
    obj = m.objective(ds)
    g = obj.gradient(m.theta, obj.weights(keep))
    assert np.linalg.norm(g) <= default_tol(ds.n)


def test_intercept_unpenalized():
    ds = synth_gaussian_binary(40, 3, 1.0, 5)
    ds = Dataset(ds.features + 4.0, ds.labels, ds.base_weights, 2)
    m = train(ds, 1.0, fit_intercept=True)
    obj = m.objective(ds)
    assert obj.mask[-1] == 0.0
    # gradient of the intercept is the plain sum of residuals
    G = obj.gradient(m.theta, obj.weights())
    assert abs(G[-1]) <= default_tol(ds.n)
    assert m.intercept is not None


def test_softmax_intercept_rejected(t6):
    ds = Dataset(t6.features, np.array([0, 1, 2, 0, 1, 2]), np.ones(6), 3)
    with pytest.raises(ValueError, match="unique optimum"):
        train(ds, 1.0, LossKind.SOFTMAX, fit_intercept=True)


def test_non_convergence_reports_grad_norm(t6):
    with pytest.raises(ConvergenceError) as err:
        train(t6, 1e-3, max_iter=1)
    assert err.value.grad_norm > 0


def test_bad_inputs(t6):
    with pytest.raises(ValueError):
        train(t6, 0.0)
    with pytest.raises(ValueError):
        train(t6, 1.0, keep_weights=np.full(6, 1.5))
    with pytest.raises(ValueError):
        train(t6, 1.0, keep_weights=np.zeros(6))


def test_point_grad_closed_forms(t6, t6_model):
    zero = TrainedModel(np.zeros(2), LossKind.LOGISTIC, 0.5, False, 2, 2, 0.0, 0, t6.fingerprint)
    np.testing.assert_allclose(point_grad(zero, t6, 0), -t6.features[0] / 2, atol=1e-15)
    np.testing.assert_allclose(point_hess(zero, t6, 0), 0.25 * np.outer(t6.features[0], t6.features[0]))
    x = t6.features[1]
    sq = TrainedModel(x / (x @ x), LossKind.SQUARED, 0.5, False, 2, 2, 0.0, 0, t6.fingerprint)
    np.testing.assert_allclose(point_grad(sq, t6, 1), 0.0, atol=1e-15)
    np.testing.assert_allclose(point_hess(sq, t6, 1), np.outer(x, x))


def _loss_i(model, ds, i, theta):
    return model.losses(ds.features[i:i + 1], ds.labels[i:i + 1], theta)[0]


@pytest.mark.parametrize("kind", list(LossKind))
def test_derivatives_match_finite_differences(kind):
    ds = synth_gaussian_binary(10, 3, 0.5, 1)
    if kind is LossKind.SOFTMAX:
        ds = Dataset(ds.features, np.arange(ds.n) % 3, ds.base_weights, 3)
    m = train(ds, 0.5, kind)
    rng = np.random.default_rng(0)
    theta = m.theta + 0.3 * rng.standard_normal(m.theta.shape)
    h = 1e-6 * (1 + np.linalg.norm(theta))
    for i in (0, 7, 13):
        g = point_grad(m, ds, i, at=theta)
        fd = np.array([(_loss_i(m, ds, i, theta + h * e) - _loss_i(m, ds, i, theta - h * e)) / (2 * h)
                       for e in np.eye(theta.size)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))
        H = point_hess(m, ds, i, at=theta)
        fdh = np.array([(point_grad(m, ds, i, at=theta + h * e) - point_grad(m, ds, i, at=theta - h * e))
                        / (2 * h) for e in np.eye(theta.size)])
        assert np.linalg.norm(H - fdh) <= 1e-5 * max(1.0, np.linalg.norm(H))
        assert np.linalg.eigvalsh(H).min() >= -1e-12


def test_softmax_shift_direction_is_flat():
    ds = synth_gaussian_binary(5, 2, 0.5, 3)
    ds = Dataset(ds.features, np.arange(ds.n) % 3, ds.base_weights, 3)
    m = train(ds, 0.5, LossKind.SOFTMAX)
    H = point_hess(m, ds, 0)
    x = ds.features[0]
    shift = np.tile(x, 3)  # same vector added to every class block
    assert np.linalg.norm(H @ shift) <= 1e-12 * np.linalg.norm(shift)


def test_hessian_weights(t6, t6_model):
    H = hessian(t6_model, t6)
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() >= t6_model.lam
    np.testing.assert_allclose(hessian(t6_model, t6, np.zeros(6)), 0.5 * np.eye(2), atol=1e-15)
    a = np.array([1, 0, 1, 0, 1, 0.0])
    parts = (hessian(t6_model, t6, a, regularize=False) + hessian(t6_model, t6, 1 - a, regularize=False)
             + 0.5 * np.eye(2))
    np.testing.assert_allclose(parts, H, atol=1e-12)
    with pytest.raises(ValueError):
        hessian(t6_model, t6, -np.ones(6))


def test_phi_derivatives():
    z = np.linspace(-20, 20, 41)
    h = 1e-5
    np.testing.assert_allclose(phi1(z), (phi(z + h) - phi(z - h)) / (2 * h), atol=1e-9)
    np.testing.assert_allclose(phi2(z), (phi1(z + h) - phi1(z - h)) / (2 * h), atol=1e-9)
    np.testing.assert_allclose(phi3(z), (phi2(z + h) - phi2(z - h)) / (2 * h), atol=1e-9)
    assert phi2(0.0) == 0.25
    assert np.all(phi2(z) > 0) and np.all(phi2(z) <= 0.25)
    # sup |phi'''| = 1/(6 sqrt 3)
    fine = np.linspace(-5, 5, 200001)
    assert abs(np.abs(phi3(fine)).max() - 1 / (6 * np.sqrt(3))) < 1e-9


def test_checkpoint_round_trip(tmp_path, t6, t6_model):
    p = tmp_path / "m.json"
    t6_model.save(p)
    back = TrainedModel.load(p)
    np.testing.assert_array_equal(back.theta, t6_model.theta)
    assert back.fingerprint == t6.fingerprint
    other = Dataset(t6.features[:5], t6.labels[:5], np.ones(5), 2)
    with pytest.raises(ValueError):
        back.objective(other)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_warm_start_irrelevant(seed):
    ds = synth_gaussian_binary(15, 3, 0.8, seed % 1000)
    rng = np.random.default_rng(seed)
    keep = (rng.random(ds.n) > 0.3).astype(float)
    keep[0] = 1.0
    a = train(ds, 0.7, keep_weights=keep)
    b = train(ds, 0.7, keep_weights=keep, warm_start=rng.standard_normal(3) * 3)
    np.testing.assert_allclose(a.theta, b.theta, atol=1e-8)
