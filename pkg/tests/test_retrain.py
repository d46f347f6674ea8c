import numpy as np
import pytest

from grouprobe import (EvalFunction, LossKind, SubsetWeights, actual_effect, batch_actual_effects,
                       newton_effect, retrain_many, train)
from grouprobe.retrain import retrained_params

from conftest import T6_LAMBDA, random_subsets

# x_test^T (theta_hat(without j) - theta_hat) at x_test = (0.7, -0.4); 40-digit mpmath LOO oracle
LOO_T6 = (-0.09566215336594130893652019, -0.1284282775629407986535704, -0.1373372848452764651896789,
          -0.09566215336594130893652019, 0.388255588506257757071415, -0.125166081535352162849577)


def test_loo_matches_oracle(t6, t6_model, t6_evals):
    f = t6_evals[0]
    for j in range(6):
        w = SubsetWeights.from_indices(t6, [j])
        assert abs(actual_effect(t6_model, t6, w, f) - LOO_T6[j]) <= 1e-9


def test_loo_brute_force(t6, t6_model, t6_evals):
    """Independent route: train on the reduced dataset itself."""
    for j in range(6):
        keep = [i for i in range(6) if i != j]
        m = train(t6.take(keep), T6_LAMBDA)
        f = t6_evals[1]
        w = SubsetWeights.from_indices(t6, [j])
        eng_f = lambda th: np.log1p(np.exp(-(1.0 if f.point.y == 1 else -1.0) * (f.point.x @ th)))
        assert abs(actual_effect(t6_model, t6, w, f) - (eng_f(m.theta) - eng_f(t6_model.theta))) <= 1e-9


def test_empty_removal(t6, t6_model, t6_evals):
    w = SubsetWeights.from_weights(t6, np.zeros(6))
    for f in t6_evals:
        assert actual_effect(t6_model, t6, w, f) == 0.0
    assert batch_actual_effects(t6_model, t6, [], t6_evals[0]) == []


def test_squared_actual_equals_newton(syn200):
    m = train(syn200, 1.0, LossKind.SQUARED)
    f = EvalFunction.self_loss()
    for w in random_subsets(syn200, 10, seed=2):
        assert abs(actual_effect(m, syn200, w, f) - newton_effect(m, syn200, w, f)) <= 1e-8


def test_warm_and_cold_agree(syn200, syn200_model):
    for w in random_subsets(syn200, 20, seed=11):
        cold = train(syn200, syn200_model.lam, keep_weights=1 - w.w).theta
        np.testing.assert_allclose(retrained_params(syn200_model, syn200, w), cold, atol=1e-8)


def test_selfloss_actual_nonnegative(syn200, syn200_model):
    f = EvalFunction.self_loss()
    for w in random_subsets(syn200, 30, seed=12, fractional=True):
        assert actual_effect(syn200_model, syn200, w, f) >= -1e-9


def test_batch_order_and_parallel_identity(t6, t6_model, t6_evals):
    rng = np.random.default_rng(0)
    subsets = []
    for i in range(100):
        w = (rng.random(6) < 0.4) * rng.uniform(0.3, 1.0, 6)
        subsets.append(SubsetWeights.from_weights(t6, w, "random", i))
    serial = batch_actual_effects(t6_model, t6, subsets, t6_evals, parallelism=1)
    pooled = batch_actual_effects(t6_model, t6, subsets, t6_evals, parallelism=3)
    assert [r.to_row() for r in serial] == [r.to_row() for r in pooled]
    assert [r.subset_id for r in serial[::3]] == list(range(100))
    for s, r in zip(subsets, serial[1::3]):
        assert r.actual == actual_effect(t6_model, t6, s, t6_evals[1])


def test_failures_are_recorded(t6, t6_model, monkeypatch):
    import grouprobe.retrain as rt
    from grouprobe.model import ConvergenceError

    real = rt._retrain

    def flaky(dataset, model, wv, tol=None):
        if wv[0] > 0:
            raise ConvergenceError("forced", 1.0)
        return real(dataset, model, wv, tol)

    monkeypatch.setattr(rt, "_retrain", flaky)
    subs = [SubsetWeights.from_indices(t6, [0], id=0), SubsetWeights.from_indices(t6, [1], id=1)]
    out = retrain_many(t6_model, t6, subs)
    assert isinstance(out[0], ConvergenceError) and isinstance(out[1], np.ndarray)
    recs = batch_actual_effects(t6_model, t6, subs, EvalFunction.self_loss())
    assert recs[0].actual is None and recs[0].error and recs[1].actual is not None
    with pytest.raises(rt.SubsetRetrainError) as err:
        actual_effect(t6_model, t6, subs[0], EvalFunction.self_loss())
    assert err.value.subset_id == 0
