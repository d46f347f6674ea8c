import math

import numpy as np
import pytest

from grouprobe import (BoundConstants, Dataset, EffectRecord, EvalFunction, LossKind, SubsetWeights,
                       TestPoint, UndefinedStatistic, compute_constants, newton_error_bound,
                       spearman, train, underestimation_stats)
from grouprobe.bounds import f3_slack, in_selfloss_cone, pearson, upper_cone_slope
from grouprobe.model import hessian_lipschitz

# characteristic-polynomial roots of the T6 unregularized Hessian, 40-digit mpmath oracle
T6_SIGMA = (1.226505018221758998476687, 1.766536577041654573330426)


def test_t6_spectrum(t6, t6_model, t6_evals):
    c = compute_constants(t6_model, t6, t6_evals[0])
    assert abs(c.sigma_min - T6_SIGMA[0]) <= 1e-12
    assert abs(c.sigma_max - T6_SIGMA[1]) <= 1e-12
    assert c.n == 6 and c.lam == 0.5 and c.certified and not c.local


def test_squared_has_zero_hessian_lipschitz():
    Z = np.random.default_rng(0).normal(size=(7, 3))
    assert hessian_lipschitz(LossKind.SQUARED, Z) == 0.0


def test_single_point_sigma_max():
    x = np.array([[3.0, 4.0]])
    ds = Dataset(x, np.array([0]), np.ones(1), 2)
    m = train(ds, 1.0, LossKind.SQUARED)
    c = compute_constants(m, ds, EvalFunction.test_prediction(TestPoint(np.ones(2), 0)))
    assert c.sigma_max == pytest.approx(25.0, abs=1e-12)
    assert c.sigma_min == pytest.approx(0.0, abs=1e-12)


def test_bound_by_hand():
    c = BoundConstants(sigma_min=1.0, sigma_max=3.0, C_ell=2.0, C_f=0.5, C_H=0.25, C_f3=1.5,
                       lam=1.0, n=10.0)
    # 10 * 3^2 * 0.5 * 0.25 * 2^2 / 2^3
    assert newton_error_bound(c, 3.0) == pytest.approx(5.625, rel=1e-15)
    # 3^3 * 1.5 * 2^3 / (6 * 2^3)
    assert f3_slack(c, np.array([1.0, 2.0])) == pytest.approx(6.75, rel=1e-15)


def test_cone_slope():
    assert upper_cone_slope(2.0, 1.0) == 6.0
    assert upper_cone_slope(1.0, 1e6) <= 1 + 2e-6
    lams = np.logspace(-3, 3, 20)
    slopes = [upper_cone_slope(5.0, l) for l in lams]
    assert all(a > b for a, b in zip(slopes, slopes[1:]))


def test_cone_membership():
    c = BoundConstants(0.0, 2.0, 1.0, 1.0, 0.0, 0.0, 1.0, 4.0)
    assert in_selfloss_cone(c, 1.0, 1.0, 5.9)
    assert not in_selfloss_cone(c, 1.0, 1.0, 6.1)
    assert not in_selfloss_cone(c, 1.0, 1.0, 0.99)


def test_selfloss_constants_are_local(t6, t6_model):
    w = SubsetWeights.from_indices(t6, [1, 4])
    c = compute_constants(t6_model, t6, EvalFunction.self_loss(), w)
    assert c.local and not c.certified and c.C_f > 0 and c.C_f3 > 0
    with pytest.raises(ValueError):
        compute_constants(t6_model, t6, EvalFunction.self_loss())


def test_intercept_not_certified(t6, t6_evals):
    m = train(t6, 0.5, fit_intercept=True)
    assert not compute_constants(m, t6, t6_evals[0]).certified


def test_spearman_by_hand():
    # rank differences (0, 1, -1, 1, -1): 1 - 6 * 4 / (5 * 24)
    assert spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) == pytest.approx(0.8, abs=1e-15)
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-15)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_monotone_invariance():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert spearman(x, y) == pytest.approx(spearman(np.exp(x), 2 * y + 1), abs=1e-15)
    assert spearman(np.exp(x), np.arctan(y)) == pytest.approx(spearman(x, y), abs=1e-15)


def test_undefined_statistics():
    with pytest.raises(UndefinedStatistic):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedStatistic):
        pearson([1.0], [2.0])
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2, 3])


def rec(infl, act, kind="test_loss@a"):
    return EffectRecord(0, "random", 1, 0.1, kind, infl, actual=act)


def test_underestimation_by_hand():
    rs = [rec(1.0, 2.0), rec(3.0, 2.0), rec(-1.0, -2.0), rec(-1.0, -0.5),
          rec(1.0, -1.0), rec(0.5, 1.0, "test_loss@b"), rec(9.0, None)]
    per = underestimation_stats(rs, "test_loss@a")
    assert per == {"n": 5, "sign_agree_frac": 0.8, "underest_frac": 0.5,
                   "underest_frac_pos": 0.5, "underest_frac_neg": 0.5}
    pooled = underestimation_stats(rs, "test_loss")
    assert pooled["n"] == 6 and pooled["underest_frac_pos"] == pytest.approx(2 / 3)
    empty = underestimation_stats([], "self_loss")
    assert empty["n"] == 0 and all(empty[k] is None for k in empty if k != "n")
