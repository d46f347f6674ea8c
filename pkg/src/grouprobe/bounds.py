"""Spectral constants, the Newton error bounds, and summary statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.stats import rankdata

from .data_io import Dataset
from .influence import (EffectRecord, EvalFunction, EvalKind, SubsetWeights, as_vector,
                        engine_for)
from .model import (LOGISTIC_PHI3_SUP, LossKind, TrainedModel, hessian_lipschitz, row_grads,
                    row_third_bound)
from .newton import SPECTRUM_DIM_LIMIT, newton_delta

SEGMENT_SAMPLES = 33


class UndefinedStatistic(ValueError):
    """A statistic has no value on the given input (empty or constant data)."""


@dataclass(frozen=True)
class BoundConstants:
    """Constants entering the removal-error bounds.

    ``sigma_*`` are extreme eigenvalues of the unregularized Hessian.  ``n`` is
    the total training mass.  ``local`` marks ``C_f``/``C_f3`` measured along
    the Newton segment of one subset instead of global suprema; such bounds
    are diagnostics, not certificates.
    """

    sigma_min: float
    sigma_max: float
    C_ell: float
    C_f: float
    C_H: float
    C_f3: float
    lam: float
    n: float
    local: bool = False
    certified: bool = True


def compute_constants(model: TrainedModel, dataset: Dataset, f: EvalFunction,
                      w: Optional[Union[SubsetWeights, np.ndarray]] = None) -> BoundConstants:
    """Bound constants for ``f``; self-loss needs the subset ``w`` it is bound to."""
    eng = engine_for(model, dataset)
    if eng.obj.q > SPECTRUM_DIM_LIMIT:
        raise ValueError(f"parameter dimension {eng.obj.q} exceeds the dense spectrum limit "
                         f"({SPECTRUM_DIM_LIMIT})")
    ev = eng.h1_eigenvalues()
    sig_min, sig_max = max(float(ev[0]), 0.0), max(float(ev[-1]), 0.0)
    kind = model.loss_kind
    Z, ids = eng.obj.Z, eng.obj.ids
    live = dataset.base_weights > 0
    c_ell = float(np.max(np.linalg.norm(row_grads(kind, Z[live], ids[live], eng.theta), axis=1)))
    c_h = hessian_lipschitz(kind, Z)
    local = False
    if f.kind is EvalKind.SELF_LOSS:
        if w is None:
            raise ValueError("self-loss constants need the subset weights")
        wv = as_vector(w, dataset.n)
        c_f, c_f3 = _selfloss_local(model, dataset, wv)
        local = True
    else:
        xn = float(np.linalg.norm(eng._test_row(f)[0]))
        if f.kind is EvalKind.TEST_PREDICTION:
            c_f, c_f3 = xn, 0.0
        elif kind is LossKind.LOGISTIC:
            c_f, c_f3 = xn, LOGISTIC_PHI3_SUP * xn ** 3
        elif kind is LossKind.SOFTMAX:
            c_f, c_f3 = math.sqrt(2.0) * xn, 2.0 * xn ** 3
        else:
            # squared test loss has an unbounded gradient; use its value at theta_hat
            c_f = float(np.linalg.norm(eng.grad_f(f)))
            c_f3 = 0.0
            local = True
    return BoundConstants(sig_min, sig_max, c_ell, c_f, c_h, c_f3, model.lam,
                          dataset.total_mass, local, certified=not (local or model.fit_intercept))


def _selfloss_local(model, dataset, wv):
    eng = engine_for(model, dataset)
    supp = np.flatnonzero(wv)
    if supp.size == 0:
        return 0.0, 0.0
    s = wv[supp] * dataset.base_weights[supp]
    Z, ids = eng.obj.Z[supp], eng.obj.ids[supp]
    step = newton_delta(model, dataset, wv)
    c_f = c_f3 = 0.0
    for t in np.linspace(0.0, 1.0, SEGMENT_SAMPLES):
        th = eng.theta + t * step
        c_f = max(c_f, float(np.linalg.norm(s @ row_grads(model.loss_kind, Z, ids, th))))
        c_f3 = max(c_f3, float(s @ row_third_bound(model.loss_kind, Z, ids, th)))
    return c_f, c_f3


def _mass(w) -> float:
    if isinstance(w, SubsetWeights):
        return w.mass
    if np.ndim(w) == 0:
        return float(w)
    return float(np.sum(w))


def newton_error_bound(c: BoundConstants, w) -> float:
    """Bound on ``|actual - newton|``: ``n ||w||_1^2 C_f C_H C_ell^2 / (sigma_min + lam)^3``.

    ``w`` may be a :class:`SubsetWeights` or the removed mass itself.
    """
    m = _mass(w)
    return c.n * m * m * c.C_f * c.C_H * c.C_ell ** 2 / (c.sigma_min + c.lam) ** 3


def f3_slack(c: BoundConstants, w) -> float:
    """Bound on the third-order residual of ``f``: ``||w||_1^3 C_f3 C_ell^3 / (6 (sigma_min + lam)^3)``."""
    m = _mass(w)
    return m ** 3 * c.C_f3 * c.C_ell ** 3 / (6.0 * (c.sigma_min + c.lam) ** 3)


def upper_cone_slope(sigma_max: float, lam: float) -> float:
    r = sigma_max / lam
    return 1.0 + 1.5 * r + 0.5 * r * r


def selfloss_cone(c: BoundConstants) -> tuple[float, float, Callable[[object], float]]:
    """``(lower_slope, upper_slope, slack)`` for the self-loss Newton effect."""
    return 1.0, upper_cone_slope(c.sigma_max, c.lam), lambda w: f3_slack(c, w)


def in_selfloss_cone(c: BoundConstants, w, influence: float, newton: float,
                     atol: float = 0.0) -> bool:
    lo, up, slack = selfloss_cone(c)
    return lo * influence - atol <= newton <= up * influence + slack(w) + atol


# -- statistics ---------------------------------------------------------------

def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if x.size < 2:
        raise UndefinedStatistic("correlation needs at least two pairs")
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = math.sqrt(x @ x), math.sqrt(y @ y)
    if sx == 0 or sy == 0:
        raise UndefinedStatistic("correlation is undefined for constant input")
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties.

    Raises :class:`UndefinedStatistic` when either side has zero rank variance.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if x.size < 2:
        raise UndefinedStatistic("rank correlation needs at least two pairs")
    return pearson(rankdata(x), rankdata(y))


def _matches(label: str, kind: str) -> bool:
    return label == kind or label.startswith(kind + "@")


def underestimation_stats(records: Iterable[EffectRecord], eval_kind: str) -> dict:
    """Sign agreement and underestimation fractions for one evaluation function.

    ``eval_kind`` is either a bare kind (``"test_loss"``, matching every test
    point) or a full label such as ``"test_loss@t3"``.  Fractions with an
    empty denominator are ``None``.
    """
    rs = [r for r in records if _matches(r.eval_kind, eval_kind) and r.actual is not None]

    def frac(num, den):
        return None if den == 0 else num / den

    agree = [r for r in rs if np.sign(r.influence) == np.sign(r.actual)]
    pos = [r for r in agree if r.actual > 0]
    neg = [r for r in agree if r.actual < 0]
    under = lambda group: sum(abs(r.influence) <= abs(r.actual) for r in group)
    return {
        "n": len(rs),
        "sign_agree_frac": frac(len(agree), len(rs)),
        "underest_frac": frac(under(agree), len(agree)),
        "underest_frac_pos": frac(under(pos), len(pos)),
        "underest_frac_neg": frac(under(neg), len(neg)),
    }
