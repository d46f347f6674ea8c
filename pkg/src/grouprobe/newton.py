"""One-step Newton approximation of group removal, and the error matrix.

The Newton step re-solves the quadratic model at ``theta_hat(1)`` with the
removed points' curvature taken out of the Hessian, so unlike influence it
needs one factorization per subset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data_io import Dataset
from .influence import EvalFunction, EvalKind, WeightsLike, as_vector, engine_for
from .model import TrainedModel, design, row_curvatures

SPECTRUM_DIM_LIMIT = 5000


@dataclass(frozen=True)
class NewtonDiag:
    delta_newton: np.ndarray
    d_spectrum: np.ndarray
    v_w: np.ndarray
    v_test: Optional[np.ndarray] = None


def newton_delta(model: TrainedModel, dataset: Dataset, w: WeightsLike) -> np.ndarray:
    """``H_{lam,1}(1 - w)^{-1} g_1(w)``."""
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    if not wv.any():
        return np.zeros_like(eng.theta)
    return eng.solve_reweighted(wv, eng.g(wv))


def newton_effect(model: TrainedModel, dataset: Dataset, w: WeightsLike, f: EvalFunction) -> float:
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    return eng.effect_at(f, eng.theta + newton_delta(model, dataset, wv), wv)


def _error_matrix_eig(model, dataset, wv):
    eng = engine_for(model, dataset)
    if eng.obj.q > SPECTRUM_DIM_LIMIT:
        raise ValueError(f"parameter dimension {eng.obj.q} exceeds the dense spectrum limit "
                         f"({SPECTRUM_DIM_LIMIT})")
    S = eng.inv_sqrt()
    A = S @ eng.removed_hessian(wv) @ S
    a, V = np.linalg.eigh(0.5 * (A + A.T))
    # D = (I - A)^{-1} - I shares A's eigenvectors, eigenvalue a / (1 - a)
    return a / (1.0 - a), V


def error_matrix(model: TrainedModel, dataset: Dataset, w: WeightsLike) -> np.ndarray:
    """Dense ``D(w) = (I - H^{-1/2} H_1(w) H^{-1/2})^{-1} - I``."""
    dv, V = _error_matrix_eig(model, dataset, as_vector(w, dataset.n))
    return (V * dv) @ V.T


def error_matrix_spectrum(model: TrainedModel, dataset: Dataset, w: WeightsLike) -> np.ndarray:
    """Eigenvalues of ``D(w)``, ascending."""
    return np.sort(_error_matrix_eig(model, dataset, as_vector(w, dataset.n))[0])


def newton_diagnostics(model: TrainedModel, dataset: Dataset, w: WeightsLike,
                       f: Optional[EvalFunction] = None) -> NewtonDiag:
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    S = eng.inv_sqrt()
    v_test = None
    if f is not None and f.kind is EvalKind.TEST_PREDICTION:
        v_test = S @ eng.grad_f(f)
    return NewtonDiag(newton_delta(model, dataset, wv), error_matrix_spectrum(model, dataset, wv),
                      S @ eng.g(wv), v_test)


def single_point_scale(model: TrainedModel, dataset: Dataset, k: int, m: float) -> float:
    """Closed-form ratio of Newton to influence when removing ``m`` copies of point ``k``.

    Returns ``1 / (1 - m * phi''_k * z_k^T H_{lam,1}^{-1} z_k)`` for margin losses.
    """
    if not model.binary:
        raise ValueError("the single-point scale needs a binary margin model")
    if m < 0:
        raise ValueError("multiplicity must be nonnegative")
    eng = engine_for(model, dataset)
    z = design(dataset.features[k], model.fit_intercept)
    curv = row_curvatures(model.loss_kind, z, dataset.labels[k:k + 1], model.theta)[0]
    denom = 1.0 - m * curv * float(z[0] @ eng.solve(z[0]))
    if denom <= 0:
        raise ValueError("removal exceeds training mass in this direction")
    return 1.0 / denom


def decompose_error(model: TrainedModel, dataset: Dataset, w: WeightsLike, f: EvalFunction,
                    actual: float) -> tuple[float, float]:
    """Split ``actual - influence`` into ``(actual - newton, newton - influence)``."""
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    nt = newton_effect(model, dataset, wv, f)
    inf = eng.group_influence(wv, f)
    return actual - nt, nt - inf
