"""First-order influence of removing groups of training points.

All effects are *removal* effects: a positive influence means removing the
group is predicted to increase ``f``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy import linalg

from .data_io import Dataset, TestPoint
from .model import (Objective, TrainedModel, design, row_curvatures, row_grads, row_losses,
                    train, weighted_hessian)

CG_TOL = 1e-10
DENSE_LIMIT = 2000


# -- domain types -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SubsetWeights:
    """Removal vector ``w`` in ``[0, 1]^n``.

    ``mass`` is the removed training mass ``sum_i w_i * base_i`` (this is
    ``||w||_1`` for unit base weights) and ``alpha`` is that mass as a fraction
    of the total.
    """

    w: np.ndarray
    alpha: float
    mass: float
    method_tag: str = ""
    id: int = 0

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_weights(cls, dataset: Dataset, w, method_tag: str = "", id: int = 0) -> "SubsetWeights":
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (dataset.n,):
            raise ValueError("subset weights must have one entry per training point")
        if not np.all(np.isfinite(w)) or w.min() < 0 or w.max() > 1:
            raise ValueError("subset weights must lie in [0, 1]")
        mass = float(w @ dataset.base_weights)
        return cls(w, mass / dataset.total_mass, mass, method_tag, id)

    @classmethod
    def from_indices(cls, dataset: Dataset, indices, method_tag: str = "", id: int = 0) -> "SubsetWeights":
        w = np.zeros(dataset.n)
        w[np.asarray(indices, dtype=np.int64)] = 1.0
        return cls.from_weights(dataset, w, method_tag, id)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.w)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.w))


def copies_of(dataset: Dataset, k: int, m: float, method_tag: str = "copies", id: int = 0) -> SubsetWeights:
    """Removal of ``m`` units of mass from the rows identical to row ``k``.

    Rows are consumed in index order, each up to its base weight, so integer
    ``m`` with unit weights removes ``m`` duplicate rows.
    """
    same = np.flatnonzero(np.all(dataset.features == dataset.features[k], axis=1)
                          & (dataset.labels == dataset.labels[k]))
    avail = float(dataset.base_weights[same].sum())
    if m > avail * (1 + 1e-12):
        raise ValueError(f"only {avail:g} copies of point {k} are present, cannot remove {m:g}")
    w = np.zeros(dataset.n)
    left = float(m)
    for i in same:
        b = dataset.base_weights[i]
        if left <= 0 or b == 0:
            continue
        take = min(b, left)
        w[i] = take / b
        left -= take
    return SubsetWeights.from_weights(dataset, w, method_tag, id)


class EvalKind(str, Enum):
    TEST_PREDICTION = "test_prediction"
    TEST_LOSS = "test_loss"
    SELF_LOSS = "self_loss"


@dataclass(frozen=True)
class EvalFunction:
    """The quantity ``f(theta)`` whose change is measured.

    ``SELF_LOSS`` is ``sum_i w_i base_i loss_i(theta)`` and takes its ``w``
    from the subset it is evaluated on.
    """

    kind: EvalKind
    point: Optional[TestPoint] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EvalKind(self.kind))
        if self.kind is not EvalKind.SELF_LOSS and self.point is None:
            raise ValueError(f"{self.kind.value} needs a test point")
        if self.kind is EvalKind.TEST_LOSS and self.point.y is None:
            raise ValueError("test loss needs a labelled test point")

    @classmethod
    def test_prediction(cls, point) -> "EvalFunction":
        if not isinstance(point, TestPoint):
            point = TestPoint(point)
        return cls(EvalKind.TEST_PREDICTION, point)

    @classmethod
    def test_loss(cls, point: TestPoint) -> "EvalFunction":
        return cls(EvalKind.TEST_LOSS, point)

    @classmethod
    def self_loss(cls) -> "EvalFunction":
        return cls(EvalKind.SELF_LOSS)

    @property
    def label(self) -> str:
        if self.kind is EvalKind.SELF_LOSS:
            return self.kind.value
        return f"{self.kind.value}@{self.point.name}"


CSV_COLUMNS = ("subset_id", "method_tag", "size", "alpha", "eval_kind", "influence", "newton",
               "actual", "param_pred", "err_nt_act", "err_nt_inf")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class EffectRecord:
    subset_id: int
    method_tag: str
    size: int
    alpha: float
    eval_kind: str
    influence: float
    newton: Optional[float] = None
    actual: Optional[float] = None
    param_pred: Optional[float] = None
    err_nt_act: Optional[float] = None
    err_nt_inf: Optional[float] = None
    error: Optional[str] = field(default=None, compare=False)

    def fill_errors(self) -> None:
        if self.newton is not None:
            self.err_nt_inf = self.newton - self.influence
            if self.actual is not None:
                self.err_nt_act = self.actual - self.newton

    def to_row(self) -> list:
        return [_fmt(getattr(self, c)) if c not in ("method_tag", "eval_kind") else getattr(self, c)
                for c in CSV_COLUMNS]

    @classmethod
    def from_row(cls, row: dict) -> "EffectRecord":
        def num(key):
            v = row.get(key, "")
            return None if v in ("", None) else float(v)
        return cls(int(row["subset_id"]), row["method_tag"], int(row["size"]), float(row["alpha"]),
                   row["eval_kind"], float(row["influence"]), num("newton"), num("actual"),
                   num("param_pred"), num("err_nt_act"), num("err_nt_inf"))


# -- engine -------------------------------------------------------------------

def conjugate_gradient(matvec, b, tol=CG_TOL, max_iter=None):
    """Solve ``A x = b`` for symmetric positive definite ``A`` given ``A @ v``.

    Stops when ``||r|| <= tol * ||b||`` or after ``max_iter`` (default ``10 * len(b)``).
    """
    b = np.asarray(b, dtype=np.float64)
    max_iter = 10 * b.size if max_iter is None else max_iter
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = (tol * np.linalg.norm(b)) ** 2
    for _ in range(max_iter):
        if rr <= stop:
            break
        Ap = matvec(p)
        a = rr / (p @ Ap)
        x += a * p
        r -= a * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


class InfluenceEngine:
    """Quantities at ``theta_hat(1)`` shared by every subset.

    The regularized Hessian is factorized once; per-subset work is a solve
    (influence) or one reweighted factorization (Newton).
    """

    def __init__(self, model: TrainedModel, dataset: Dataset, solver: str = "auto"):
        self.model = model
        self.dataset = dataset
        self.obj: Objective = model.objective(dataset)
        self.theta = model.theta
        if solver == "auto":
            solver = "cholesky" if self.obj.q <= DENSE_LIMIT else "cg"
        if solver not in ("cholesky", "cg"):
            raise ValueError(f"unknown solver {solver!r}")
        self.solver = solver
        b = dataset.base_weights
        # per-point gradients already multiplied by base weights
        self.G = row_grads(self.obj.kind, self.obj.Z, self.obj.ids, self.theta) * b[:, None]
        self._H = None
        self._chol = None
        self._eig = None
        self._h1_eigs = None
        self._curv = None

    # Hessians
    @property
    def H(self) -> np.ndarray:
        """``H_{lam,1}``: full regularized Hessian at ``theta_hat``."""
        if self._H is None:
            self._H = self.obj.hessian(self.theta, self.dataset.base_weights)
        return self._H

    @property
    def H1(self) -> np.ndarray:
        """Unregularized Hessian ``H_1``."""
        H = self.H.copy()
        H[np.diag_indices_from(H)] -= self.obj.lam * self.obj.mask
        return H

    def removed_hessian(self, w) -> np.ndarray:
        """``H_1(w) = sum_i w_i base_i hess loss_i`` (no ridge)."""
        w = np.asarray(w)
        supp = np.flatnonzero(w)
        s = w[supp] * self.dataset.base_weights[supp]
        return weighted_hessian(self.obj.kind, self.obj.Z[supp], self.obj.ids[supp], self.theta, s)

    def h1_eigenvalues(self) -> np.ndarray:
        if self._h1_eigs is None:
            self._h1_eigs = np.linalg.eigvalsh(self.H1)
        return self._h1_eigs

    def inv_sqrt(self) -> np.ndarray:
        """``H_{lam,1}^{-1/2}`` from a symmetric eigendecomposition."""
        if self._eig is None:
            ev, U = np.linalg.eigh(self.H)
            floor = self.obj.lam * (1 - 1e-12) if not self.obj.fit_intercept else 1e-300
            ev = np.maximum(ev, floor)
            self._eig = (U / np.sqrt(ev)) @ U.T
        return self._eig

    # solves
    def _matvec(self, v):
        if not self.model.binary:
            return self.H @ v
        if self._curv is None:
            self._curv = self.dataset.base_weights * row_curvatures(
                self.obj.kind, self.obj.Z, self.obj.ids, self.theta)
        Z = self.obj.Z
        return Z.T @ (self._curv * (Z @ v)) + self.obj.lam * self.obj.mask * v

    def solve(self, v) -> np.ndarray:
        """``H_{lam,1}^{-1} v``."""
        if self.solver == "cg":
            return conjugate_gradient(self._matvec, v)
        if self._chol is None:
            self._chol = linalg.cho_factor(self.H, lower=True)
        return linalg.cho_solve(self._chol, v)

    def solve_reweighted(self, w, v) -> np.ndarray:
        """``H_{lam,1}(1 - w)^{-1} v``."""
        Hw = self.removed_hessian(w)
        if self.solver == "cg":
            return conjugate_gradient(lambda u: self._matvec(u) - Hw @ u, v)
        return linalg.cho_solve(linalg.cho_factor(self.H - Hw, lower=True), v)

    # subsets and evaluation functions
    def g(self, w) -> np.ndarray:
        """``g_1(w) = sum_i w_i base_i grad loss_i(theta_hat)``."""
        return np.asarray(w) @ self.G

    def _test_row(self, f: EvalFunction):
        f.point.check(self.dataset, need_label=f.kind is EvalKind.TEST_LOSS)
        return design(f.point.x, self.obj.fit_intercept)

    def grad_f(self, f: EvalFunction, w=None) -> np.ndarray:
        if f.kind is EvalKind.SELF_LOSS:
            return self.g(w)
        z = self._test_row(f)
        if f.kind is EvalKind.TEST_PREDICTION:
            if not self.model.binary:
                raise ValueError("test prediction is not defined for multiclass models")
            return z[0]
        return row_grads(self.obj.kind, z, np.array([f.point.y]), self.theta)[0]

    def f_value(self, f: EvalFunction, theta, w=None) -> float:
        if f.kind is EvalKind.SELF_LOSS:
            w = np.asarray(w)
            supp = np.flatnonzero(w)
            losses = row_losses(self.obj.kind, self.obj.Z[supp], self.obj.ids[supp], theta)
            return float((w[supp] * self.dataset.base_weights[supp]) @ losses)
        z = self._test_row(f)
        if f.kind is EvalKind.TEST_PREDICTION:
            if not self.model.binary:
                raise ValueError("test prediction is not defined for multiclass models")
            return float(z[0] @ theta)
        return float(row_losses(self.obj.kind, z, np.array([f.point.y]), theta)[0])

    def effect_at(self, f: EvalFunction, theta, w=None) -> float:
        """``f(theta) - f(theta_hat)``."""
        return self.f_value(f, theta, w) - self.f_value(f, self.theta, w)

    # influence
    def pointwise_influence(self, f: EvalFunction) -> np.ndarray:
        if f.kind is EvalKind.SELF_LOSS:
            raise ValueError("self-loss influence is not additive over points")
        return self.G @ self.solve(self.grad_f(f))

    def param_delta(self, w) -> np.ndarray:
        return self.solve(self.g(w))

    def group_influence(self, w, f: EvalFunction) -> float:
        gw = self.g(w)
        if f.kind is EvalKind.SELF_LOSS:
            return float(gw @ self.solve(gw))
        return float(self.grad_f(f) @ self.solve(gw))


_ENGINES: "weakref.WeakKeyDictionary[TrainedModel, InfluenceEngine]" = weakref.WeakKeyDictionary()


def engine_for(model: TrainedModel, dataset: Dataset) -> InfluenceEngine:
    """Cached engine for a (model, dataset) pair."""
    eng = _ENGINES.get(model)
    if eng is None or eng.dataset is not dataset:
        eng = InfluenceEngine(model, dataset)
        _ENGINES[model] = eng
    return eng


def as_vector(w, n: int) -> np.ndarray:
    v = w.w if isinstance(w, SubsetWeights) else np.asarray(w, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError("subset weights must have one entry per training point")
    return v


WeightsLike = Union[SubsetWeights, np.ndarray]


def pointwise_influence(model: TrainedModel, dataset: Dataset, f: EvalFunction) -> np.ndarray:
    """Influence of removing each point alone (base weights included)."""
    return engine_for(model, dataset).pointwise_influence(f)


def group_influence(model: TrainedModel, dataset: Dataset, w: WeightsLike, f: EvalFunction) -> float:
    eng = engine_for(model, dataset)
    return eng.group_influence(as_vector(w, dataset.n), f)


def param_influence_delta(model: TrainedModel, dataset: Dataset, w: WeightsLike) -> np.ndarray:
    """Parameter change predicted by influence, ``H_{lam,1}^{-1} g_1(w)``."""
    return engine_for(model, dataset).param_delta(as_vector(w, dataset.n))


def predicted_effect_via_params(model: TrainedModel, dataset: Dataset, w: WeightsLike,
                                f: EvalFunction) -> float:
    """Evaluate ``f`` at the influence-predicted parameters instead of linearizing it."""
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    return eng.effect_at(f, eng.theta + eng.param_delta(wv), wv)


def interpolated_effect(model: TrainedModel, dataset: Dataset, w: WeightsLike, f: EvalFunction,
                        t: float, tol: Optional[float] = None) -> float:
    """``q_w(t) - q_w(0)`` with ``q_w(t) = f(theta_hat(1 - t w))``, by retraining."""
    if not 0 <= t <= 1:
        raise ValueError("t must lie in [0, 1]")
    eng = engine_for(model, dataset)
    wv = as_vector(w, dataset.n)
    if t == 0:
        return 0.0
    m = train(dataset, model.lam, model.loss_kind, keep_weights=1.0 - t * wv,
              fit_intercept=model.fit_intercept, warm_start=model.theta, tol=tol)
    return eng.effect_at(f, m.theta, wv)
