"""L2-regularized convex linear models and their per-point derivatives.

Training minimizes ``sum_i s_i * loss_i(theta) + lam/2 * ||theta_w||^2`` where
``s_i = base_weight_i * keep_i`` and ``theta_w`` excludes the intercept.
Parameters are always handled as one flat vector: ``[w, b]`` for binary
models and the row-major ``(K, p)`` weight matrix for softmax.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp, softmax

from .data_io import Dataset

log = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MAX_NEWTON_STEPS = 200
# sup |phi'''| for phi(z) = log(1 + e^-z), attained at sigmoid(z) = (3 -+ sqrt 3)/6
LOGISTIC_PHI3_SUP = 1.0 / (6.0 * math.sqrt(3.0))


class LossKind(str, Enum):
    LOGISTIC = "logistic"
    SOFTMAX = "softmax"
    SQUARED = "squared"


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def default_tol(n: int) -> float:
    return 1e-10 * max(1, n)


def design(X: np.ndarray, fit_intercept: bool) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if fit_intercept:
        return np.hstack([X, np.ones((X.shape[0], 1))])
    return X


# -- logistic margin loss phi(z) = log(1 + exp(-z)) and derivatives ----------

def phi(z):
    return np.logaddexp(0.0, -z)


def phi1(z):
    return -expit(-z)


def phi2(z):
    return expit(z) * expit(-z)


def phi3(z):
    s = expit(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


# -- row-wise primitives ------------------------------------------------------

def _signs(ids):
    return 2.0 * np.asarray(ids, dtype=np.float64) - 1.0


def row_losses(kind: LossKind, Z, ids, theta) -> np.ndarray:
    if kind is LossKind.LOGISTIC:
        return phi(_signs(ids) * (Z @ theta))
    if kind is LossKind.SQUARED:
        return 0.5 * (Z @ theta - _signs(ids)) ** 2
    A = Z @ theta.reshape(-1, Z.shape[1]).T
    return logsumexp(A, axis=1) - A[np.arange(len(ids)), ids]


def row_grads(kind: LossKind, Z, ids, theta) -> np.ndarray:
    """Per-row loss gradients, shape ``(rows, q)``."""
    if kind is LossKind.LOGISTIC:
        y = _signs(ids)
        return (y * phi1(y * (Z @ theta)))[:, None] * Z
    if kind is LossKind.SQUARED:
        return (Z @ theta - _signs(ids))[:, None] * Z
    K = theta.size // Z.shape[1]
    P = softmax(Z @ theta.reshape(K, -1).T, axis=1)
    P[np.arange(len(ids)), ids] -= 1.0
    return (P[:, :, None] * Z[:, None, :]).reshape(len(ids), -1)


def row_curvatures(kind: LossKind, Z, ids, theta) -> np.ndarray:
    """Second derivative of a margin loss w.r.t. its margin (binary kinds)."""
    if kind is LossKind.LOGISTIC:
        return phi2(_signs(ids) * (Z @ theta))
    if kind is LossKind.SQUARED:
        return np.ones(Z.shape[0])
    raise ValueError("curvature along the margin is only defined for binary losses")


def weighted_hessian(kind: LossKind, Z, ids, theta, s) -> np.ndarray:
    """``sum_i s_i * hess loss_i(theta)`` without the ridge term."""
    s = np.asarray(s, dtype=np.float64)
    if kind is not LossKind.SOFTMAX:
        c = s * row_curvatures(kind, Z, ids, theta)
        return (Z * c[:, None]).T @ Z
    p = Z.shape[1]
    K = theta.size // p
    P = softmax(Z @ theta.reshape(K, p).T, axis=1)
    H = np.zeros((K * p, K * p))
    for k in range(K):
        H[k * p:(k + 1) * p, k * p:(k + 1) * p] = (Z * (s * P[:, k])[:, None]).T @ Z
    U = (P[:, :, None] * Z[:, None, :]).reshape(len(ids), -1)
    H -= (U * s[:, None]).T @ U
    return 0.5 * (H + H.T)


def row_third_bound(kind: LossKind, Z, ids, theta) -> np.ndarray:
    """Per-row bound on ``sup_{|v|=1} ||<grad^3 loss_i(theta), v>||_op``."""
    r3 = np.linalg.norm(Z, axis=1) ** 3
    if kind is LossKind.LOGISTIC:
        return np.abs(phi3(_signs(ids) * (Z @ theta))) * r3
    if kind is LossKind.SQUARED:
        return np.zeros(Z.shape[0])
    # third directional derivative of log-sum-exp is bounded by 2 |u|_inf^3
    return 2.0 * r3


def hessian_lipschitz(kind: LossKind, Z) -> float:
    """Global Lipschitz constant of ``theta -> hess loss(x, y, theta)`` over the rows."""
    if kind is LossKind.SQUARED:
        return 0.0
    rmax = float(np.max(np.linalg.norm(Z, axis=1)))
    if kind is LossKind.LOGISTIC:
        return LOGISTIC_PHI3_SUP * rmax ** 3
    return 2.0 * rmax ** 3


# -- objective ----------------------------------------------------------------

class Objective:
    """Weighted regularized risk for one dataset and model family."""

    def __init__(self, dataset: Dataset, loss_kind, lam: float, fit_intercept: bool = False):
        loss_kind = LossKind(loss_kind)
        if not lam > 0:
            raise ValueError("lambda must be > 0")
        if loss_kind is not LossKind.SOFTMAX and dataset.K != 2:
            raise ValueError(f"{loss_kind.value} loss needs a binary dataset (K=2), got K={dataset.K}")
        if loss_kind is LossKind.SOFTMAX and fit_intercept:
            raise ValueError("softmax with an unpenalized intercept has no unique optimum")
        self.dataset = dataset
        self.kind = loss_kind
        self.lam = float(lam)
        self.fit_intercept = fit_intercept
        self.Z = design(dataset.features, fit_intercept)
        self.ids = dataset.labels
        p = self.Z.shape[1]
        blocks = dataset.K if loss_kind is LossKind.SOFTMAX else 1
        mask = np.ones(p)
        if fit_intercept:
            mask[-1] = 0.0
        self.mask = np.tile(mask, blocks)
        self.q = p * blocks

    def weights(self, keep=None) -> np.ndarray:
        b = self.dataset.base_weights
        if keep is None:
            return b.copy()
        keep = np.asarray(keep, dtype=np.float64)
        if keep.shape != b.shape:
            raise ValueError("keep_weights must have one entry per training point")
        if not np.all(np.isfinite(keep)) or keep.min() < 0 or keep.max() > 1:
            raise ValueError("keep_weights must lie in [0, 1]")
        s = b * keep
        if not (s > 0).any():
            raise ValueError("no training mass left after reweighting")
        return s

    def value(self, theta, s) -> float:
        reg = 0.5 * self.lam * float(np.sum(self.mask * theta * theta))
        return float(s @ row_losses(self.kind, self.Z, self.ids, theta)) + reg

    def gradient(self, theta, s) -> np.ndarray:
        G = row_grads(self.kind, self.Z, self.ids, theta)
        return s @ G + self.lam * self.mask * theta

    def hessian(self, theta, s, regularize: bool = True) -> np.ndarray:
        H = weighted_hessian(self.kind, self.Z, self.ids, theta, s)
        if regularize:
            H[np.diag_indices_from(H)] += self.lam * self.mask
        return H


def _newton_direction(H, g):
    try:
        return -linalg.cho_solve(linalg.cho_factor(H, lower=True), g)
    except linalg.LinAlgError:
        return -np.linalg.lstsq(H, g, rcond=None)[0]


def minimize(obj: Objective, s, theta0=None, tol=None, max_iter=MAX_NEWTON_STEPS):
    """Damped Newton with Armijo backtracking.  Returns ``(theta, grad_norm, iters)``."""
    n = obj.dataset.n
    tol = default_tol(n) if tol is None else tol
    theta = np.zeros(obj.q) if theta0 is None else np.array(theta0, dtype=np.float64)
    if theta.shape != (obj.q,):
        raise ValueError(f"warm start has shape {theta.shape}, expected ({obj.q},)")
    for it in range(max_iter + 1):
        g = obj.gradient(theta, s)
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return theta, gnorm, it
        if it == max_iter:
            break
        step = _newton_direction(obj.hessian(theta, s), g)
        L = obj.value(theta, s)
        slope = float(g @ step)
        # roundoff allowance so the quadratic regime is not rejected by noise in L
        slack = 1e-13 * (1.0 + abs(L))
        t = 1.0
        while obj.value(theta + t * step, s) > L + ARMIJO_C * t * slope + slack:
            t *= 0.5
            if t < 1e-14:
                raise ConvergenceError("line search failed", gnorm)
        theta = theta + t * step
    raise ConvergenceError(f"no convergence within {max_iter} Newton steps", gnorm)


# -- trained model ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrainedModel:
    theta: np.ndarray
    loss_kind: LossKind
    lam: float
    fit_intercept: bool
    n_classes: int
    n_features: int
    grad_norm: float
    n_iter: int
    fingerprint: str

    def __post_init__(self):
        t = np.array(self.theta, dtype=np.float64)
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))

    @property
    def binary(self) -> bool:
        return self.loss_kind is not LossKind.SOFTMAX

    @property
    def coef(self) -> np.ndarray:
        p = self.n_features + int(self.fit_intercept)
        if self.binary:
            return self.theta[:self.n_features]
        return self.theta.reshape(self.n_classes, p)[:, :self.n_features]

    @property
    def intercept(self):
        if not self.fit_intercept:
            return None
        return float(self.theta[-1])

    def objective(self, dataset: Dataset) -> Objective:
        if dataset.fingerprint != self.fingerprint:
            raise ValueError("dataset does not match the one this model was trained on")
        return Objective(dataset, self.loss_kind, self.lam, self.fit_intercept)

    def decision(self, X) -> np.ndarray:
        """Linear scores ``theta^T z`` (binary) or logits (softmax)."""
        Z = design(X, self.fit_intercept)
        if self.binary:
            return Z @ self.theta
        return Z @ self.theta.reshape(self.n_classes, -1).T

    def losses(self, X, ids, theta=None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return row_losses(self.loss_kind, design(X, self.fit_intercept), np.asarray(ids, dtype=np.int64), th)

    def to_dict(self) -> dict:
        return {
            "loss_kind": self.loss_kind.value,
            "lambda": self.lam,
            "intercept": self.fit_intercept,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "theta": [float(v) for v in self.theta],
            "grad_norm_at_opt": self.grad_norm,
            "n_iter": self.n_iter,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        return cls(np.asarray(d["theta"], dtype=np.float64), d["loss_kind"], d["lambda"],
                   bool(d["intercept"]), d["n_classes"], d["n_features"],
                   d["grad_norm_at_opt"], d.get("n_iter", 0), d["fingerprint"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(dataset: Dataset, lam: float, loss_kind=LossKind.LOGISTIC, *, keep_weights=None,
          fit_intercept: bool = False, warm_start=None, tol: Optional[float] = None,
          max_iter: int = MAX_NEWTON_STEPS) -> TrainedModel:
    """Fit the unique minimizer of the weighted, L2-regularized risk.

    ``keep_weights`` multiplies the dataset's base weights; ``lam`` is the
    absolute ridge strength (not divided by n).  Raises
    :class:`ConvergenceError` if the gradient norm does not reach ``tol``
    (default ``1e-10 * max(1, n)``) within ``max_iter`` Newton steps.
    """
    obj = Objective(dataset, loss_kind, lam, fit_intercept)
    s = obj.weights(keep_weights)
    theta, gnorm, it = minimize(obj, s, warm_start, tol, max_iter)
    log.debug("trained %s in %d Newton steps, |grad|=%.2e", obj.kind.value, it, gnorm)
    return TrainedModel(theta, obj.kind, obj.lam, fit_intercept, dataset.K, dataset.d,
                        gnorm, it, dataset.fingerprint)


def point_grad(model: TrainedModel, dataset: Dataset, i: int, at=None) -> np.ndarray:
    """Gradient of the loss of training point ``i`` (unweighted)."""
    obj = model.objective(dataset)
    th = model.theta if at is None else np.asarray(at, dtype=np.float64)
    return row_grads(obj.kind, obj.Z[i:i + 1], obj.ids[i:i + 1], th)[0]


def point_hess(model: TrainedModel, dataset: Dataset, i: int, at=None) -> np.ndarray:
    obj = model.objective(dataset)
    th = model.theta if at is None else np.asarray(at, dtype=np.float64)
    return weighted_hessian(obj.kind, obj.Z[i:i + 1], obj.ids[i:i + 1], th, np.ones(1))


def hessian(model: TrainedModel, dataset: Dataset, weights=None, at=None,
            regularize: bool = True) -> np.ndarray:
    """``sum_i weights_i * base_i * hess loss_i + lam * I`` (intercept unpenalized).

    ``weights=None`` means all ones, i.e. the full regularized Hessian.
    """
    obj = model.objective(dataset)
    w = np.ones(dataset.n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (dataset.n,) or w.min() < 0:
        raise ValueError("weights must be a nonnegative vector of length n")
    th = model.theta if at is None else np.asarray(at, dtype=np.float64)
    return obj.hessian(th, w * dataset.base_weights, regularize=regularize)
