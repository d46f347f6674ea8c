"""Exact group effects by retraining without the group.

Retraining is deterministic (warm-started damped Newton, no randomness), and
BLAS is pinned to one thread inside every retrain, in-process or pooled, so
results do not depend on how many workers run.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data_io import Dataset
from .influence import (EffectRecord, EvalFunction, SubsetWeights, WeightsLike, as_vector,
                        engine_for)
from .model import ConvergenceError, TrainedModel, train

log = logging.getLogger(__name__)


class SubsetRetrainError(RuntimeError):
    def __init__(self, subset_id: int, cause: Exception):
        super().__init__(f"subset {subset_id}: {cause}")
        self.subset_id = subset_id
        self.cause = cause


def _retrain(dataset, model, wv, tol=None):
    with threadpool_limits(1):
        return train(dataset, model.lam, model.loss_kind, keep_weights=1.0 - wv,
                     fit_intercept=model.fit_intercept, warm_start=model.theta, tol=tol).theta


def retrained_params(model: TrainedModel, dataset: Dataset, w: WeightsLike,
                     tol: Optional[float] = None) -> np.ndarray:
    """``theta_hat(1 - w)``, warm-started at ``theta_hat(1)``."""
    wv = as_vector(w, dataset.n)
    if not wv.any():
        return np.array(model.theta)
    return _retrain(dataset, model, wv, tol)


def actual_effect(model: TrainedModel, dataset: Dataset, w: WeightsLike, f: EvalFunction) -> float:
    """``f(theta_hat(1 - w)) - f(theta_hat(1))``."""
    wv = as_vector(w, dataset.n)
    try:
        theta = retrained_params(model, dataset, wv)
    except ConvergenceError as e:
        sid = w.id if isinstance(w, SubsetWeights) else -1
        raise SubsetRetrainError(sid, e) from e
    return engine_for(model, dataset).effect_at(f, theta, wv)


# worker state for the process pool; set once per worker by _init_worker
_WORKER: dict = {}


def _init_worker(dataset, model):
    _WORKER["dataset"] = dataset
    _WORKER["model"] = model


def _worker_task(wv):
    try:
        return _retrain(_WORKER["dataset"], _WORKER["model"], wv)
    except ConvergenceError as e:
        return e


def retrain_many(model: TrainedModel, dataset: Dataset, subsets: Sequence[SubsetWeights],
                 parallelism: int = 1) -> list:
    """Retrained parameters per subset, in input order.

    Failed subsets yield the :class:`ConvergenceError` in their slot instead
    of a parameter vector.
    """
    vecs = [as_vector(s, dataset.n) for s in subsets]
    out: list = [None] * len(vecs)
    todo = []
    for i, wv in enumerate(vecs):
        if wv.any():
            todo.append(i)
        else:
            out[i] = np.array(model.theta)
    if parallelism <= 1 or len(todo) < 2:
        for i in todo:
            try:
                out[i] = _retrain(dataset, model, vecs[i])
            except ConvergenceError as e:
                out[i] = e
        return out
    chunk = max(1, len(todo) // (4 * parallelism))
    with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker,
                             initargs=(dataset, model)) as pool:
        for i, res in zip(todo, pool.map(_worker_task, [vecs[i] for i in todo], chunksize=chunk)):
            out[i] = res
    return out


def effect_records(model: TrainedModel, dataset: Dataset, subsets: Sequence[SubsetWeights],
                   fs: Iterable[EvalFunction], thetas: Optional[Sequence] = None,
                   newton: bool = True, param_pred: bool = True) -> list[EffectRecord]:
    """Influence, Newton, parameter-space and (if ``thetas`` given) actual effects.

    Records are ordered by subset, then by evaluation function.
    """
    from .newton import newton_delta

    eng = engine_for(model, dataset)
    fs = list(fs)
    records = []
    for j, s in enumerate(subsets):
        wv = as_vector(s, dataset.n)
        d_inf = eng.param_delta(wv)
        d_nt = newton_delta(model, dataset, wv) if newton else None
        theta = None if thetas is None else thetas[j]
        err = str(theta) if isinstance(theta, Exception) else None
        for f in fs:
            r = EffectRecord(s.id, s.method_tag, s.size, s.alpha, f.label,
                             eng.group_influence(wv, f), error=err)
            if d_nt is not None:
                r.newton = eng.effect_at(f, eng.theta + d_nt, wv)
            if param_pred:
                r.param_pred = eng.effect_at(f, eng.theta + d_inf, wv)
            if theta is not None and err is None:
                r.actual = eng.effect_at(f, theta, wv)
            r.fill_errors()
            records.append(r)
    return records


def batch_actual_effects(model: TrainedModel, dataset: Dataset, subsets: Sequence[SubsetWeights],
                         f, parallelism: int = 1) -> list[EffectRecord]:
    """Full effect records for each subset; per-subset failures are kept, not raised."""
    fs = [f] if isinstance(f, EvalFunction) else list(f)
    thetas = retrain_many(model, dataset, subsets, parallelism)
    for s, th in zip(subsets, thetas):
        if isinstance(th, Exception):
            log.warning("subset %d failed to retrain: %s", s.id, th)
    return effect_records(model, dataset, subsets, fs, thetas)
