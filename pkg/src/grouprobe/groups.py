"""Coherent and random group families over a grid of sizes."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import fclusterdata
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from threadpoolctl import threadpool_limits

from .data_io import Dataset, TestPoint
from .influence import EvalFunction, SubsetWeights, engine_for
from .model import TrainedModel, row_grads

log = logging.getLogger(__name__)

KMEANS_KS = (4, 8, 16, 32, 64, 128)
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
AGGLOMERATIVE_T = 1.0
# (number of sizes, largest fraction) per stage; every stage starts at 0.25%
TAIL_STAGES = ((33, 0.025), (33, 0.10), (34, 0.25))
TAIL_MIN_FRAC = 0.0025
TAIL_POOL_FACTOR = 1.5


class GroupMethod(str, Enum):
    SHARED_FEATURE = "shared_feature"
    FEATURE_CLUSTER = "feature_cluster"
    GRADIENT_CLUSTER = "gradient_cluster"
    RANDOM_WITHIN_CLASS = "random_within_class"
    RANDOM = "random"
    POS_INFLUENCE_TAIL = "pos_influence_tail"
    NEG_INFLUENCE_TAIL = "neg_influence_tail"


ALL_METHODS = tuple(GroupMethod)
TAIL_METHODS = (GroupMethod.POS_INFLUENCE_TAIL, GroupMethod.NEG_INFLUENCE_TAIL)


def default_size_grid() -> tuple:
    return tuple(np.linspace(0.0025, 0.25, 100).tolist())


@dataclass(frozen=True)
class GroupPlan:
    """What to build: size fractions, method families, seed, and tail test points."""

    sizes: tuple = field(default_factory=default_size_grid)
    methods: tuple = ALL_METHODS
    seed: int = 0
    test_points: tuple = ()

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.sizes)
        if not sizes or any(not 0 < s < 1 for s in sizes):
            raise ValueError("size fractions must lie in (0, 1)")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "methods", tuple(GroupMethod(m) for m in self.methods))
        object.__setattr__(self, "test_points", tuple(self.test_points))

    def counts(self, n: int) -> list[int]:
        return [frac_to_count(s, n) for s in self.sizes]


def frac_to_count(frac: float, n: int) -> int:
    return min(n, max(1, int(round(frac * n))))


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def _subset(dataset, idx, tag):
    return SubsetWeights.from_indices(dataset, np.sort(np.asarray(idx, dtype=np.int64)), tag)


# -- shared feature -------------------------------------------------------------

def nearest_in_feature(values: np.ndarray, anchor: int, s: int, tiebreak: np.ndarray) -> np.ndarray:
    """The ``s`` points whose value is closest to ``values[anchor]``; the anchor always comes first."""
    dist = np.abs(values - values[anchor])
    dist[anchor] = -1.0
    return np.lexsort((tiebreak, dist))[:s]


def shared_feature_groups(dataset: Dataset, plan: GroupPlan, rng=None) -> list[SubsetWeights]:
    rng = rng if rng is not None else _rng(plan.seed, ALL_METHODS.index(GroupMethod.SHARED_FEATURE))
    out = []
    for s in plan.counts(dataset.n):
        j = int(rng.integers(dataset.d))
        anchor = int(rng.integers(dataset.n))
        idx = nearest_in_feature(dataset.features[:, j], anchor, s, rng.random(dataset.n))
        out.append(_subset(dataset, idx, GroupMethod.SHARED_FEATURE.value))
    return out


# -- clusters -------------------------------------------------------------------

def kmeans_labels(X: np.ndarray, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations."""
    with warnings.catch_warnings():
        # duplicate rows leave fewer distinct clusters than k; that is expected here
        warnings.simplefilter("ignore", ConvergenceWarning)
        with threadpool_limits(1):
            km = KMeans(k, init="k-means++", n_init=1, algorithm="lloyd", max_iter=KMEANS_MAX_ITER,
                        tol=KMEANS_TOL, random_state=seed).fit(X)
    return km.labels_


def agglomerative_labels(X: np.ndarray, t: float = AGGLOMERATIVE_T) -> np.ndarray:
    """Single-linkage hierarchy cut with the inconsistency criterion at ``t``."""
    if X.shape[0] < 2:
        return np.zeros(X.shape[0], dtype=np.int64)
    return fclusterdata(X, t=t, criterion="inconsistent", metric="euclidean", method="single")


def cluster_pool(X: np.ndarray, seed: int) -> list[np.ndarray]:
    """Distinct nonempty clusters from the agglomerative cut and every k-means run."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    labelings = [agglomerative_labels(X)]
    for c, k in enumerate(KMEANS_KS):
        if k > n:
            continue
        labelings.append(kmeans_labels(X, k, int(np.random.SeedSequence([seed, c]).generate_state(1)[0])))
    seen, pool = set(), []
    for lab in labelings:
        for c in np.unique(lab):
            idx = np.flatnonzero(lab == c)
            key = idx.tobytes()
            if key not in seen:
                seen.add(key)
                pool.append(idx)
    return pool


def cluster_groups(dataset: Dataset, matrix: np.ndarray, plan: GroupPlan, method_tag: str,
                   rng=None) -> list[SubsetWeights]:
    """Groups sampled from inside clusters of ``matrix`` (one row per training point)."""
    matrix = np.asarray(matrix)
    if matrix.shape[0] != dataset.n:
        raise ValueError("cluster matrix needs one row per training point")
    if rng is None:
        known = [m.value for m in ALL_METHODS]
        rng = _rng(plan.seed, known.index(method_tag) if method_tag in known else len(known))
    pool = cluster_pool(matrix, int(rng.integers(2 ** 31)))
    sizes = np.array([len(c) for c in pool])
    out = []
    for s in plan.counts(dataset.n):
        ok = np.flatnonzero(sizes >= s)
        if ok.size == 0:
            log.info("%s: no cluster with at least %d points, size skipped", method_tag, s)
            continue
        c = pool[ok[rng.integers(ok.size)]]
        out.append(_subset(dataset, rng.choice(c, s, replace=False), method_tag))
    return out


# -- random ---------------------------------------------------------------------

def random_groups(dataset: Dataset, plan: GroupPlan, within_class: bool, rng=None) -> list[SubsetWeights]:
    method = GroupMethod.RANDOM_WITHIN_CLASS if within_class else GroupMethod.RANDOM
    rng = rng if rng is not None else _rng(plan.seed, ALL_METHODS.index(method))
    members = [np.flatnonzero(dataset.labels == c) for c in range(dataset.K)]
    out = []
    for s in plan.counts(dataset.n):
        if within_class:
            ok = [m for m in members if m.size >= s]
            if not ok:
                log.info("%s: no class with at least %d points, size skipped", method.value, s)
                continue
            cand = ok[rng.integers(len(ok))]
        else:
            cand = np.arange(dataset.n)
        out.append(_subset(dataset, rng.choice(cand, s, replace=False), method.value))
    return out


# -- influence tails ------------------------------------------------------------

def tail_schedule(n: int) -> list[tuple[int, int]]:
    """``(size, pool size)`` for every tail group, stage by stage."""
    sched = []
    for count, top in TAIL_STAGES:
        pool = min(n, int(round(TAIL_POOL_FACTOR * top * n)))
        for frac in np.linspace(TAIL_MIN_FRAC, top, count):
            sched.append((frac_to_count(frac, n), pool))
    return sched


def tail_ranking(model: TrainedModel, dataset: Dataset, test_point: TestPoint, sign: int) -> np.ndarray:
    """Indices ordered from most to least influential on the test loss in direction ``sign``."""
    infl = engine_for(model, dataset).pointwise_influence(EvalFunction.test_loss(test_point))
    return np.argsort(-sign * infl, kind="stable")


def influence_tail_groups(model: TrainedModel, dataset: Dataset, test_point: TestPoint, sign: int,
                          plan: GroupPlan, rng=None) -> list[SubsetWeights]:
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    method = GroupMethod.POS_INFLUENCE_TAIL if sign > 0 else GroupMethod.NEG_INFLUENCE_TAIL
    if rng is None:
        names = [p.name for p in plan.test_points]
        t = names.index(test_point.name) if test_point.name in names else 0
        rng = _rng(plan.seed, ALL_METHODS.index(method), t)
    order = tail_ranking(model, dataset, test_point, sign)
    tag = f"{method.value}@{test_point.name}"
    out = []
    for s, pool in tail_schedule(dataset.n):
        if pool < s:
            log.info("%s: pool of %d smaller than size %d, skipped", tag, pool, s)
            continue
        out.append(_subset(dataset, rng.choice(order[:pool], s, replace=False), tag))
    return out


# -- assembly -------------------------------------------------------------------

def gradient_matrix(model: TrainedModel, dataset: Dataset) -> np.ndarray:
    obj = model.objective(dataset)
    return row_grads(obj.kind, obj.Z, obj.ids, model.theta)


def build_groups(dataset: Dataset, plan: GroupPlan, model: Optional[TrainedModel] = None) -> list[SubsetWeights]:
    """All requested groups in canonical order (method, then size) with sequential ids."""
    groups: list[SubsetWeights] = []
    for method in ALL_METHODS:
        if method not in plan.methods:
            continue
        mi = ALL_METHODS.index(method)
        if method is GroupMethod.SHARED_FEATURE:
            groups += shared_feature_groups(dataset, plan, _rng(plan.seed, mi))
        elif method is GroupMethod.FEATURE_CLUSTER:
            groups += cluster_groups(dataset, dataset.features, plan, method.value, _rng(plan.seed, mi))
        elif method is GroupMethod.GRADIENT_CLUSTER:
            if model is None:
                raise ValueError("gradient clustering needs a trained model")
            groups += cluster_groups(dataset, gradient_matrix(model, dataset), plan, method.value,
                                     _rng(plan.seed, mi))
        elif method in (GroupMethod.RANDOM_WITHIN_CLASS, GroupMethod.RANDOM):
            groups += random_groups(dataset, plan, method is GroupMethod.RANDOM_WITHIN_CLASS,
                                    _rng(plan.seed, mi))
        else:
            if model is None or not plan.test_points:
                raise ValueError("influence-tail groups need a trained model and test points")
            sign = 1 if method is GroupMethod.POS_INFLUENCE_TAIL else -1
            for t, tp in enumerate(plan.test_points):
                groups += influence_tail_groups(model, dataset, tp, sign, plan, _rng(plan.seed, mi, t))
    return [SubsetWeights(g.w, g.alpha, g.mass, g.method_tag, i) for i, g in enumerate(groups)]


def write_groups_jsonl(groups: Sequence[SubsetWeights], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(json.dumps({"id": g.id, "method_tag": g.method_tag, "size": g.size,
                                 "indices": g.indices.tolist()}, sort_keys=True) + "\n")


def read_groups_jsonl(dataset: Dataset, path) -> list[SubsetWeights]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                g = SubsetWeights.from_indices(dataset, rec["indices"], rec["method_tag"], rec["id"])
                if g.size != rec["size"]:
                    raise ValueError(f"group {rec['id']}: size field disagrees with indices")
                out.append(g)
    return out
