"""Constructions where influence and the Newton step disagree.

``gen_mog`` rotates: pairs whose Newton step points away from the influence
step, plus a test direction that decorrelates the two projections.
``gen_ortho`` scales: repeated points on orthogonal axes, each axis with its
own single-point scale ``d(w)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple, Optional

import numpy as np

from .data_io import Dataset, synth_gaussian_binary
from .influence import SubsetWeights, copies_of, engine_for
from .model import LossKind, TrainedModel, row_curvatures, train
from .newton import single_point_scale

log = logging.getLogger(__name__)

MOG_N_PER_CLASS = 60
MOG_D = 60
MOG_OFFSET = 0.5
MOG_LAMBDA = 1e-3
MOG_PAIRS = 120
MOG_RESEEDS = 5


class Counterexample(NamedTuple):
    dataset: Dataset
    subsets: list
    x_test: np.ndarray
    model: TrainedModel
    info: dict


class CounterexampleError(RuntimeError):
    pass


# -- mixture of Gaussians -------------------------------------------------------

def pair_deltas(model: TrainedModel, dataset: Dataset, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Influence and Newton parameter changes for every removed pair.

    The Newton step uses the rank-2 Woodbury update of the cached inverse,
    so all pairs cost one factorization in total.
    """
    eng = engine_for(model, dataset)
    Z = eng.obj.Z
    c = dataset.base_weights * row_curvatures(model.loss_kind, Z, eng.obj.ids, model.theta)
    HiZ = eng.solve(Z.T).T          # rows are H^{-1} z_i
    M = Z @ HiZ.T                   # z_i^T H^{-1} z_j
    HiG = eng.solve(eng.G.T).T      # rows are H^{-1} grad_i
    d_inf = np.empty((len(pairs), Z.shape[1]))
    d_nt = np.empty_like(d_inf)
    for k, (i, j) in enumerate(pairs):
        p = [i, j]
        a = HiG[i] + HiG[j]
        C = np.diag(c[p])
        core = np.linalg.solve(np.eye(2) - C @ M[np.ix_(p, p)], C @ (Z[p] @ a))
        d_inf[k] = a
        d_nt[k] = a + HiZ[p].T @ core
    return d_inf, d_nt


def _angles(a, b):
    cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def decorrelating_direction(d_inf: np.ndarray, d_nt: np.ndarray) -> Optional[np.ndarray]:
    """Unit ``x`` with zero sample covariance between ``x^T d_inf`` and ``x^T d_nt``.

    The covariance is the quadratic form of ``S = sym(A_c^T B_c) / (N - 1)``
    with centred rows.  Mixing the top and bottom eigenvectors with weights
    that cancel their eigenvalues zeroes it.  Of the two sign choices, the
    one with more sign disagreements is returned.  ``None`` if ``S`` is
    semidefinite.
    """
    A = d_inf - d_inf.mean(axis=0)
    B = d_nt - d_nt.mean(axis=0)
    S = A.T @ B
    S = 0.5 * (S + S.T) / (len(A) - 1)
    mu, U = np.linalg.eigh(S)
    if not (mu[0] < 0 < mu[-1]):
        return None
    c1 = np.sqrt(-mu[0] / (mu[-1] - mu[0]))
    c2 = np.sqrt(mu[-1] / (mu[-1] - mu[0]))
    best, best_flips = None, -1
    for s in (1.0, -1.0):
        x = c1 * U[:, -1] + s * c2 * U[:, 0]
        flips = int(np.sum(np.sign(d_inf @ x) != np.sign(d_nt @ x)))
        if flips > best_flips:
            best, best_flips = x, flips
    return best


def _mog_once(seed: int, n_pairs: int, lam: float):
    ds = synth_gaussian_binary(MOG_N_PER_CLASS, MOG_D, MOG_OFFSET, seed)
    model = train(ds, lam, LossKind.LOGISTIC)
    pairs = list(combinations(range(ds.n), 2))
    d_inf, d_nt = pair_deltas(model, ds, pairs)
    top = np.sort(np.argsort(-_angles(d_inf, d_nt), kind="stable")[:n_pairs])
    x = decorrelating_direction(d_inf[top], d_nt[top])
    if x is None:
        return None
    inf, nt = d_inf[top] @ x, d_nt[top] @ x
    if not np.any(np.sign(inf) != np.sign(nt)):
        return None
    subsets = [SubsetWeights.from_indices(ds, pairs[k], "mog_pair", id=t) for t, k in enumerate(top)]
    info = {"seed": seed, "angles": _angles(d_inf[top], d_nt[top]).tolist(),
            "sign_flips": int(np.sum(np.sign(inf) != np.sign(nt)))}
    return Counterexample(ds, subsets, x, model, info)


def gen_mog(seed: int = 0, n_pairs: int = MOG_PAIRS, lam: float = MOG_LAMBDA,
            max_seeds: int = MOG_RESEEDS) -> Counterexample:
    """Mixture-of-Gaussians rotation counterexample.

    Tries ``seed, seed + 1, ...`` up to ``max_seeds`` times until the
    construction has a sign disagreement; the seed used is in ``info``.
    """
    if n_pairs < 3:
        raise ValueError("decorrelating needs at least three pairs")
    for k in range(max_seeds):
        res = _mog_once(seed + k, n_pairs, lam)
        if res is not None:
            return res
        log.warning("mog seed %d produced no sign disagreement, reseeding", seed + k)
    raise CounterexampleError(f"no sign disagreement within {max_seeds} seeds starting at {seed}")


# -- orthogonal axes ------------------------------------------------------------

@dataclass(frozen=True)
class OrthoConfig:
    """Two points of opposite class at ``distances[a] * e_a`` on each axis.

    ``multiplicities[a] = (copies labelled +1, copies labelled -1)``.
    ``removals[a]`` lists how many copies of each of axis ``a``'s two points
    to remove; each count yields one subset per point.  ``None`` means every
    count from 1 to the multiplicity.
    """

    distances: tuple = (3.0, 0.3)
    multiplicities: tuple = ((5, 5), (5, 5))
    removals: Optional[tuple] = ((4,), (4,))
    lam: float = 1.0

    def __post_init__(self):
        if len(self.distances) != 2 or len(self.multiplicities) != 2:
            raise ValueError("ortho construction lives in two dimensions")
        if any(r <= 0 for r in self.distances):
            raise ValueError("distances must be > 0")
        if any(m < 1 for pair in self.multiplicities for m in pair):
            raise ValueError("multiplicities must be >= 1")


def ortho_dataset(cfg: OrthoConfig) -> tuple[Dataset, list[int]]:
    """The repeated-point dataset and the first row index of each distinct point."""
    rows, labels, firsts = [], [], []
    for a, (r, mult) in enumerate(zip(cfg.distances, cfg.multiplicities)):
        x = np.zeros(2)
        x[a] = r
        for label, m in zip((1, 0), mult):
            firsts.append(len(rows))
            rows += [x] * m
            labels += [label] * m
    return Dataset(np.array(rows), np.array(labels), np.ones(len(rows)), 2), firsts


def gen_ortho(cfg: OrthoConfig = OrthoConfig()) -> Counterexample:
    """Orthogonal-axes scaling counterexample with ``x_test = (1, 1)``.

    ``info["scales"]`` holds ``d(w)`` per subset and ``info["axis"]`` its axis.
    """
    ds, firsts = ortho_dataset(cfg)
    model = train(ds, cfg.lam, LossKind.LOGISTIC)
    subsets, scales, axes = [], [], []
    for p, k in enumerate(firsts):
        a, cls = divmod(p, 2)
        mult = cfg.multiplicities[a][cls]
        counts = range(1, mult + 1) if cfg.removals is None else cfg.removals[a]
        for m in counts:
            if not 1 <= m <= mult:
                raise ValueError(f"cannot remove {m} of {mult} copies on axis {a}")
            subsets.append(copies_of(ds, k, m, method_tag=f"ortho_axis{a}", id=len(subsets)))
            scales.append(single_point_scale(model, ds, k, m))
            axes.append(a)
    return Counterexample(ds, subsets, np.array([1.0, 1.0]), model,
                          {"scales": scales, "axis": axes})


def line_fit(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Least-squares slope through the origin and the relative residual ``||y - s x|| / ||y||``."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    s = float(xs @ ys / (xs @ xs))
    return s, float(np.linalg.norm(ys - s * xs) / np.linalg.norm(ys))
