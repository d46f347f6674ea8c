from pathlib import Path

import numpy as np
import pytest

from grouprobe import (Dataset, EvalFunction, SubsetWeights, TestPoint, load_dense_csv,
                       synth_gaussian_binary, synth_test_points, train)

DATA = Path(__file__).parent / "data"
T6_LAMBDA = 0.5


@pytest.fixture(scope="session")
def t6():
    return load_dense_csv(DATA / "t6.csv")


@pytest.fixture(scope="session")
def t6_model(t6):
    return train(t6, T6_LAMBDA)


@pytest.fixture(scope="session")
def t6_test():
    return TestPoint(np.array([0.7, -0.4]), 1, name="q")


@pytest.fixture(scope="session")
def t6_evals(t6_test):
    return [EvalFunction.test_prediction(t6_test), EvalFunction.test_loss(t6_test),
            EvalFunction.self_loss()]


@pytest.fixture(scope="session")
def syn200():
    """200-point, 10-dimensional two-Gaussian training set."""
    return synth_gaussian_binary(100, 10, 1.0, 7)


@pytest.fixture(scope="session")
def syn200_model(syn200):
    return train(syn200, 2.0)


@pytest.fixture(scope="session")
def syn200_tests():
    return synth_test_points(4, 10, 1.0, 8)


def random_subsets(dataset, count, max_frac=0.25, seed=0, fractional=False):
    rng = np.random.default_rng(seed)
    out = []
    top = max(1, int(max_frac * dataset.n))
    for i in range(count):
        s = int(rng.integers(1, top + 1))
        idx = rng.choice(dataset.n, s, replace=False)
        w = np.zeros(dataset.n)
        w[idx] = rng.uniform(0.2, 1.0, s) if fractional else 1.0
        out.append(SubsetWeights.from_weights(dataset, w, "random", i))
    return out
