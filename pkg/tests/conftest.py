import numpy as np
import pytest

from calibra.core import LabeledPredictions


@pytest.fixture
def four_point():
    # binary (0.8, 0.2) four times, three correct
    return LabeledPredictions(np.array([[0.8, 0.2]] * 4), np.array([0, 0, 0, 1]))


@pytest.fixture
def perfect():
    preds = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    return LabeledPredictions(preds, np.array([0, 1, 0]))


def random_labeled(seed, n_items=40, n_classes=3, alpha=1.0):
    rng = np.random.default_rng(seed)
    preds = rng.dirichlet(np.full(n_classes, alpha), size=n_items)
    labels = rng.integers(0, n_classes, size=n_items)
    return LabeledPredictions(preds, labels)
