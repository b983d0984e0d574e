import numpy as np
import pytest

from conformal_unlearning.data import Dataset, generate_mixture, split_class_wise
from conformal_unlearning.model import ModelParams, TrainConfig, init_params, train


def linear_model(weight, bias=None) -> ModelParams:
    """Single-layer model whose logits are ``x @ weight + bias``."""
    weight = np.asarray(weight, dtype=float)
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=float)
    return ModelParams((weight,), (bias,))


def one_hot_data(labels, n_classes, ids=None) -> Dataset:
    labels = np.asarray(labels)
    ids = np.arange(labels.size) if ids is None else ids
    return Dataset(np.eye(n_classes)[labels], labels, ids, n_classes)


def central_diff(f, theta, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``theta``."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture(scope="session")
def small_bundle():
    data = generate_mixture(4, 3, 150, 3.0, seed=11)
    return split_class_wise(data, {1}, seed=11)


@pytest.fixture(scope="session")
def small_model(small_bundle):
    init = init_params(3, 4, (16,), seed=11)
    return train(init, small_bundle.train, TrainConfig(epochs=15, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_setup():
    """Default 10-class, forget-one-class desk fixture for seed 0."""
    from conformal_unlearning import harness

    return harness.prepare_seed(harness.ExperimentConfig(), 0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
