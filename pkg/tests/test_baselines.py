import dataclasses

import numpy as np
import pytest

from conformal_unlearning.baselines import (
    BaselineConfig,
    amn_unlearn,
    nabla_tau_loss_and_grad,
    nabla_tau_unlearn,
    random_relabel,
    rt_unlearn,
)
from conformal_unlearning.data import Dataset
from conformal_unlearning.model import ModelParams, TrainConfig, accuracy, init_params, loss_and_grad, train

from conftest import central_diff, rel_err


class Forbidden:
    """Stand-in for a subset a baseline must never read."""

    def __init__(self, name):
        self._name = name

    def __getattr__(self, item):
        raise AssertionError(f"baseline touched {self._name}")

    def __len__(self):
        raise AssertionError(f"baseline touched {self._name}")


def sealed(bundle):
    return dataclasses.replace(
        bundle,
        test_calib=Forbidden("test_calib"),
        test_forget=Forbidden("test_forget"),
        test_retain=Forbidden("test_retain"),
    )


def tiny_sets(seed):
    rng = np.random.default_rng(seed)

    def ds(n, start):
        return Dataset(rng.standard_normal((n, 2)), rng.integers(0, 3, n), np.arange(start, start + n), 3)

    return ds(4, 0), ds(3, 10), ds(5, 20)


class TestRelabel:
    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_never_keeps_label(self, k, rng):
        labels = rng.integers(0, k, 5000)
        new = random_relabel(labels, k, rng)
        assert np.all(new != labels)
        assert np.all((new >= 0) & (new < k))

    def test_uniform_over_others(self, rng):
        new = random_relabel(np.zeros(30000, int), 4, rng)
        np.testing.assert_allclose(np.bincount(new, minlength=4)[1:] / 30000, 1 / 3, atol=0.02)

    def test_single_class(self, rng):
        with pytest.raises(ValueError):
            random_relabel(np.zeros(3, int), 1, rng)


class TestAmn:
    def test_zero_epochs(self, desk_setup):
        out = amn_unlearn(desk_setup.theta_o, desk_setup.bundle, BaselineConfig(epochs=0))
        assert out.equals(desk_setup.theta_o)

    def test_forget_accuracy_drops(self, desk_setup):
        before = accuracy(desk_setup.theta_o, desk_setup.bundle.unlearn_forget)
        out = amn_unlearn(desk_setup.theta_o, desk_setup.bundle, BaselineConfig())
        assert accuracy(out, desk_setup.bundle.unlearn_forget) < 0.1 * before

    def test_deterministic(self, desk_setup):
        cfg = BaselineConfig(epochs=1, seed=5)
        a = amn_unlearn(desk_setup.theta_o, desk_setup.bundle, cfg)
        b = amn_unlearn(desk_setup.theta_o, desk_setup.bundle, cfg)
        assert a.equals(b)


class TestNablaTau:
    def test_dead_hinge(self):
        # one-feature linear model: p(y=0|x) = sigmoid(x), so loss = -log sigmoid(x)
        w = ModelParams((np.array([[1.0, 0.0]]),), (np.zeros(2),))

        def logit_for_loss(target):
            p = np.exp(-target)
            return np.log(p / (1 - p))

        val = Dataset([[logit_for_loss(1.0)]], [0], [0], 2)
        forget = Dataset([[logit_for_loss(2.0)]], [0], [1], 2)
        retain = Dataset([[3.0], [-1.0]], [0, 1], [2, 3], 2)
        assert loss_and_grad(w, val)[0] == pytest.approx(1.0)
        assert loss_and_grad(w, forget)[0] == pytest.approx(2.0)
        total, g = nabla_tau_loss_and_grad(w, val, forget, retain, 0.3)
        l_r, g_r = loss_and_grad(w, retain)
        assert total == pytest.approx(0.7 * l_r, abs=1e-12)
        np.testing.assert_allclose(g.flatten(), 0.7 * g_r.flatten(), atol=1e-15)

    def test_zero_mix_is_retain_finetune(self):
        v, f, r = tiny_sets(0)
        m = init_params(2, 3, (4,), seed=0)
        total, g = nabla_tau_loss_and_grad(m, v, f, r, 0.0)
        l_r, g_r = loss_and_grad(m, r)
        assert total == pytest.approx(l_r)
        np.testing.assert_allclose(g.flatten(), g_r.flatten())

    @pytest.mark.parametrize("seed", range(50))
    def test_finite_differences(self, seed):
        v, f, r = tiny_sets(seed)
        m = init_params(2, 3, (4,), seed=seed)
        a = float(np.random.default_rng(seed).uniform(0, 1))
        _, g = nabla_tau_loss_and_grad(m, v, f, r, a)

        def obj(theta):
            return nabla_tau_loss_and_grad(m.unflatten(theta), v, f, r, a)[0]

        assert rel_err(g.flatten(), central_diff(obj, m.flatten())) <= 1e-4

    def test_empty_subset(self, desk_setup):
        empty = desk_setup.bundle.unlearn_forget.take(np.zeros(0, int))
        with pytest.raises(ValueError):
            nabla_tau_unlearn(desk_setup.theta_o, desk_setup.bundle, empty, BaselineConfig(method="nabla_tau"))

    def test_zero_epochs(self, desk_setup):
        out = nabla_tau_unlearn(desk_setup.theta_o, desk_setup.bundle, None, BaselineConfig(method="nabla_tau", epochs=0))
        assert out.equals(desk_setup.theta_o)

    def test_default_validation_has_forget_labels(self, desk_setup):
        val = desk_setup.bundle.calib_forget
        assert len(val) > 0
        assert set(val.labels.tolist()) <= set(desk_setup.bundle.unlearn_forget.labels.tolist())


class TestSubsetAccess:
    def test_amn(self, desk_setup):
        amn_unlearn(desk_setup.theta_o, sealed(desk_setup.bundle), BaselineConfig(epochs=1))

    def test_nabla_tau(self, desk_setup):
        nabla_tau_unlearn(desk_setup.theta_o, sealed(desk_setup.bundle), None, BaselineConfig(method="nabla_tau", epochs=1))

    def test_rt(self, desk_setup):
        rt_unlearn(sealed(desk_setup.bundle), TrainConfig(epochs=1), (8,))

    def test_rt_matches_direct_training(self, desk_setup):
        cfg = TrainConfig(epochs=2, seed=3)
        out = rt_unlearn(desk_setup.bundle, cfg, (8,))
        direct = train(init_params(8, 10, (8,), seed=3), desk_setup.bundle.train_retain, cfg)
        assert out.equals(direct)


def test_config_validation():
    for bad in ({"method": "scrub"}, {"alpha_mix": 1.5}, {"epochs": -1}):
        with pytest.raises(ValueError):
            BaselineConfig(**bad)
