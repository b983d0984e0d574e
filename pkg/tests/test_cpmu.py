import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_unlearning.cpmu import (
    CpmuConfig,
    SurrogateContext,
    SurrogateLoss,
    anchor_prox,
    cpmu_loss_and_grad,
    format_trace,
    quantile_context,
    regularizer,
    sigmoid_surrogate,
    surrogate_risks,
    unlearn,
)
from conformal_unlearning.conformal import calibrate
from conformal_unlearning.data import Dataset
from conformal_unlearning.model import forward_probs, init_params, loss_and_grad

from conftest import central_diff, linear_model, rel_err


def random_fixture(seed):
    """3 classes, 6 points split 3/3 into forget and retain."""
    rng = np.random.default_rng(seed)
    params = init_params(2, 3, (4,), seed=seed)
    anchor = params.unflatten(params.flatten() + rng.normal(0, 0.1, params.size))
    X = rng.standard_normal((6, 2))
    y = rng.integers(0, 3, 6)
    forget = Dataset(X[:3], y[:3], np.arange(3), 3)
    retain = Dataset(X[3:], y[3:], np.arange(3, 6), 3)
    cfg = CpmuConfig(
        gamma=float(rng.uniform(1, 10)),
        delta=float(rng.uniform(0, 0.1)),
        lambda_reg=float(rng.uniform(0, 1)),
        reg_norm=("l2_squared", "l1")[seed % 2],
        loss_direction=("corrected", "as_written")[(seed // 2) % 2],
    )
    ctx = SurrogateContext(p_q=float(rng.uniform(0.05, 0.95)), q_hat=0.5)
    return params, anchor, forget, retain, ctx, cfg


class TestSigmoid:
    def test_zero(self):
        for g in (0.1, 1.0, 10.0, 1e4):
            assert sigmoid_surrogate(0.0, g) == 0.5

    @settings(max_examples=200)
    @given(st.floats(-100, 100), st.floats(1e-3, 1e3))
    def test_complement(self, u, g):
        assert sigmoid_surrogate(u, g) + sigmoid_surrogate(-u, g) == pytest.approx(1.0, abs=1e-12)

    def test_known_value(self):
        assert sigmoid_surrogate(0.2, 10.0) == pytest.approx(0.880797, abs=1e-5)
        assert sigmoid_surrogate(0.2, 10.0) == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)

    def test_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            np.testing.assert_array_equal(sigmoid_surrogate(np.array([-1e6, 1e6]), 1e3), [0.0, 1.0])

    def test_bad_gamma(self):
        with pytest.raises(ValueError):
            sigmoid_surrogate(0.1, 0.0)


def probs_point(p_true, n_classes=2):
    """One-hot input model with p(y=0|x) = p_true."""
    rest = (1 - p_true) / (n_classes - 1)
    row = [p_true] + [rest] * (n_classes - 1)
    return linear_model(np.log([row]))


class TestSurrogateRisks:
    def test_equal_probabilities_half(self):
        m = probs_point(0.6)
        batch = Dataset([[1.0], [1.0]], [0, 0], [0, 1], 2)
        cfg = CpmuConfig(delta=0.0)
        ef, er = surrogate_risks(m, batch, batch, SurrogateContext(p_q=0.6, q_hat=0.4), cfg)
        assert ef == pytest.approx(0.5, abs=1e-12) and er == pytest.approx(0.5, abs=1e-12)

    def test_retain_contribution(self):
        m = linear_model([[0.0, -1e3]])  # p_u = 1
        batch = Dataset([[1.0]], [0], [0], 2)
        cfg = CpmuConfig(delta=0.0, gamma=10.0)
        _, er = surrogate_risks(m, batch, batch, SurrogateContext(p_q=0.5, q_hat=0.5), cfg)
        assert er == pytest.approx(0.9933071490757153, abs=1e-12)
        assert er == pytest.approx(0.993307, abs=1e-5)

    def test_indicator_limit(self):
        # forget p_u = 0.1, retain p_u = 0.9, p_q = 0.5: both margins satisfied
        f = Dataset([[1.0, 0.0]], [0], [0], 2)
        r = Dataset([[0.0, 1.0]], [0], [1], 2)
        m = linear_model(np.log([[0.1, 0.9], [0.9, 0.1]]))
        cfg = CpmuConfig(gamma=1e4)
        ef, er = surrogate_risks(m, f, r, SurrogateContext(p_q=0.5, q_hat=0.5), cfg)
        assert ef == pytest.approx(1.0, abs=1e-6) and er == pytest.approx(1.0, abs=1e-6)

    def test_as_written_reverses(self):
        f = Dataset([[1.0, 0.0]], [0], [0], 2)
        r = Dataset([[0.0, 1.0]], [0], [1], 2)
        m = linear_model(np.log([[0.1, 0.9], [0.9, 0.1]]))
        ctx = SurrogateContext(p_q=0.5, q_hat=0.5)
        ef_c, er_c = surrogate_risks(m, f, r, ctx, CpmuConfig(delta=0.0))
        ef_w, er_w = surrogate_risks(m, f, r, ctx, CpmuConfig(delta=0.0, loss_direction="as_written"))
        assert ef_c + ef_w == pytest.approx(1.0) and er_c + er_w == pytest.approx(1.0)

    def test_empty_batch(self):
        m = probs_point(0.5)
        empty = Dataset(np.zeros((0, 1)), [], [], 2)
        full = Dataset([[1.0]], [0], [0], 2)
        with pytest.raises(ValueError):
            surrogate_risks(m, empty, full, SurrogateContext(0.5, 0.5), CpmuConfig())


class TestLossAndGrad:
    def test_lambda_zero_half_means(self):
        m = probs_point(0.6)
        batch = Dataset([[1.0]], [0], [0], 2)
        loss, _ = cpmu_loss_and_grad(m, m, batch, batch, SurrogateContext(0.6, 0.4), CpmuConfig(delta=0.0, lambda_reg=0.0))
        assert loss == pytest.approx(-1.0, abs=1e-12)

    def test_regularizer_zero_at_anchor(self):
        m = init_params(3, 3, (4,), seed=0)
        value, grad = regularizer(m, m, "l2_squared")
        assert value == 0.0 and not grad.any()

    def test_regularizer_l1(self):
        a = linear_model([[0.0, 0.0]])
        b = linear_model([[1.5, -2.0]], [0.5, 0.0])
        value, grad = regularizer(b, a, "l1")
        assert value == pytest.approx(4.0)
        np.testing.assert_array_equal(grad, [1.0, -1.0, 1.0, 0.0])

    def test_shape_mismatch(self):
        a = init_params(2, 3, (4,), seed=0)
        b = init_params(2, 3, (5,), seed=0)
        batch = Dataset([[0.0, 0.0]], [0], [0], 3)
        with pytest.raises(ValueError):
            cpmu_loss_and_grad(a, b, batch, batch, SurrogateContext(0.5, 0.5), CpmuConfig())

    @pytest.mark.parametrize("seed", range(50))
    def test_finite_differences(self, seed):
        params, anchor, forget, retain, ctx, cfg = random_fixture(seed)
        _, g = cpmu_loss_and_grad(params, anchor, forget, retain, ctx, cfg)

        def f(theta):
            return cpmu_loss_and_grad(params.unflatten(theta), anchor, forget, retain, ctx, cfg)[0]

        assert rel_err(g.flatten(), central_diff(f, params.flatten())) <= 1e-4

    def test_parts(self):
        params, anchor, forget, retain, ctx, cfg = random_fixture(0)
        parts = {}
        cpmu_loss_and_grad(params, anchor, forget, retain, ctx, cfg, parts)
        ef, er = surrogate_risks(params, forget, retain, ctx, cfg)
        assert parts == pytest.approx({"eps_f": ef, "eps_r": er})


class TestDirection:
    @pytest.mark.parametrize("p_u,p_q", [(0.7, 0.5), (0.55, 0.45), (0.9, 0.8)])
    def test_forget_step_lowers_probability(self, p_u, p_q):
        m = probs_point(p_u, 3)
        point = Dataset([[1.0]], [0], [0], 3)
        ctx = SurrogateContext(p_q=p_q, q_hat=1 - p_q)
        _, g = loss_and_grad(m, point, SurrogateLoss(ctx, CpmuConfig(), "forget"))
        stepped = m.unflatten(m.flatten() - 0.1 * g.flatten())
        assert forward_probs(stepped, [1.0])[0] < p_u

    def test_retain_step_raises_probability(self):
        m = probs_point(0.4, 3)
        point = Dataset([[1.0]], [0], [0], 3)
        ctx = SurrogateContext(p_q=0.5, q_hat=0.5)
        _, g = loss_and_grad(m, point, SurrogateLoss(ctx, CpmuConfig(), "retain"))
        stepped = m.unflatten(m.flatten() - 0.1 * g.flatten())
        assert forward_probs(stepped, [1.0])[0] > 0.4

    def test_as_written_forget_raises_probability(self):
        m = probs_point(0.7, 3)
        point = Dataset([[1.0]], [0], [0], 3)
        cfg = CpmuConfig(loss_direction="as_written")
        _, g = loss_and_grad(m, point, SurrogateLoss(SurrogateContext(0.5, 0.5), cfg, "forget"))
        stepped = m.unflatten(m.flatten() - 0.1 * g.flatten())
        assert forward_probs(stepped, [1.0])[0] > 0.7


class TestAnchorProx:
    def test_l2_closed_form(self, rng):
        theta, anchor = rng.standard_normal(5), rng.standard_normal(5)
        x = anchor_prox(theta, anchor, 0.3, "l2_squared")
        # stationarity of step * |x - a|^2 + |x - theta|^2 / 2
        np.testing.assert_allclose(2 * 0.3 * (x - anchor) + (x - theta), 0, atol=1e-12)

    def test_l1_soft_threshold(self):
        x = anchor_prox(np.array([1.0, 0.2, -0.5]), np.zeros(3), 0.3, "l1")
        np.testing.assert_allclose(x, [0.7, 0.0, -0.2])


class TestUnlearn:
    def test_zero_epochs_identity(self, desk_setup):
        theta_u, trace = unlearn(desk_setup.theta_o, desk_setup.bundle, CpmuConfig(epochs=0))
        assert theta_u.equals(desk_setup.theta_o) and trace == []

    def test_large_lambda_displaces_less(self, desk_setup):
        base = CpmuConfig(epochs=1, learning_rate=1e-3)
        norm_o = np.linalg.norm(desk_setup.theta_o.flatten())

        def disp(lam):
            th, _ = unlearn(desk_setup.theta_o, desk_setup.bundle, dataclasses.replace(base, lambda_reg=lam))
            return np.linalg.norm(th.flatten() - desk_setup.theta_o.flatten()) / norm_o

        # explicit steps stay stable while 2 * lr * lambda < 2
        assert disp(500.0) < disp(0.0)

    def test_anchor_invariance_proximal(self, desk_setup):
        cfg = CpmuConfig(epochs=1, learning_rate=1e-3, lambda_reg=1e8, anchor_step="proximal")
        theta_u, _ = unlearn(desk_setup.theta_o, desk_setup.bundle, cfg)
        assert np.abs(theta_u.flatten() - desk_setup.theta_o.flatten()).max() <= 1e-3

    def test_deterministic(self, desk_setup):
        cfg = CpmuConfig(epochs=2, seed=3)
        a, ta = unlearn(desk_setup.theta_o, desk_setup.bundle, cfg)
        b, tb = unlearn(desk_setup.theta_o, desk_setup.bundle, cfg)
        assert a.equals(b)
        assert [r.loss for r in ta] == [r.loss for r in tb]

    def test_trace(self, desk_setup, monkeypatch):
        import conformal_unlearning.cpmu as cpmu_mod

        calls = []
        real = cpmu_mod.calibrate

        def spy(*args, **kwargs):
            calls.append(1)
            return real(*args, **kwargs)

        monkeypatch.setattr(cpmu_mod, "calibrate", spy)
        _, trace = unlearn(desk_setup.theta_o, desk_setup.bundle, CpmuConfig(epochs=3))
        assert len(calls) == 3
        assert [r.epoch for r in trace] == [0, 1, 2]
        assert all(b.timestamp >= a.timestamp for a, b in zip(trace, trace[1:]))
        text = format_trace(trace)
        lines = text.splitlines()
        assert lines[0].split("\t") == ["epoch", "q_hat", "eps_f", "eps_r", "loss", "wall_ms"]
        assert len(lines) == 4 and all(len(line.split("\t")) == 6 for line in lines)

    def test_first_quantile_matches_calibrate(self, desk_setup):
        ctx = quantile_context(desk_setup.theta_o, desk_setup.bundle.unlearn_calib, 0.1, 0, None)
        cal = calibrate(desk_setup.theta_o, desk_setup.bundle.unlearn_calib, 0.1)
        assert ctx.q_hat == cal.q_hat
        # p_q is the nearest point's own probability, so 1 - p_q sits near q_hat
        assert abs((1 - ctx.p_q) - cal.q_hat) <= np.diff(cal.sorted_scores).max()

    def test_empty_forget(self, desk_setup):
        empty = desk_setup.bundle.unlearn_forget.take(np.zeros(0, int))
        bundle = dataclasses.replace(desk_setup.bundle, unlearn_forget=empty)
        with pytest.raises(ValueError):
            unlearn(desk_setup.theta_o, bundle, CpmuConfig(epochs=1))

    def test_forgets_on_desk_fixture(self, desk_setup):
        from conformal_unlearning.metrics import evaluate_all

        theta_u, _ = unlearn(desk_setup.theta_o, desk_setup.bundle, CpmuConfig())
        rep = evaluate_all(theta_u, desk_setup.bundle, 0.1, 5)
        assert rep.eucf["Df"] >= 0.9
        assert rep.accuracy["Df"] <= 0.05

    def test_config_validation(self):
        for bad in ({"alpha": 0.0}, {"gamma": 0.0}, {"reg_norm": "l3"}, {"loss_direction": "x"}, {"anchor_step": "x"}):
            with pytest.raises(ValueError):
                CpmuConfig(**bad)
