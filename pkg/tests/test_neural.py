import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slateope.core import LoggedDataset, SlateSpace
from slateope.neural import (
    AdamState,
    Mlp,
    adam_step,
    finite_difference_grad,
    log_softmax,
    loss_and_grad,
    mlp_forward,
    mlp_grad,
    norm_relative_error,
    relative_error,
    train_reward_model,
)
from slateope.synthenv import EnvConfig, build_env, generate_logs, make_policies


def perturbed(net, rng, scale=0.3):
    for p in net.params.values():
        p += scale * rng.standard_normal(p.shape)
    return net


def const_dataset(n, c, rng, space=SlateSpace((3, 2))):
    S = np.stack([rng.integers(0, a, n) for a in space.slot_sizes], axis=1)
    ps = np.full((n, space.n_slots), 0.5)
    return LoggedDataset(rng.standard_normal((n, 3)), S, np.full(n, c), ps.prod(axis=1), ps), space


class TestForward:
    def test_zero_network(self):
        net = Mlp({"W1": np.zeros((3, 4)), "b1": np.zeros(4), "W2": np.zeros((4, 2)), "b2": np.zeros(2)})
        np.testing.assert_array_equal(mlp_forward(net, np.ones(3)), [0.0, 0.0])

    def test_hand_computation(self):
        net = Mlp({"W1": np.ones((1, 1)), "b1": np.zeros(1), "W2": np.ones((1, 1)), "b2": np.zeros(1)})
        assert mlp_forward(net, np.array([2.0]))[0] == 2.0
        assert mlp_forward(net, np.array([-2.0]))[0] == 0.0

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(0)
        net = Mlp.init(4, 3, 6, rng=rng)
        X = rng.standard_normal((5, 4))
        batch = mlp_forward(net, X)
        for i in range(5):
            np.testing.assert_allclose(mlp_forward(net, X[i]), batch[i], rtol=1e-12, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(Mlp.init(4, 2, 3), np.zeros(5))

    def test_log_softmax_groups_normalise(self):
        rng = np.random.default_rng(1)
        net = Mlp.init(3, 5, 4, head="log_softmax", groups=(2, 3), rng=rng)
        out = np.exp(net.forward(rng.standard_normal((7, 3))))
        np.testing.assert_allclose(out[:, :2].sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out[:, 2:].sum(axis=1), 1.0, atol=1e-12)

    def test_log_softmax_stable(self):
        assert np.all(np.isfinite(log_softmax(np.array([[1e300, -1e300, 0.0]]))))

    def test_bad_groups(self):
        with pytest.raises(ValueError):
            Mlp.init(3, 5, 4, head="log_softmax", groups=(2, 2))
        with pytest.raises(ValueError):
            Mlp.init(3, 5, 4, head="tanh")


class TestGradients:
    def test_zero_at_minimum(self):
        net = Mlp.init(3, 2, 4, rng=np.random.default_rng(0))
        X = np.random.default_rng(1).standard_normal((4, 3))
        grads = mlp_grad(net, "squared", X, net.forward(X))
        assert all(np.all(g == 0) for g in grads.values())

    @pytest.mark.parametrize("seed", range(5))
    def test_squared_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = perturbed(Mlp.init(5, 3, 4, rng=rng), rng)
        X, y = rng.standard_normal((8, 5)), rng.standard_normal((8, 3))
        a, n = mlp_grad(net, "squared", X, y), finite_difference_grad(net, "squared", X, y)
        assert max(norm_relative_error(a[k], n[k]) for k in a) < 1e-4
        assert max(relative_error(a[k], n[k]) for k in a) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_nll_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = perturbed(Mlp.init(5, 5, 4, head="log_softmax", groups=(2, 3), rng=rng), rng)
        X = rng.standard_normal((8, 5))
        y = np.stack([rng.integers(0, 2, 8), rng.integers(0, 3, 8)], axis=1)
        a, n = mlp_grad(net, "nll", X, y), finite_difference_grad(net, "nll", X, y)
        assert max(norm_relative_error(a[k], n[k]) for k in a) < 1e-4

    def test_duplicated_batch_same_gradient(self):
        rng = np.random.default_rng(3)
        net = Mlp.init(4, 2, 5, rng=rng)
        X, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 2))
        g1 = mlp_grad(net, "squared", X, y)
        g2 = mlp_grad(net, "squared", np.vstack([X, X]), np.vstack([y, y]))
        for k in g1:
            np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)

    def test_unknown_loss(self):
        with pytest.raises(ValueError):
            mlp_grad(Mlp.init(2, 1, 2), "hinge", np.zeros((1, 2)), np.zeros(1))

    def test_nll_needs_softmax_head(self):
        with pytest.raises(ValueError):
            loss_and_grad(Mlp.init(2, 2, 2), np.zeros((1, 2)), np.zeros((1, 1), int), "nll")


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        adam_step(AdamState(lr=0.1), params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), min_size=1, max_size=5))
    def test_first_step_is_signed_lr(self, g):
        g = np.array(g)
        params = {"w": np.zeros_like(g)}
        adam_step(AdamState(lr=0.01), params, {"w": g})
        np.testing.assert_allclose(params["w"], -0.01 * np.sign(g), rtol=1e-4)

    def test_ascend(self):
        params = {"w": np.zeros(1)}
        adam_step(AdamState(lr=0.5), params, {"w": np.ones(1)}, ascend=True)
        assert params["w"][0] == pytest.approx(0.5, rel=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        g = {"w": rng.standard_normal(3)}
        s1, s2 = AdamState(lr=0.1), AdamState(lr=0.1)
        p1, p2 = {"w": np.ones(3)}, {"w": np.ones(3)}
        for _ in range(2):
            adam_step(s1, p1, g)
            adam_step(s2, p2, g)
        np.testing.assert_array_equal(p1["w"], p2["w"])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


class TestRewardModel:
    def test_constant_target(self):
        data, space = const_dataset(200, 0.6, np.random.default_rng(0))
        model = train_reward_model(data, space, epochs=100, rng=np.random.default_rng(1))
        assert np.max(np.abs(model(data.x, data.s) - 0.6)) < 0.05

    def test_first_epoch_loss_decreases(self):
        # Adam at lr=1e-2 overshoots within the first epoch on about half of
        # the seeds here, so the fixed instance uses a smaller step size.
        env = build_env(EnvConfig(n_slots=4, slot_size=4, context_dim=5))
        data = generate_logs(env, make_policies(env)[0], 1000, np.random.default_rng(100))
        decreasing = 0
        for seed in range(20):
            model = train_reward_model(data, env.space, epochs=1, lr=3e-3, rng=np.random.default_rng(seed))
            decreasing += np.all(np.diff(model.history["checkpoints"]) <= 0)
        assert decreasing >= 18

    def test_deterministic(self):
        data, space = const_dataset(50, 0.2, np.random.default_rng(0))
        a = train_reward_model(data, space, epochs=5, rng=np.random.default_rng(3))
        b = train_reward_model(data, space, epochs=5, rng=np.random.default_rng(3))
        for k in a.mlp.params:
            np.testing.assert_array_equal(a.mlp.params[k], b.mlp.params[k])

    def test_frozen_and_pure(self):
        data, space = const_dataset(50, 0.2, np.random.default_rng(0))
        model = train_reward_model(data, space, epochs=2, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(model(data.x, data.s), model(data.x, data.s))
        with pytest.raises(ValueError):
            model.mlp.params["W1"][0, 0] = 1.0

    def test_too_small(self):
        data, space = const_dataset(9, 0.2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            train_reward_model(data, space, epochs=1)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init(4, 5, 3, head="log_softmax", groups=(2, 3), rng=np.random.default_rng(0))
    net.save(tmp_path / "net.bin")
    back = Mlp.load(tmp_path / "net.bin")
    assert back.head == "log_softmax" and back.groups == (2, 3)
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    with pytest.raises(ValueError):
        Mlp.from_bytes(b"garbage" + net.to_bytes())
