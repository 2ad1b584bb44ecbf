import numpy as np
import pytest

from mtcrl import tensor as T
from mtcrl.model import (Mlp, ModelError, MtlModel, TapeBinding, UnknownTaskError,
                         load_checkpoint, route, routing_weights, save_checkpoint)
from mtcrl.oracles import BayesParams, bayes_posterior


def make_model(tasks=2, k=4, input_dim=6, total_dim=8, hidden=(5,), seed=0,
               head_out=None, kinds=None, activation="tanh"):
    rng = np.random.default_rng(seed)
    return MtlModel(tasks=tasks, k=k, input_dim=input_dim, total_dim=total_dim,
                    encoder_hidden=hidden, encoder_activation=activation,
                    head_hidden=(), head_out_dims=head_out or [1] * tasks,
                    loss_kinds=kinds or ["mse"] * tasks, rng=rng)


def fresh_binding():
    return TapeBinding(T.Tape())


class TestEncode:
    def test_output_shape_contract(self):
        model = make_model()
        zs = model.encode(fresh_binding(), np.random.default_rng(1).normal(size=(4, 6)))
        assert len(zs) == 4
        assert all(z.shape == (4, 2) for z in zs)

    def test_single_module_is_shared_bottom(self):
        model = make_model(k=1, total_dim=8)
        zs = model.encode(fresh_binding(), np.zeros((3, 6)))
        assert len(zs) == 1 and zs[0].shape == (3, 8)

    def test_zero_weights_give_zero_outputs(self):
        model = make_model()
        for p in model.bank.parameters():
            p.value[:] = 0.0
        zs = model.encode(fresh_binding(), np.ones((3, 6)))
        for z in zs:
            np.testing.assert_array_equal(z.data, 0.0)

    def test_input_dim_mismatch(self):
        with pytest.raises(ModelError, match="input dim"):
            make_model().encode(fresh_binding(), np.ones((2, 7)))

    def test_dim_not_divisible_by_k(self):
        with pytest.raises(ModelError, match="divisible"):
            make_model(k=3, total_dim=8)


class TestRoute:
    def test_one_hot_selects_module(self):
        rng = np.random.default_rng(2)
        zs = [T.Tensor(rng.normal(size=(3, 2))) for _ in range(4)]
        row = T.Tensor(np.array([[0.0, 0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(route(row, zs).data, zs[2].data)

    def test_all_zero_weights_annihilate(self):
        zs = [T.Tensor(np.ones((2, 2))) for _ in range(3)]
        out = route(T.Tensor(np.zeros((1, 3))), zs)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_cancellation(self):
        z = np.random.default_rng(3).normal(size=(3, 2))
        out = route(T.Tensor(np.array([[0.5, 0.5]])),
                    [T.Tensor(z), T.Tensor(-z)])
        np.testing.assert_allclose(out.data, 0.0, atol=1e-16)

    def test_length_mismatch(self):
        with pytest.raises(ModelError, match="routing row"):
            route(T.Tensor(np.zeros((1, 2))), [T.Tensor(np.zeros((2, 2)))] * 3)


class TestRoutingWeights:
    def test_zero_logits_give_half(self):
        a = routing_weights(T.Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(a.data, 0.5)

    def test_monotone_toward_one(self):
        thetas = np.array([0.0, 1.0, 5.0, 20.0, 60.0])
        a = routing_weights(T.Tensor(thetas)).data
        assert np.all(np.diff(a) >= 0) and a[-1] == pytest.approx(1.0, abs=1e-12)

    def test_four_decimal_example(self):
        a = routing_weights(T.Tensor(np.array([[-2.0, 2.0]]))).data
        np.testing.assert_allclose(a, [[0.1192, 0.8808]], atol=5e-5)

    def test_recomputed_after_update(self):
        model = make_model()
        before = model.routing.matrix().copy()
        model.routing.theta.value += 1.0
        assert not np.allclose(model.routing.matrix(), before)


class TestPredict:
    def test_identity_head_one_hot_routing(self):
        model = make_model(k=2, total_dim=4, hidden=(), head_out=[2, 2])
        # head 0 := identity on the fused representation
        w, b = model.heads[0].layers[0]
        w.value = np.eye(2)
        b.value[:] = 0.0
        model.routing.theta.value[0] = [60.0, -60.0]  # saturates to (1, 0)
        binding = fresh_binding()
        x = np.random.default_rng(4).normal(size=(3, 6))
        zs = model.encode(binding, x)
        out = model.predict(binding, 0, zs=zs)
        np.testing.assert_allclose(out.data, zs[0].data, atol=1e-12)

    def test_unknown_task(self):
        with pytest.raises(UnknownTaskError):
            make_model().predict(fresh_binding(), 5, x=np.ones((1, 6)))

    def test_sign_agrees_with_bayes_classifier_on_noiseless_inputs(self):
        # weights set to the fully-coupled closed-form classifier [2ba, 2bb]
        rng = np.random.default_rng(5)
        d = 3
        mu_a, mu_b = rng.normal(size=d), rng.normal(size=d)
        params = BayesParams.from_moments(mu_a, 1.0, mu_b, 1.0, 1.0)
        model = make_model(tasks=1, k=1, input_dim=2 * d, total_dim=2 * d,
                           hidden=(), head_out=[1])
        enc_w, enc_b = model.bank.encoders[0].layers[0]
        enc_w.value = np.eye(2 * d)
        enc_b.value[:] = 0.0
        head_w, head_b = model.heads[0].layers[0]
        head_w.value = np.concatenate([2 * params.beta_a,
                                       2 * params.beta_b])[:, None]
        head_b.value[:] = 0.0
        model.routing.theta.value[:] = 60.0  # routing weight saturates to 1
        for y_a, y_b in [(1, 1), (-1, -1)]:  # noiseless: F = y * mu
            f_a, f_b = y_a * mu_a, y_b * mu_b
            x = np.concatenate([f_a, f_b])[None, :]
            pred = model.predict(fresh_binding(), 0, x=x).item()
            post = bayes_posterior(f_a, f_b, params)
            assert (pred >= 0) == (post >= 0.5)

    def test_k1_t1_equals_plain_feedforward_exactly(self):
        model = make_model(tasks=1, k=1, input_dim=6, total_dim=8, hidden=(5,),
                           head_out=[1])
        x = np.random.default_rng(6).normal(size=(4, 6))
        out = model.predict(fresh_binding(), 0, x=x).data
        # same arithmetic chain with plain numpy; tanh only between layers
        (w1, b1), (w2, b2) = model.bank.encoders[0].layers
        h = np.tanh(x @ w1.value + b1.value) @ w2.value + b2.value
        fused = h * model.routing.matrix()[0, 0]
        hw, hb = model.heads[0].layers[0]
        expected = fused @ hw.value + hb.value
        np.testing.assert_array_equal(out, expected)

    def test_routing_linearity(self):
        model = make_model(k=3, total_dim=6, head_out=[1, 1])
        binding = fresh_binding()
        x = np.random.default_rng(7).normal(size=(4, 6))
        zs = model.encode(binding, x)
        coeffs = np.array([[0.2, 0.5, 0.3]])
        fused = route(T.Tensor(coeffs), zs)
        manual = sum(c * z.data for c, z in zip(coeffs[0], zs))
        np.testing.assert_allclose(fused.data, manual, atol=1e-15)
        via_head = model.heads[0].forward(binding, fused).data
        direct = model.heads[0].forward(binding, T.Tensor(manual)).data
        np.testing.assert_allclose(via_head, direct, atol=1e-15)

    def test_gradient_flows_to_theta(self):
        model = make_model()
        tape = T.Tape()
        binding = TapeBinding(tape)
        x = np.random.default_rng(8).normal(size=(5, 6))
        pred = model.predict(binding, 0, x=x)
        loss = T.mean(T.square(pred))
        theta_leaf = binding.leaf(model.routing.theta)
        g = T.grad(loss, [theta_leaf]).get(theta_leaf)
        assert np.any(g.data[0] != 0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = make_model(seed=9)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, "abc123")
        clone = make_model(seed=10)
        clone.heads[0].layers[0][0].value += 1.0
        assert load_checkpoint(path, clone) == "abc123"
        for p, q in zip(model.parameters(), clone.parameters()):
            np.testing.assert_array_equal(p.value, q.value)

    def test_missing_parameter_rejected(self, tmp_path):
        model = make_model()
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, model, "h")
        bigger = make_model(k=2, total_dim=8)
        with pytest.raises(ModelError):
            load_checkpoint(path, bigger)


def test_mlp_rejects_unknown_activation():
    with pytest.raises(ModelError, match="activation"):
        Mlp("m", (3, 2), "softplus", np.random.default_rng(0))
