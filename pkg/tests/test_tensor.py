import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcrl import tensor as T


def scalar_tape(*arrays):
    tape = T.Tape()
    return tape, [tape.leaf(a, trainable=True) for a in arrays]


class TestForwardValues:
    def test_sigmoid_symmetry_point(self):
        assert T.sigmoid(T.Tensor(0.0)).item() == pytest.approx(0.5, abs=0)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 5))
        out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_uniform_softmax_cross_entropy(self):
        logits = T.Tensor(np.zeros((4, 7)))
        losses = T.softmax_cross_entropy(logits, np.arange(4))
        np.testing.assert_allclose(losses.data, np.log(7.0), rtol=0, atol=1e-15)

    def test_record_dispatch(self):
        tape = T.Tape()
        x = tape.leaf([[1.0, -2.0]], trainable=True)
        out = T.record("relu", [x])
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])
        with pytest.raises(T.TensorError):
            T.record("convolve", [x])

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(T.ShapeMismatchError, match="matmul.*2, 3.*4, 5"):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))

    def test_log_domain_error(self):
        with pytest.raises(T.DomainError, match="log"):
            T.log(T.Tensor([1.0, 0.0]))


class TestFirstOrderGradients:
    def test_square_at_three(self):
        tape, (x,) = scalar_tape(3.0)
        gm = T.grad(T.square(x), [x])
        assert gm.get(x).item() == pytest.approx(6.0, abs=0)

    def test_sigmoid_at_zero(self):
        tape, (x,) = scalar_tape(0.0)
        gm = T.grad(T.sigmoid(x), [x])
        assert gm.get(x).item() == pytest.approx(0.25, abs=1e-15)

    def test_nonscalar_output_rejected(self):
        tape, (x,) = scalar_tape(np.ones(3))
        with pytest.raises(T.NonScalarOutputError):
            T.grad(T.square(x), [x])

    def test_stale_tape_rejected(self):
        tape, (x,) = scalar_tape(2.0)
        out = T.square(x)
        tape.reset()
        with pytest.raises(T.StaleTapeError):
            T.grad(out, [x])

    def test_unreachable_parameter_gets_zeros(self):
        tape = T.Tape()
        x = tape.leaf(1.5, trainable=True)
        unused = tape.leaf(np.ones((2, 2)), trainable=True)
        gm = T.grad(T.square(x), [x, unused])
        np.testing.assert_array_equal(gm.get(unused).data, np.zeros((2, 2)))

    def test_detached_parameter_gets_exact_zeros(self):
        tape = T.Tape()
        x = tape.leaf(1.0, trainable=True)
        y = tape.leaf(2.0, trainable=True)
        out = T.multiply(T.square(x), y)
        gm = T.grad(out, [x, y], detached=[y])
        assert gm.get(x).item() == pytest.approx(4.0)
        assert gm.get(y).data == 0.0

    def test_constant_blocks_gradient(self):
        tape, (x,) = scalar_tape(3.0)
        out = T.multiply(x.detach(), x)
        gm = T.grad(out, [x])
        assert gm.get(x).item() == pytest.approx(3.0)


class TestSecondOrder:
    def test_grad_of_inner_gradient_norm(self):
        # f(w) = w.w, inner grad 2w, penalty ||2w||^2 = 4 w.w, outer grad 8w
        tape = T.Tape()
        w = tape.leaf([1.0, 2.0], trainable=True)
        inner = T.grad(T.sum_(T.square(w)), [w], create_graph=True)
        penalty = T.l2_norm_sq(inner.get(w))
        outer = T.grad(penalty, [w])
        np.testing.assert_allclose(outer.get(w).data, [8.0, 16.0], atol=1e-12)

    def test_example_matches_finite_differences(self):
        err = T.finite_diff_check(
            lambda w: T.sum_(T.square(w)), [np.array([1.0, 2.0])],
            step=1e-5, order=2,
        )
        assert err < 1e-8

    def test_backward_appends_only(self):
        tape = T.Tape()
        w = tape.leaf([0.3, -0.7], trainable=True)
        out = T.sum_(T.square(T.tanh(w)))
        n_before = len(tape.nodes)
        T.grad(out, [w], create_graph=True)
        assert len(tape.nodes) > n_before
        assert all(tape.nodes[i].nid == i for i in range(len(tape.nodes)))


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        def f(w):
            return T.sum_(T.square(w))

        err = T.finite_diff_check(f, [np.array([0.5, -1.2, 2.0])], step=1e-4)
        assert err < 1e-8

    def test_random_two_layer_tanh_network(self):
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(4, 4))
        w2 = rng.normal(size=(4, 1))
        x = rng.normal(size=(3, 4))

        def f(a, b):
            h = T.tanh(T.matmul(T.Tensor(x), a))
            return T.sum_(T.matmul(h, b))

        assert T.finite_diff_check(f, [w1, w2], step=1e-5) < 1e-4

    def test_constant_function(self):
        def f(w):
            return T.sum_(T.multiply(w, 0.0))

        assert T.finite_diff_check(f, [np.ones(4)], step=1e-5) == 0.0

    def test_nonfinite_objective_rejected(self):
        def f(w):
            return T.sum_(T.exp(T.scale(w, 1000.0)))

        with pytest.raises(T.NonFiniteError):
            T.finite_diff_check(f, [np.ones(2)], step=1e-5)


def _op_cases(rng):
    """Scalar objectives exercising every supported op, away from kinks."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    m = rng.normal(size=(4, 2))
    pos = np.abs(rng.normal(size=(3, 3))) + 0.5
    away = rng.normal(size=(3, 4))
    away[np.abs(away) < 0.1] = 0.5  # relu/abs kink margin >> fd step
    labels = rng.integers(0, 2, size=3)
    return [
        ("add", lambda x, y: T.sum_(T.add(x, y)), [a, b], 1e-6),
        ("subtract", lambda x, y: T.sum_(T.square(T.subtract(x, y))), [a, b], 1e-6),
        ("multiply", lambda x, y: T.sum_(T.multiply(x, y)), [a, b], 1e-6),
        ("broadcast-mul", lambda x, y: T.sum_(T.multiply(x, y)), [a, rng.normal(size=(1, 4))], 1e-6),
        ("matmul", lambda x, y: T.sum_(T.matmul(x, y)), [a, m], 1e-6),
        ("sigmoid", lambda x: T.sum_(T.sigmoid(x)), [a], 1e-6),
        ("tanh", lambda x: T.sum_(T.tanh(x)), [a], 1e-6),
        ("relu", lambda x: T.sum_(T.relu(x)), [away], 1e-4),
        ("mean-axis", lambda x: T.sum_(T.square(T.mean(x, axis=0))), [a], 1e-6),
        ("sum-keepdims", lambda x: T.sum_(T.square(T.sum_(x, axis=1, keepdims=True))), [a], 1e-6),
        ("square", lambda x: T.sum_(T.square(x)), [a], 1e-6),
        ("absolute", lambda x: T.sum_(T.absolute(x)), [away], 1e-4),
        ("l1", T.l1_norm, [away], 1e-4),
        ("l2sq", T.l2_norm_sq, [a], 1e-6),
        ("xent", lambda x: T.mean(T.softmax_cross_entropy(x, labels)), [rng.normal(size=(3, 2))], 1e-6),
        ("log", lambda x: T.sum_(T.log(x)), [pos], 1e-6),
        ("exp", lambda x: T.sum_(T.exp(x)), [a * 0.3], 1e-6),
        ("concat", lambda x, y: T.sum_(T.square(T.concatenate([x, y], axis=1))), [a, b], 1e-6),
        ("slice", lambda x: T.sum_(T.square(T.narrow(x, 1, 1, 2))), [a], 1e-6),
        ("scale", lambda x: T.sum_(T.scale(x, -2.5)), [a], 1e-6),
        ("pow", lambda x: T.sum_(T.pow_const(x, -0.5)), [pos], 1e-6),
        ("transpose", lambda x: T.sum_(T.square(T.transpose(x))), [a], 1e-6),
        ("reshape", lambda x: T.sum_(T.square(T.reshape(x, (4, 3)))), [a], 1e-6),
    ]


@pytest.mark.parametrize("case", _op_cases(np.random.default_rng(11)), ids=lambda c: c[0])
def test_every_op_matches_finite_differences(case):
    name, f, params, tol = case
    assert T.finite_diff_check(f, params, step=1e-5) < tol, name


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_composites_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    w = rng.normal(size=(3, 2))

    def f(a, b):
        h = T.tanh(T.matmul(a, b))
        s = T.sigmoid(T.mean(h, axis=0, keepdims=True))
        return T.add(T.l2_norm_sq(s), T.mean(T.square(h)))

    assert T.finite_diff_check(f, [x, w], step=1e-5) < 1e-5


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_second_order_penalty_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2)) * 0.5

    def f(a):
        return T.mean(T.square(T.tanh(T.matmul(T.Tensor(x), a))))

    assert T.finite_diff_check(f, [w], step=1e-4, order=2) < 1e-3


def test_tape_determinism_bitwise():
    def run(seed):
        rng = np.random.default_rng(seed)
        tape = T.Tape()
        w = tape.leaf(rng.normal(size=(5, 3)), trainable=True)
        x = tape.leaf(rng.normal(size=(6, 5)))
        out = T.mean(T.square(T.tanh(T.matmul(x, w))))
        gm = T.grad(out, [w])
        return out.data.tobytes(), gm.get(w).data.tobytes()

    assert run(42) == run(42)
    assert run(42) != run(43)
