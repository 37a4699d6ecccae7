import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from bfftraj.errors import FormatError, NumericError, ParameterError
from bfftraj.numcore import (
    AdamState, Tensor, adam_step, add, concat, dropout, embed_linear, grad_check, layer_norm, load_params,
    matmul, mse, mul, relu, reshape, save_params, scale, select, softmax_rows, tensor_sum, transpose,
)

RNG = np.random.default_rng(20240601)


def leaf(*shape):
    return Tensor(RNG.normal(size=shape), requires_grad=True)


def weighted(t, w):
    """Scalar probe sum(t * w) with a fixed random weight."""
    return tensor_sum(mul(t, Tensor(w)))


def probe(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


# each case builds (closure, params) for an isolated op
def _cases():
    a, b = leaf(2, 3, 4), leaf(4, 5)
    yield "matmul", (lambda: weighted(matmul(a, b), probe((2, 3, 5), 1))), [a, b]
    x, bias = leaf(3, 4), leaf(4)
    yield "add", (lambda: weighted(add(x, bias), probe((3, 4), 2))), [x, bias]
    u, v = leaf(3, 4), leaf(3, 4)
    yield "mul", (lambda: weighted(mul(u, v), probe((3, 4), 3))), [u, v]
    s = leaf(2, 5)
    yield "scale", (lambda: weighted(scale(s, -1.7), probe((2, 5), 4))), [s]
    t = leaf(2, 3, 4)
    yield "transpose", (lambda: weighted(transpose(t), probe((2, 4, 3), 5))), [t]
    r = Tensor(RNG.uniform(0.2, 1.0, size=(3, 4)) * RNG.choice([-1, 1], size=(3, 4)), True)
    yield "relu", (lambda: weighted(relu(r), probe((3, 4), 6))), [r]
    sm = leaf(2, 3, 4)
    mask = np.tril(np.ones((3, 4), dtype=bool))
    yield "softmax_rows", (lambda: weighted(softmax_rows(sm, mask), probe((2, 3, 4), 7))), [sm]
    d = leaf(4, 6)
    yield "dropout", (lambda: weighted(dropout(d, 0.3, 11, True), probe((4, 6), 8))), [d]
    ln, g, be = leaf(3, 5), leaf(5), leaf(5)
    yield "layer_norm", (lambda: weighted(layer_norm(ln, g, be), probe((3, 5), 9))), [ln, g, be]
    e, w, eb = leaf(2, 3, 4), leaf(4, 6), leaf(6)
    yield "embed_linear", (lambda: weighted(embed_linear(e, w, eb), probe((2, 3, 6), 10))), [e, w, eb]
    p = leaf(4, 2)
    target = probe((4, 2), 11)
    yield "mse", (lambda: mse(p, target)), [p]
    c1, c2 = leaf(2, 3), leaf(2, 2)
    yield "concat", (lambda: weighted(concat([c1, c2], -1), probe((2, 5), 12))), [c1, c2]
    rs = leaf(2, 6)
    yield "reshape", (lambda: weighted(reshape(rs, (3, 4)), probe((3, 4), 13))), [rs]
    sl = leaf(3, 4)
    yield "select", (lambda: weighted(select(sl, (slice(None), -1)), probe((3,), 14))), [sl]


@pytest.mark.parametrize("name,f,params", list(_cases()), ids=[c[0] for c in _cases()])
def test_isolated_grad_check(name, f, params):
    assert grad_check(f, params, epsilon=1e-6) < 1e-6


class TestForwardValues:
    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_softmax_high_precision(self):
        mpmath.mp.dps = 40
        ex = [mpmath.e ** k for k in (1, 2, 3)]
        want = [float(v / sum(ex)) for v in ex]
        got = softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
        np.testing.assert_allclose(got, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)

    def test_softmax_mask_gives_exact_zero(self):
        y = softmax_rows(Tensor(np.zeros((2, 3))), np.array([[True, False, True], [True, True, True]])).data
        assert y[0, 1] == 0.0 and y[0, 0] == 0.5

    def test_fully_masked_row(self):
        with pytest.raises(ParameterError):
            softmax_rows(Tensor(np.zeros((1, 2))), np.zeros((1, 2), dtype=bool))

    def test_relu(self):
        np.testing.assert_array_equal(relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])

    def test_dropout_identities(self):
        x = Tensor(RNG.normal(size=(4, 4)))
        assert dropout(x, 0.0, 1, train=True) is x
        assert dropout(x, 0.5, 1, train=False) is x
        with pytest.raises(ParameterError):
            dropout(x, 1.0, 1)

    def test_mse_self_is_zero(self):
        p = Tensor(RNG.normal(size=(3, 2)))
        assert mse(p, p).item() == 0.0

    def test_accumulates_over_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        tensor_sum(mul(x, x)).backward()
        assert x.grad[0] == pytest.approx(4.0)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ParameterError):
            mul(Tensor(np.ones(2)), Tensor(np.ones(3)))
        with pytest.raises(ParameterError):
            add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))
        with pytest.raises(ParameterError):
            mse(Tensor(np.ones(2)), np.ones(3))

    def test_non_finite(self):
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            scale(Tensor([1e308]), 10.0)
        with pytest.raises(NumericError):
            add(Tensor([np.inf]), Tensor([1.0]))

    def test_backward_needs_scalar(self):
        with pytest.raises(ParameterError):
            scale(Tensor(np.ones(3), True), 2.0).backward()


class TestProperties:
    rows = arrays(np.float64, (3, 6), elements=st.floats(-30, 30))

    @given(rows, st.floats(-50, 50))
    def test_softmax_rows_sum_and_shift(self, x, c):
        y = softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(softmax_rows(Tensor(x + c)).data, y, atol=1e-12)

    @given(rows)
    def test_layer_norm_moments(self, x):
        assume((x.std(axis=-1) > 1e-2).all())
        y = layer_norm(Tensor(x), np.ones(6), np.zeros(6)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-8)

    def test_dropout_deterministic_and_binomial(self):
        x = Tensor(np.ones(100_000))
        a, b = dropout(x, 0.1, 42).data, dropout(x, 0.1, 42).data
        assert np.array_equal(a, b)
        kept = (a > 0).sum()
        n, q = 100_000, 0.9
        assert abs(kept - n * q) <= 3 * math.sqrt(n * q * (1 - q))
        np.testing.assert_allclose(a[a > 0], 1 / 0.9)


class TestGradCheck:
    def test_linear_mse_is_tight(self):
        w = Tensor(RNG.normal(size=(5, 3)), True)
        x = RNG.normal(size=(40, 5))
        y = RNG.normal(size=(40, 3))
        assert grad_check(lambda: mse(matmul(x, w), y), [w], epsilon=1e-3) < 1e-8

    def test_constant_function(self):
        w = Tensor(RNG.normal(size=(4,)), True)
        assert grad_check(lambda: tensor_sum(scale(w, 0.0)), [w]) == 0.0

    def test_epsilon_range(self):
        w = Tensor(np.ones(2), True)
        with pytest.raises(ParameterError):
            grad_check(lambda: tensor_sum(w), [w], epsilon=1e-2)

    def test_detects_wrong_gradient(self):
        w = Tensor(RNG.normal(size=(3,)), True)

        def broken():
            out = tensor_sum(mul(w, w))
            out._backward = lambda g: (g * 0.0,)
            return out

        assert grad_check(broken, [w]) > 0.5


class TestAdam:
    def test_first_step_magnitude(self):
        p = np.array([0.5])
        adam_step([p], [np.array([3.0])], AdamState.for_params([p]))
        assert 0.5 - p[0] == pytest.approx(1e-3, rel=1e-6)

    def test_zero_gradient(self):
        p = np.array([1.0, -2.0])
        st_ = AdamState.for_params([p])
        adam_step([p], [np.zeros(2)], st_)
        np.testing.assert_array_equal(p, [1.0, -2.0])
        assert st_.t == 1

    def test_quadratic_matches_scalar_simulation(self):
        p = np.array([1.0])
        state = AdamState.for_params([p])
        m = v = 0.0
        theta = 1.0
        trace = []
        for t in range(1, 51):
            adam_step([p], [2 * p.copy()], state)
            g = 2 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 1e-3 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
            assert p[0] == pytest.approx(theta, abs=1e-15)
            trace.append(abs(p[0]))
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            adam_step([np.ones(2)], [np.ones(3)], AdamState())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a.w": RNG.normal(size=(3, 4)), "b": RNG.normal(size=(7,)), "s": np.array(2.5)}
        save_params(tmp_path / "m.bfnn", params, {"seed": 1})
        back, meta = load_params(tmp_path / "m.bfnn")
        assert meta == {"seed": 1}
        assert list(back) == list(params)
        for k in params:
            assert np.array_equal(back[k], params[k])

    def test_bad_file(self, tmp_path):
        (tmp_path / "m.bfnn").write_bytes(b"BFNX" + bytes(20))
        with pytest.raises(FormatError):
            load_params(tmp_path / "m.bfnn")
