import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swintormer import tensor as T
from swintormer.tensor import NonFiniteError, Tensor

from conftest import leaf


def _check(f, leaves, tol=1e-6):
    rep = T.gradcheck(f, leaves, h=1e-5, tol=tol)
    assert rep.passed, str(rep)
    return rep


class TestForwardOracles:
    def test_matmul_matches_numpy(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-14)

    def test_conv1x1_is_per_pixel_matmul(self, rng):
        x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        out = T.conv1x1(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(out[i, j], x[i, j] @ w + b, rtol=1e-13)

    def test_dwconv3x3_brute_force(self, rng):
        x, w = rng.standard_normal((5, 4, 2)), rng.standard_normal((3, 3, 2))
        out = T.dwconv3x3(Tensor(x), Tensor(w)).data
        pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        ref = np.zeros_like(x)
        for i in range(5):
            for j in range(4):
                ref[i, j] = np.sum(pad[i:i + 3, j:j + 3] * w, axis=(0, 1))
        np.testing.assert_allclose(out, ref, rtol=1e-13, atol=1e-14)

    def test_softmax_rows_sum_to_one_and_mask_is_exact_zero(self, rng):
        x = rng.standard_normal((4, 6)) * 10
        mask = rng.uniform(size=(4, 6)) < 0.6
        mask[:, 0] = True
        p = T.softmax(Tensor(x), mask=mask).data
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
        assert np.all(p[~mask] == 0.0)

    def test_layernorm_normalizes(self, rng):
        x = rng.standard_normal((3, 8)) * 5 + 2
        y = T.layernorm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-4)

    def test_pixel_shuffle_inverts_unshuffle(self, rng):
        x = Tensor(rng.standard_normal((2, 4, 6, 3)))
        back = T.pixel_shuffle(T.pixel_unshuffle(x))
        assert np.array_equal(back.data, x.data)

    def test_gelu_tanh_form(self):
        x = np.array([0.0, 1.0, -1.0, 3.0])
        ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14)


class TestGradients:
    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_binary(self, rng, op):
        a, b = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        r = rng.standard_normal((3, 4))
        _check(lambda: T.sum_(T.mul(op(a, b), Tensor(r))), [a, b])

    def test_batched_matmul(self, rng):
        a, b = leaf(rng, (2, 3, 4, 5)), leaf(rng, (2, 3, 5, 2))
        r = rng.standard_normal((2, 3, 4, 2))
        _check(lambda: T.sum_(T.mul(T.matmul(a, b), Tensor(r))), [a, b])

    def test_layernorm(self, rng):
        x, g, b = leaf(rng, (2, 3, 6)), leaf(rng, (6,)), leaf(rng, (6,))
        r = rng.standard_normal((2, 3, 6))
        _check(lambda: T.sum_(T.mul(T.layernorm(x, g, b), Tensor(r))), [x, g, b])

    def test_shared_leaf_accumulates(self, rng):
        a = leaf(rng, (3,))
        _check(lambda: T.sum_(T.mul(T.add(a, a), a)), [a])

    def test_gradcheck_flags_a_wrong_gradient(self, rng):
        x = leaf(rng, (4,))

        def wrong(t):
            return T.custom_op(t.data**2, (t,), lambda g: (g * t.data,))  # should be 2x
        rep = T.gradcheck(lambda: T.sum_(wrong(x)), [x])
        assert not rep.passed


class TestEngine:
    def test_no_grad_builds_no_graph(self, rng):
        a = leaf(rng, (2, 2))
        with T.no_grad():
            out = T.mul(a, a)
        assert not out.requires_grad

    def test_mac_counter_conv1x1(self, rng):
        with T.count_macs() as c:
            T.conv1x1(Tensor(rng.standard_normal((2, 2, 3))), Tensor(rng.standard_normal((3, 4))))
        assert c.macs == 48

    def test_mac_counter_dwconv(self, rng):
        with T.count_macs() as c:
            T.dwconv3x3(Tensor(rng.standard_normal((4, 5, 2))), Tensor(rng.standard_normal((3, 3, 2))))
        assert c.macs == 9 * 4 * 5 * 2

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
            T.mul(Tensor([1e200]), Tensor([1e200]))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_gradient_random_shapes(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r, (m, k)), leaf(r, (k, n))
    w = r.standard_normal((m, n))
    rep = T.gradcheck(lambda: T.sum_(T.mul(T.matmul(a, b), Tensor(w))), [a, b])
    assert rep.passed, str(rep)
