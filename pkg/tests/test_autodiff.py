import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from autopark import autodiff as ad
from autopark import nn
from autopark.autodiff import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 3))
        assert np.array_equal(ad.matmul(np.eye(3), x).data, x)

    def test_annihilator(self):
        out = ad.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros((2, 2))).data
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        assert np.max(np.abs(ad.matmul(a, b).data - naive_matmul(a, b))) < 1e-12

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_transposed_forms(self, rng):
        a, b = leaf(rng, 4, 6), leaf(rng, 6, 3)
        g = rng.normal(size=(4, 3))
        ad.matmul(a, b).backward(g)
        assert np.max(np.abs(a.grad - g @ b.data.T)) < 1e-10
        assert np.max(np.abs(b.grad - a.data.T @ g)) < 1e-10


class TestSoftmax:
    def test_symmetric(self):
        assert np.array_equal(ad.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_inputs_stay_finite(self):
        out = ad.softmax(np.array([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 1.0 and out[1] < 1e-300

    def test_formula_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x) / np.exp(x).sum()
        assert np.max(np.abs(ad.softmax(x).data - ref)) < 1e-12

    def test_empty_axis_rejected(self):
        with pytest.raises(ValueError):
            ad.softmax(np.zeros((3, 0)), axis=-1)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, x):
        out = ad.softmax(x, axis=-1).data
        assert np.all(out >= 0)
        assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-9


class TestCrossEntropy:
    def test_saturated(self):
        logits = np.zeros((3, 5))
        t = np.array([1, 4, 0])
        logits[np.arange(3), t] = 30.0
        assert ad.cross_entropy(logits, t).item() < 1e-10

    def test_margin_30_below_1e10(self):
        logits = np.full((2, 70), -15.0)
        t = np.array([3, 69])
        logits[np.arange(2), t] = 15.0 + math.log(70)  # margin > 30 over 69 competitors
        assert ad.cross_entropy(logits, t).item() < 1e-10

    def test_uniform(self):
        assert abs(ad.cross_entropy(np.zeros((4, 7)), [0, 1, 2, 6]).item() - math.log(7)) < 1e-14

    def test_log_softmax_oracle(self, rng):
        logits = rng.normal(size=(3, 5))
        t = np.array([2, 0, 4])
        lsm = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        ref = -lsm[np.arange(3), t].mean()
        assert abs(ad.cross_entropy(logits, t).item() - ref) < 1e-12

    def test_out_of_range_target(self):
        with pytest.raises(ValueError, match="outside"):
            ad.cross_entropy(np.zeros((2, 3)), [0, 3])


class TestBackward:
    def test_square_derivative(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_disconnected_leaf_gets_zero(self, rng):
        x, y = leaf(rng, 3), leaf(rng, 3)
        grads = ad.gradients((x * 2.0).sum(), [x, y])
        assert np.array_equal(grads[1], np.zeros(3))

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ad.GradientError):
            (leaf(rng, 3) * 2.0).backward()

    def test_fan_out_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        (x * x + x * 3.0).backward()
        assert x.grad == 7.0

    def test_mlp_finite_difference(self, rng):
        mlp = nn.MLP(rng, 4, 8, 3)
        x = rng.normal(size=(5, 4))
        t = np.array([0, 2, 1, 1, 0])
        err = ad.finite_diff_check(lambda: ad.cross_entropy(mlp(x), t), mlp.parameters())
        assert err < 1e-4

    def test_deterministic_forward(self, rng):
        mlp = nn.MLP(rng, 4, 8, 3)
        x = rng.normal(size=(5, 4))
        assert np.array_equal(mlp(x).data, mlp(x).data)


class TestFiniteDiffCheck:
    def test_quadratic_form(self, rng):
        a = rng.normal(size=(4, 4))
        x = leaf(rng, 4, 1)
        err = ad.finite_diff_check(lambda: ad.matmul(ad.matmul(x.transpose(), a), x).sum(), [x])
        assert err < 1e-9

    def test_softmax_cross_entropy_head(self, rng):
        lin = nn.Linear(rng, 6, 5)
        x = rng.normal(size=(4, 6))
        err = ad.finite_diff_check(lambda: ad.cross_entropy(lin(x), [0, 4, 2, 2]), lin.parameters())
        assert err < 1e-4

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_non_finite_rejected(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        with pytest.raises(FloatingPointError):
            ad.finite_diff_check(lambda: ad.log(x - 1.0).sum(), [x])

    def test_detects_wrong_gradient(self):
        x = Tensor(np.array([0.7]), requires_grad=True)

        def broken():
            return ad._result(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,)).sum()

        assert ad.finite_diff_check(broken, [x]) > 0.1


def _check(fn, params, tol=1e-4):
    err = ad.finite_diff_check(fn, params)
    assert err < tol, err


class TestOpGradients:
    """Every op used by a learnable module passes the central-difference check."""

    def test_elementwise(self, rng):
        a, b = leaf(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        _check(lambda: ((ad.tanh(a) * b + ad.sigmoid(a) / b - ad.exp(a * 0.3) + ad.log(b)
                         + ad.relu(a) + ad.cos(a) * ad.sin(b) + ad.square(a)) * w).sum(), [a, b])

    def test_broadcast_add(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        w = rng.normal(size=(3, 4))
        _check(lambda: ((a + b) * (a - b) * w).sum(), [a, b])

    def test_reductions_and_shapes(self, rng):
        a = leaf(rng, 2, 3, 4)
        w = rng.normal(size=(4, 3))
        _check(lambda: (ad.mean(a, axis=0).transpose() * w).sum() + ad.tsum(a[1, :, 2:]) * 1.0, [a])

    def test_concat_stack_take(self, rng):
        a, b, table = leaf(rng, 2, 3), leaf(rng, 2, 3), leaf(rng, 5, 3)
        w = rng.normal(size=(2, 2, 6))
        ids = np.array([[0, 4], [4, 2]])
        _check(lambda: (ad.stack([ad.concat([a, b], axis=1), ad.concat([b, a], axis=1)]) * w).sum()
               + (ad.take_rows(table, ids) * 1.5).sum() * ad.take_rows(table, ids).sum(), [a, b, table])

    def test_softmax_and_layer_norm(self, rng):
        x = leaf(rng, 3, 6)
        ln = nn.LayerNorm(6)
        ln.gain.data[:] = rng.normal(size=6)
        w = rng.normal(size=(3, 6))
        _check(lambda: (ad.softmax(ln(x), axis=-1) * w).sum(), [x, ln.gain, ln.bias])

    def test_attention_with_mask(self, rng):
        q, k, v = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4), leaf(rng, 2, 5, 4)
        mask = rng.random((2, 3, 5)) < 0.7
        mask[:, :, 0] = True
        w = rng.normal(size=(2, 3, 4))
        _check(lambda: (ad.attention(q, k, v, mask)[0] * w).sum(), [q, k, v])

    def test_conv2d(self, rng):
        x = leaf(rng, 2, 7, 6, 3)
        conv = nn.Conv2d(rng, 3, 4, kernel=3, stride=2, padding=1)
        w = rng.normal(size=(2, 4, 3, 4))
        _check(lambda: (conv(x) * w).sum(), [x] + conv.parameters())

    def test_scatter_ops(self, rng):
        feats, probs = leaf(rng, 2, 6, 3), leaf(rng, 2, 6, 4)
        index = rng.integers(-1, 5, size=(6, 4))
        w = rng.normal(size=(2, 5, 3))
        for op in (ad.weighted_scatter, ad.sparse_scatter):
            _check(lambda: (op(feats, probs, index, 5) * w).sum(), [feats, probs])

    def test_gru_cell(self, rng):
        cell = nn.GRUCell(rng, 3, 5)
        x, h = rng.normal(size=(4, 3)), leaf(rng, 4, 5)
        _check(lambda: cell(x, cell(x, h)).sum(), cell.parameters() + [h])

    def test_mse_masked(self, rng):
        pred = leaf(rng, 3, 4, 2)
        gt = rng.normal(size=(3, 4, 2))
        _check(lambda: ad.mse_masked(pred, gt, np.array([True, False, True])), [pred])


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 6, 5, 2))
    wt = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(x, Tensor(wt), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.einsum("hwc,hwco->o", patch, wt) + b
    assert np.max(np.abs(out - ref)) < 1e-12


def test_fully_masked_attention_row_is_zero(rng):
    q, k, v = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
    mask = np.array([[[True, True, False], [False, False, False]]])
    out, p = ad.attention(q, k, v, mask)
    assert np.array_equal(out.data[0, 1], np.zeros(4))
    assert abs(p[0, 0].sum() - 1.0) < 1e-12 and p[0, 0, 2] == 0.0


def test_scatter_routes_agree(rng):
    feats, probs = rng.normal(size=(2, 40, 5)), rng.random((2, 40, 6))
    index = rng.integers(-1, 30, size=(40, 6))
    dense = ad.weighted_scatter(feats, probs, index, 30).data
    sparse = ad.sparse_scatter(feats, probs, index, 30).data
    assert np.max(np.abs(dense - sparse)) < 1e-12
