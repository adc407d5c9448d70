import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nac.engine import ops
from nac.engine.tensor import Tensor, no_grad, parameter
from nac.errors import ConfigError, ShapeError


def naive_conv(x, w, b, stride, padding):
    """Direct-loop cross-correlation with TF-style same padding."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if padding == "same":
        ho, wo = -(-h // stride), -(-wd // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
        top = left = 0
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                yy, xj = y * stride + i - top, xx * stride + j - left
                                if 0 <= yy < h and 0 <= xj < wd:
                                    acc += x[bi, ic, yy, xj] * w[oc, ic, i, j]
                    out[bi, oc, y, xx] = acc
    return out


@pytest.mark.parametrize("seed", range(25))
def test_conv2d_matches_direct_loops(seed):
    rng = np.random.default_rng(seed)
    n, c, o = (int(v) for v in rng.integers(1, 4, size=3))
    h, w = (int(v) for v in rng.integers(1, 8, size=2))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = "valid" if min(h, w) >= k and seed % 3 == 0 else "same"
    x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, padding).data
    np.testing.assert_allclose(got, naive_conv(x, wt, b, stride, padding), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_depthwise_matches_per_channel_conv(seed):
    rng = np.random.default_rng(seed)
    n, c = (int(v) for v in rng.integers(1, 4, size=2))
    h = int(rng.integers(2, 9))
    k = int(rng.choice([3, 5, 7]))
    stride = int(rng.choice([1, 2]))
    x, wt = rng.normal(size=(n, c, h, h)), rng.normal(size=(c, k, k))
    got = ops.depthwise_conv2d(Tensor(x), Tensor(wt), stride).data
    ref = np.concatenate([naive_conv(x[:, ch : ch + 1], wt[ch][None, None], None, stride, "same")
                          for ch in range(c)], axis=1)
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_conv_same_padding_output_size():
    x = Tensor(np.zeros((1, 2, 7, 5)))
    out = ops.conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), stride=2)
    assert out.shape == (1, 3, math.ceil(7 / 2), math.ceil(5 / 2))


def test_identity_1x1_kernel_leaves_input_unchanged():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 4))
    out = ops.conv2d(Tensor(x), Tensor(np.eye(3).reshape(3, 3, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_zero_kernel_gives_zero_output():
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 5))
    out = ops.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))))
    assert not out.data.any()


def test_conv_channel_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


def test_even_kernel_rejected():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


def test_separable_identity():
    x = np.random.default_rng(2).normal(size=(2, 3, 5, 5))
    depth = np.zeros((3, 3, 3))
    depth[:, 1, 1] = 1.0
    out = ops.separable_conv2d(Tensor(x), Tensor(depth), Tensor(np.eye(3).reshape(3, 3, 1, 1)))
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_separable_equals_composition():
    rng = np.random.default_rng(3)
    x, d, p, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(3, 5, 5)), rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4)
    depthwise = np.concatenate([naive_conv(x[:, c : c + 1], d[c][None, None], None, 1, "same") for c in range(3)], 1)
    ref = naive_conv(depthwise, p, b, 1, "same")
    got = ops.separable_conv2d(Tensor(x), Tensor(d), Tensor(p), Tensor(b)).data
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_relu_definition():
    x = np.abs(np.random.default_rng(4).normal(size=(3, 4)))
    np.testing.assert_array_equal(ops.relu(Tensor(-x)).data, 0.0)
    np.testing.assert_array_equal(ops.relu(Tensor(x)).data, x)


def test_uniform_logits_cross_entropy_is_ln10():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 5, 9]))
    assert float(loss.data) == pytest.approx(2.302585, abs=1e-6)


def test_batchnorm_train_normalises_each_channel():
    rng = np.random.default_rng(5)
    x = rng.normal(3.0, 2.5, size=(8, 4, 5, 5))
    out = ops.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batchnorm_eval_uses_running_statistics():
    rng = np.random.default_rng(6)
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    x = rng.normal(size=(2, 3, 4, 4))
    out = ops.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), mean.copy(), var.copy(), False)
    ref = (x - mean[:, None, None]) / np.sqrt(var[:, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_batchnorm_running_stats_move_towards_batch():
    x = np.full((4, 1, 2, 2), 5.0) + np.arange(16).reshape(4, 1, 2, 2)
    rm, rv = np.zeros(1), np.ones(1)
    ops.batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, True, momentum=0.9)
    assert rm[0] == pytest.approx(0.1 * x.mean())
    assert rv[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_maxpool_matches_window_max():
    x = np.random.default_rng(7).normal(size=(2, 3, 6, 6))
    out = ops.maxpool2d(Tensor(x), 3, 2).data
    assert out.shape == (2, 3, 3, 3)
    # same padding for 6 -> 3 with k=3, s=2 pads one row/col at the bottom/right
    padded = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)), constant_values=-np.inf)
    for y in range(3):
        for z in range(3):
            np.testing.assert_array_equal(out[:, :, y, z], padded[:, :, 2 * y : 2 * y + 3, 2 * z : 2 * z + 3].max(axis=(2, 3)))


def test_global_avgpool_and_fc_shapes():
    x = Tensor(np.ones((2, 5, 3, 3)))
    pooled = ops.global_avgpool(x)
    assert pooled.shape == (2, 5)
    out = ops.fully_connected(pooled, Tensor(np.ones((5, 7))), Tensor(np.zeros(7)))
    np.testing.assert_array_equal(out.data, 5.0)


def test_fc_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.fully_connected(Tensor(np.ones((2, 5))), Tensor(np.ones((4, 7))))


@pytest.mark.parametrize("keep", [0.0, -0.1, 1.5])
def test_dropout_rejects_bad_keep_prob(keep):
    with pytest.raises(ConfigError):
        ops.dropout(Tensor(np.ones(3)), keep, np.random.default_rng(0), True)


def test_dropout_is_identity_in_eval_and_unbiased_in_training():
    x = Tensor(np.ones((200, 200)))
    np.testing.assert_array_equal(ops.dropout(x, 0.5, None, False).data, x.data)
    out = ops.dropout(x, 0.8, np.random.default_rng(0), True).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert out.mean() == pytest.approx(1.0, abs=0.01)


def test_no_grad_records_no_history():
    w = parameter(np.ones(3))
    with no_grad():
        y = ops.mul(w, w)
    assert not y.requires_grad and y._parents == ()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 2]), st.sampled_from([1, 3, 5, 7]))
def test_same_padding_size_property(c, h, w, stride, k):
    x = Tensor(np.zeros((1, c, h, w)))
    out = ops.conv2d(x, Tensor(np.zeros((2, c, k, k))), stride=stride)
    assert out.shape[2:] == (math.ceil(h / stride), math.ceil(w / stride))


def test_forward_bit_identical_on_repeat():
    rng = np.random.default_rng(8)
    x, wt = rng.normal(size=(2, 3, 8, 8)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = ops.conv2d(Tensor(x), Tensor(wt)).data
    b = ops.conv2d(Tensor(x), Tensor(wt)).data
    assert a.tobytes() == b.tobytes()
