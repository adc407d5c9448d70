"""Central finite-difference checks of every differentiable op at float64."""

import numpy as np
import pytest

from nac.engine import ops
from nac.engine.optim import l2_regularization
from nac.engine.tensor import Tensor, parameter

SHAPES_PER_OP = 20
TOL = 1e-4
EPS = 1e-6


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def check(fn, arrays, seed):
    """fn(*tensors) -> Tensor; compares analytic vs numeric gradient of <fn(x), r>."""
    rng = np.random.default_rng(seed)
    params = [parameter(a.astype(np.float64)) for a in arrays]
    out = fn(*params)
    probe = rng.normal(size=out.shape)
    loss = ops.sum_all(ops.mul(out, Tensor(probe)))
    loss.backward()
    for p, base in zip(params, arrays):
        num = np.zeros_like(base, dtype=np.float64)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            vals = []
            for sign in (1, -1):
                pert = [a.astype(np.float64).copy() for a in arrays]
                pert[[i for i, a in enumerate(arrays) if a is base][0]][idx] += sign * EPS
                vals.append(float((fn(*[Tensor(v) for v in pert]).data * probe).sum()))
            num[idx] = (vals[0] - vals[1]) / (2 * EPS)
        err = rel_error(p.grad, num)
        assert err < TOL, f"relative error {err:.2e}"


def away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def small_image(rng, max_n=2, max_c=3, max_hw=6, min_hw=1):
    return (int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_c + 1)),
            int(rng.integers(min_hw, max_hw + 1)), int(rng.integers(min_hw, max_hw + 1)))


SEEDS = range(SHAPES_PER_OP)


@pytest.mark.parametrize("seed", SEEDS)
def test_add_broadcast(seed):
    rng = np.random.default_rng(seed)
    shape = small_image(rng)
    other = tuple(1 if rng.random() < 0.5 else s for s in shape)
    check(ops.add, [rng.normal(size=shape), rng.normal(size=other)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_mul_broadcast(seed):
    rng = np.random.default_rng(seed)
    shape = small_image(rng)
    other = tuple(1 if rng.random() < 0.5 else s for s in shape)
    check(ops.mul, [rng.normal(size=shape), rng.normal(size=other)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_tensor_operators(seed):
    rng = np.random.default_rng(seed)
    shape = small_image(rng)
    check(lambda a, b: (a * b - a) + (-b), [rng.normal(size=shape), rng.normal(size=shape)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_sum_all_and_squares(seed):
    rng = np.random.default_rng(seed)
    shape = small_image(rng)
    check(lambda a: ops.add(ops.sum_all(a), ops.sum_squares(a)), [rng.normal(size=shape)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu(seed):
    rng = np.random.default_rng(seed)
    check(ops.relu, [away_from_zero(rng, small_image(rng))], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_scale(seed):
    rng = np.random.default_rng(seed)
    check(ops.scale, [rng.normal(size=small_image(rng)), np.array(rng.normal())], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_concat(seed):
    rng = np.random.default_rng(seed)
    n, _, h, w = small_image(rng)
    parts = [rng.normal(size=(n, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
    check(lambda *xs: ops.concat(list(xs)), parts, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = small_image(rng)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.choice([1, 2]))
    padding = "valid" if (min(h, w) >= k and rng.random() < 0.3) else "same"
    o = int(rng.integers(1, 4))
    check(lambda x, wt, b: ops.conv2d(x, wt, b, stride, padding),
          [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_depthwise_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = small_image(rng)
    k = int(rng.choice([3, 5, 7]))
    stride = int(rng.choice([1, 2]))
    check(lambda x, wt: ops.depthwise_conv2d(x, wt, stride),
          [rng.normal(size=(n, c, h, w)), rng.normal(size=(c, k, k))], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_separable_conv2d(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = small_image(rng)
    k = int(rng.choice([3, 5, 7]))
    o = int(rng.integers(1, 4))
    check(lambda x, d, p, b: ops.separable_conv2d(x, d, p, b),
          [rng.normal(size=(n, c, h, w)), rng.normal(size=(c, k, k)), rng.normal(size=(o, c, 1, 1)),
           rng.normal(size=o)], seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm(seed, training):
    rng = np.random.default_rng(seed)
    n, c, h, w = small_image(rng, min_hw=2)
    n = max(n, 2)
    mean0, var0 = rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)

    def fn(x, g, b):
        return ops.batchnorm(x, g, b, mean0.copy(), var0.copy(), training)

    check(fn, [rng.normal(size=(n, c, h, w)), rng.normal(size=c), rng.normal(size=c)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool2d(seed):
    rng = np.random.default_rng(seed)
    shape = small_image(rng)
    # distinct, well-separated values keep the argmax stable under perturbation
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01
    kernel = int(rng.choice([2, 3]))
    check(lambda t: ops.maxpool2d(t, kernel, 2), [x], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_global_avgpool(seed):
    rng = np.random.default_rng(seed)
    check(ops.global_avgpool, [rng.normal(size=small_image(rng))], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_fully_connected(seed):
    rng = np.random.default_rng(seed)
    n, f, o = (int(v) for v in rng.integers(1, 6, size=3))
    check(ops.fully_connected, [rng.normal(size=(n, f)), rng.normal(size=(f, o)), rng.normal(size=o)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout(seed):
    rng = np.random.default_rng(seed)
    keep = float(rng.uniform(0.3, 1.0))
    check(lambda x: ops.dropout(x, keep, np.random.default_rng(seed), True), [rng.normal(size=small_image(rng))],
          seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 7))
    labels = rng.integers(0, k, size=n)
    check(lambda z: ops.softmax_cross_entropy(z, labels), [rng.normal(size=(n, k)) * 3], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_regularization(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=small_image(rng)), rng.normal(size=(int(rng.integers(1, 5)),))
    check(lambda x, y: l2_regularization([x, y], 3e-4), [a, b], seed)


def test_harness_rejects_wrong_gradient():
    from nac.engine.tensor import result

    def doubled_backward_square(x):
        return result(x.data**2, (x,), lambda g: (4 * x.data * g,), "bad_square")

    with pytest.raises(AssertionError):
        check(doubled_backward_square, [np.random.default_rng(0).normal(size=(2, 3))], 0)
