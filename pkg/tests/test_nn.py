import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evfield.nn import Mlp
from evfield.optim import Adam, clip_by_global_norm, global_norm

from oracles import central_difference, mlp_scalar, rel_error


def random_mlp(rng, sizes, skips=(), activation="tanh"):
    net = Mlp(sizes, activation=activation, skips=skips, rng=rng, zero_last=False)
    for p in net.params:
        p[...] = rng.normal(0, 0.7, p.shape)
    return net


class TestMlpForward:
    @pytest.mark.parametrize("sizes,skips", [([3, 5, 2], ()), ([4, 6, 6, 6, 3], (2,)), ([2, 3, 3, 3, 3, 1], (1, 3))])
    def test_matches_scalar_oracle(self, sizes, skips):
        rng = np.random.default_rng(sum(sizes))
        net = random_mlp(rng, sizes, skips)
        X = rng.normal(size=(6, sizes[0]))
        out = net(X)
        plist = [p.tolist() for p in net.params]
        for x, y in zip(X, out):
            ref = mlp_scalar(plist, sizes, skips, x.tolist())
            np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)

    def test_relu_oracle(self, rng):
        net = random_mlp(rng, [3, 4, 2], activation="relu")
        x = rng.normal(size=3)
        ref = mlp_scalar([p.tolist() for p in net.params], [3, 4, 2], (), x.tolist(), act=lambda a: max(a, 0.0))
        np.testing.assert_allclose(net(x[None])[0], ref, atol=1e-12)

    def test_zero_last_layer(self, rng):
        net = Mlp([3, 8, 2], rng=rng)
        np.testing.assert_array_equal(net(rng.normal(size=(4, 3))), np.zeros((4, 2)))

    def test_skip_widens_layer(self):
        net = Mlp([3, 4, 4, 2], skips=(2,))
        assert net.params[4].shape == (2, 7)

    def test_validation(self):
        with pytest.raises(ValueError):
            Mlp([3])
        with pytest.raises(ValueError):
            Mlp([3, 4, 2], skips=(0,))
        with pytest.raises(ValueError):
            Mlp([3, 4, 2], activation="gelu")
        with pytest.raises(ValueError):
            Mlp([3, 4, 2], params=[np.zeros((4, 3)), np.zeros(4), np.zeros((2, 3)), np.zeros(2)])


class TestMlpBackward:
    def test_param_and_input_gradients(self):
        rng = np.random.default_rng(0)
        net = random_mlp(rng, [3, 5, 5, 2], skips=(2,))
        X = rng.normal(size=(4, 3))
        G = rng.normal(size=(4, 2))
        _, cache = net.forward(X)
        grads, gX = net.backward(cache, G)
        for i, p in enumerate(net.params):
            def f(v, i=i):
                old = net.params[i].copy()
                net.params[i][...] = v.reshape(old.shape)
                val = float(np.sum(net(X) * G))
                net.params[i][...] = old
                return val
            assert rel_error(grads[i].ravel(), central_difference(f, p.ravel())) < 1e-7
        fx = central_difference(lambda v: float(np.sum(net(v.reshape(4, 3)) * G)), X.ravel())
        assert rel_error(gX.ravel(), fx) < 1e-7

    def test_zero_upstream(self, rng):
        net = random_mlp(rng, [2, 3, 1])
        _, cache = net.forward(rng.normal(size=(3, 2)))
        grads, gX = net.backward(cache, np.zeros((3, 1)))
        assert all(not g.any() for g in grads) and not gX.any()

    def test_copy_is_independent(self, rng):
        net = random_mlp(rng, [2, 3, 1])
        other = net.copy()
        other.params[0][0, 0] += 1.0
        assert net.params[0][0, 0] != other.params[0][0, 0]


class TestAdam:
    def test_first_step_is_lr_sign(self):
        p = np.array([1.0, -2.0])
        Adam([p], lr=0.1).step([np.array([3.0, -0.5])])
        np.testing.assert_allclose(p, [0.9, -1.9], atol=1e-8)

    def test_minimizes_quadratic(self):
        p = np.array([5.0, -3.0])
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.step([2 * p])
        assert np.abs(p).max() < 1e-2

    def test_mask_freezes(self):
        a, b = np.ones(2), np.ones(2)
        Adam([a, b], lr=0.1).step([np.ones(2), np.ones(2)], mask=[True, False])
        assert np.all(a < 1) and np.all(b == 1)

    def test_clipping(self):
        g = [np.array([3.0, 4.0])]
        assert global_norm(g) == 5.0
        np.testing.assert_allclose(clip_by_global_norm(g, 1.0)[0], [0.6, 0.8])
        assert clip_by_global_norm(g, None) is g

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            Adam([np.zeros(1)], lr=0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 5))
def test_batch_equals_rows(seed, n_in, width):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, [n_in, width, width, 2], skips=(1,))
    X = rng.normal(size=(5, n_in))
    rows = np.stack([net(x[None])[0] for x in X])
    np.testing.assert_allclose(net(X), rows, rtol=0, atol=1e-13)
    assert all(math.isfinite(v) for v in net(X).ravel())
