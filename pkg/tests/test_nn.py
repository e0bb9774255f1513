import numpy as np
import pytest

from skelsplat import nn
from skelsplat.nn import Adam, Mlp


def finite_diff_grads(fn, arrays, eps=1e-4):
    """Central differences of scalar fn w.r.t. a list of arrays (in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            up = fn()
            arr[idx] = old - eps
            down = fn()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        grads.append(g)
    return grads


class TestPositionalEncoding:
    def test_zero_input(self):
        out = nn.positional_encoding(np.zeros(3), L=4)
        assert out.shape == (2 * 5 * 3,)
        np.testing.assert_allclose(out[0::2], 0.0)
        np.testing.assert_allclose(out[1::2], 1.0)

    def test_length_L10_dim3(self):
        assert nn.positional_encoding(np.ones(3), L=10).shape == (66,)

    def test_length_L6_scalar(self):
        assert nn.positional_encoding(0.3, L=6).shape == (14,)

    def test_values(self):
        p = 0.7
        out = nn.positional_encoding(p, L=2)
        oracle = []
        for k in range(3):
            oracle += [np.sin(2 ** k * p), np.cos(2 ** k * p)]
        np.testing.assert_allclose(out, oracle)

    def test_batch(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((5, 3))
        out = nn.positional_encoding(x, L=3)
        assert out.shape == (5, 24)
        np.testing.assert_allclose(out[2], nn.positional_encoding(x[2], L=3))

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3))
        g = rng.standard_normal((2, 24))

        def fn():
            return float(np.sum(nn.positional_encoding(x, L=3) * g))

        fd = finite_diff_grads(fn, [x])[0]
        analytic = nn.positional_encoding_backward(x, 3, g)
        np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-8)


class TestMlp:
    def test_zero_weights_output_bias(self):
        mlp = Mlp.create(3, 2, hidden=4, depth=1, rng=np.random.default_rng(0))
        for w in mlp.weights:
            w[:] = 0.0
        mlp.biases[-1][:] = [1.5, -0.5]
        np.testing.assert_allclose(mlp.forward(np.ones(3)), [1.5, -0.5])

    def test_linear_net_param_gradient(self):
        # 1 -> 1 with no hidden layer: d(out)/d(w) = input.
        mlp = Mlp([np.array([[2.0]])], [np.array([0.0])])
        out, cache = mlp.forward_cached(np.array([3.0]))
        grads, gin = mlp.backward(cache, np.array([1.0]))
        np.testing.assert_allclose(grads[0], [[3.0]])
        np.testing.assert_allclose(gin, [2.0])

    def test_gradcheck_random_net(self):
        rng = np.random.default_rng(2)
        mlp = Mlp.create(4, 3, hidden=8, depth=2, rng=rng)
        x = rng.standard_normal((5, 4))
        target = rng.standard_normal((5, 3))

        def loss():
            out = mlp.forward(x)
            return float(np.sum((out - target) ** 2))

        out, cache = mlp.forward_cached(x)
        grads, gin = mlp.backward(cache, 2 * (out - target))
        fd = finite_diff_grads(loss, mlp.parameters() + [x])
        for a, f in zip(grads + [gin], fd):
            denom = np.maximum(np.abs(f), 1e-6)
            assert (np.abs(a - f) / denom).max() < 1e-4

    def test_zero_init_output_head(self):
        mlp = Mlp.create(6, 7, hidden=16, depth=2, rng=np.random.default_rng(3),
                         zero_init_output=True)
        out = mlp.forward(np.random.default_rng(4).standard_normal(6))
        np.testing.assert_allclose(out, 0.0)

    def test_shape_mismatch(self):
        mlp = Mlp.create(3, 2, hidden=4, depth=1)
        with pytest.raises(ValueError):
            mlp.forward(np.ones(5))

    def test_deterministic_init(self):
        a = Mlp.create(3, 2, hidden=8, depth=2, rng=np.random.default_rng(7))
        b = Mlp.create(3, 2, hidden=8, depth=2, rng=np.random.default_rng(7))
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = np.array([1.0, 2.0])
        opt = Adam([p], lr=1e-2)
        for _ in range(10):
            opt.step([np.zeros(2)])
        np.testing.assert_array_equal(p, [1.0, 2.0])

    def test_quadratic_convergence(self):
        x = np.array([1.0])
        opt = Adam([x], lr=1e-2, total_steps=2000)
        for _ in range(2000):
            opt.step([2 * x])
        assert abs(x[0]) < 1e-3

    def test_lr_schedule_endpoints(self):
        opt = Adam([np.zeros(1)], lr=1e-3, lr_final=1e-5, total_steps=100)
        assert opt.current_lr() == pytest.approx(1e-3)
        opt.t = 100
        assert opt.current_lr() == pytest.approx(1e-5)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        mlp = Mlp.create(4, 3, hidden=8, depth=2, rng=rng)
        opt = Adam(mlp.parameters(), lr=1e-3, lr_final=1e-5, total_steps=500)
        x = rng.standard_normal((3, 4))
        for _ in range(5):
            out, cache = mlp.forward_cached(x)
            grads, _ = mlp.backward(cache, out)
            opt.step(grads)
        path = tmp_path / "ck.bin"
        nn.save_checkpoint(path, mlp, opt)
        mlp2, opt2 = nn.load_checkpoint(path)
        np.testing.assert_array_equal(mlp2.forward(x), mlp.forward(x))
        assert opt2.t == opt.t
        # One more identical step on both must agree bitwise.
        for m, o in ((mlp, opt), (mlp2, opt2)):
            out, cache = m.forward_cached(x)
            grads, _ = m.backward(cache, out)
            o.step(grads)
        for a, b in zip(mlp.parameters(), mlp2.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not a checkpoint"):
            nn.load_checkpoint(path)
