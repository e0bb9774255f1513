import numpy as np

from skelsplat import diffops, geom
from tests.test_nn import finite_diff_grads


def rand_unit_quats(rng, shape):
    q = rng.standard_normal(shape + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def rel_err(a, f):
    return (np.abs(a - f) / np.maximum(np.abs(f), 1e-5)).max()


def test_quat_to_matrix_batch_matches_scalar():
    rng = np.random.default_rng(0)
    q = rand_unit_quats(rng, (7,))
    R = diffops.quat_to_matrix_batch(q)
    for i in range(7):
        np.testing.assert_allclose(R[i], geom.quat_to_matrix(q[i]), atol=1e-12)


def test_quat_mul_matches_scalar():
    rng = np.random.default_rng(1)
    a = rand_unit_quats(rng, (5,))
    b = rand_unit_quats(rng, (5,))
    out = diffops.quat_mul(a, b)
    for i in range(5):
        expect = geom.quat_mul(a[i], b[i])
        assert min(np.abs(out[i] - expect).max(), np.abs(out[i] + expect).max()) < 1e-12


def test_normalize_backward():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((4, 4))
    g = rng.standard_normal((4, 4))
    fn = lambda: float(np.sum(diffops.quat_normalize(q) * g))
    fd = finite_diff_grads(fn, [q])[0]
    assert rel_err(diffops.quat_normalize_backward(q, g), fd) < 1e-5


def test_rotate_backward():
    rng = np.random.default_rng(3)
    q = rand_unit_quats(rng, (3,))
    v = rng.standard_normal((3, 3))
    g = rng.standard_normal((3, 3))
    # Perturbation breaks unit norm, so check against the raw polynomial formula.
    fn = lambda: float(np.sum(diffops.rotate(q, v) * g))
    fd_q, fd_v = finite_diff_grads(fn, [q, v])
    gq, gv = diffops.rotate_backward(q, v, g)
    assert rel_err(gq, fd_q) < 1e-5
    assert rel_err(gv, fd_v) < 1e-5


def test_quat_mul_backward():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((6, 4))
    b = rng.standard_normal((6, 4))
    g = rng.standard_normal((6, 4))
    fn = lambda: float(np.sum(diffops.quat_mul(a, b) * g))
    fd_a, fd_b = finite_diff_grads(fn, [a, b])
    ga, gb = diffops.quat_mul_backward(a, b, g)
    assert rel_err(ga, fd_a) < 1e-5
    assert rel_err(gb, fd_b) < 1e-5


def test_softmax_backward():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((4, 5))
    g = rng.standard_normal((4, 5))
    fn = lambda: float(np.sum(diffops.softmax(logits) * g))
    fd = finite_diff_grads(fn, [logits])[0]
    w = diffops.softmax(logits)
    assert rel_err(diffops.softmax_backward(w, g), fd) < 1e-5


def test_geodesic_angle_value():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rand_unit_quats(rng, ())
        b = rand_unit_quats(rng, ())
        Ra, Rb = geom.quat_to_matrix(a), geom.quat_to_matrix(b)
        omega, _ = geom.so3_log(Ra.T @ Rb)
        expected = float(omega @ omega)
        got = float(diffops.geodesic_angle_sq(a[None], b[None])[0])
        assert abs(got - expected) < 1e-8 * max(1.0, expected)


def test_geodesic_angle_backward():
    rng = np.random.default_rng(7)
    a = rand_unit_quats(rng, (5,))
    b = rand_unit_quats(rng, (5,))
    g = rng.standard_normal(5)

    def fn():
        an = diffops.quat_normalize(a)
        bn = diffops.quat_normalize(b)
        return float(np.sum(diffops.geodesic_angle_sq(an, bn) * g))

    fd_a, fd_b = finite_diff_grads(fn, [a, b])
    an, bn = diffops.quat_normalize(a), diffops.quat_normalize(b)
    ga, gb = diffops.geodesic_angle_sq_backward(an, bn, g)
    ga = diffops.quat_normalize_backward(a, ga)
    gb = diffops.quat_normalize_backward(b, gb)
    assert rel_err(ga, fd_a) < 1e-4
    assert rel_err(gb, fd_b) < 1e-4


def test_geodesic_angle_near_zero_smooth():
    a = np.array([[1.0, 0.0, 0.0, 0.0]])
    b = diffops.quat_normalize(np.array([[1.0, 1e-10, 0.0, 0.0]]))
    val = diffops.geodesic_angle_sq(a, b)
    ga, gb = diffops.geodesic_angle_sq_backward(a, b, np.ones(1))
    assert np.isfinite(val).all()
    assert np.isfinite(ga).all() and np.isfinite(gb).all()
