import math

import numpy as np
import pytest

from skelsplat import diffops, geom, superpoints
from skelsplat.gaussians import GaussianSet
from skelsplat.superpoints import (DeformField, MotionSample, MotionSequence,
                                   SkinningWeights, SuperpointSet,
                                   farthest_point_sampling, knn_assign, lbs_deform)
from tests.test_nn import finite_diff_grads


def make_gaussians(positions, rng=None):
    rng = rng or np.random.default_rng(0)
    n = len(positions)
    quats = np.stack([geom.normalize_quat(rng.standard_normal(4)) for _ in range(n)])
    return GaussianSet(np.asarray(positions, dtype=float), quats,
                       rng.standard_normal((n, 3)) * 0.1, rng.standard_normal(n),
                       rng.standard_normal((n, 1, 3)), 0)


class TestFps:
    def test_full_sample(self):
        rng = np.random.default_rng(1)
        pts = rng.standard_normal((8, 3))
        idx = farthest_point_sampling(pts, 8, seed=3)
        assert sorted(idx) == list(range(8))

    def test_two_clusters(self):
        pts = np.concatenate([np.random.default_rng(2).normal(0, 0.1, (10, 3)),
                              np.random.default_rng(3).normal(10, 0.1, (10, 3))])
        idx = farthest_point_sampling(pts, 2, seed=0)
        assert (idx < 10).sum() == 1 and (idx >= 10).sum() == 1

    def test_single_point_is_seeded_start(self):
        pts = np.random.default_rng(4).standard_normal((7, 3))
        idx = farthest_point_sampling(pts, 1, seed=11)
        first = int(np.random.default_rng(11).integers(7))
        assert list(idx) == [first]

    def test_m_exceeds_n(self):
        with pytest.raises(ValueError):
            farthest_point_sampling(np.zeros((3, 3)), 4)

    def test_deterministic(self):
        pts = np.random.default_rng(5).standard_normal((30, 3))
        a = farthest_point_sampling(pts, 10, seed=7)
        b = farthest_point_sampling(pts, 10, seed=7)
        np.testing.assert_array_equal(a, b)


class TestKnn:
    def test_k_equals_m(self):
        rng = np.random.default_rng(6)
        nb = knn_assign(rng.standard_normal((4, 3)), rng.standard_normal((3, 3)), 3)
        for row in nb:
            assert sorted(row) == [0, 1, 2]

    def test_coincident_first(self):
        sp = np.array([[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [9.0, 9.0, 9.0]])
        nb = knn_assign(np.array([[1.0, 2.0, 3.0]]), sp, 2)
        assert nb[0, 0] == 0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(7)
        gp = rng.standard_normal((20, 3))
        sp = rng.standard_normal((9, 3))
        nb = knn_assign(gp, sp, 4)
        for i in range(20):
            d = np.linalg.norm(sp - gp[i], axis=1)
            oracle = np.argsort(d, kind="stable")[:4]
            np.testing.assert_array_equal(nb[i], oracle)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_assign(np.zeros((2, 3)), np.zeros((3, 3)), 4)


class TestSkinningWeights:
    def test_equal_logits(self):
        w = SkinningWeights(np.zeros((2, 5), dtype=int), np.zeros((2, 5)))
        np.testing.assert_allclose(w.weights(), 0.2)

    def test_dominant_logit(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 20.0
        w = SkinningWeights(np.arange(5)[None, :], logits)
        assert w.weights()[0, 2] > 0.999

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        w = SkinningWeights(np.tile(np.arange(5), (6, 1)), rng.standard_normal((6, 5)))
        np.testing.assert_allclose(w.weights().sum(axis=1), 1.0, atol=1e-6)

    def test_dense(self):
        w = SkinningWeights(np.array([[0, 2]]), np.zeros((1, 2)))
        dense = w.dense(4)
        np.testing.assert_allclose(dense, [[0.5, 0.0, 0.5, 0.0]])


class TestDeformField:
    def test_zero_init_identity(self):
        f = DeformField.create(hidden=16, depth=2, rng=np.random.default_rng(9))
        sample = f.evaluate(np.random.default_rng(10).standard_normal((4, 3)), 0.3)
        np.testing.assert_allclose(sample.quats, [[1, 0, 0, 0]] * 4, atol=1e-12)
        np.testing.assert_allclose(sample.translations, 0.0, atol=1e-12)

    def test_purity(self):
        f = DeformField.create(hidden=16, depth=2, rng=np.random.default_rng(11))
        for w in f.mlp.weights:
            w += 0.01
        p = np.random.default_rng(12).standard_normal((3, 3))
        a = f.evaluate(p, 0.5)
        b = f.evaluate(p, 0.5)
        np.testing.assert_array_equal(a.quats, b.quats)
        np.testing.assert_array_equal(a.translations, b.translations)

    def test_backward_gradcheck(self):
        rng = np.random.default_rng(13)
        f = DeformField.create(hidden=8, depth=2, rng=rng)
        for w in f.mlp.weights:
            w += rng.standard_normal(w.shape) * 0.05
        pos = rng.standard_normal((3, 3)) * 0.5
        gq = rng.standard_normal((3, 4))
        gt = rng.standard_normal((3, 3))

        def fn():
            q, tr, _ = f.evaluate_cached(pos, 0.4)
            return float(np.sum(q * gq) + np.sum(tr * gt))

        _, _, cache = f.evaluate_cached(pos, 0.4)
        pgrads, gpos = f.backward(cache, gq, gt)
        fd = finite_diff_grads(fn, f.mlp.parameters())
        for a, b in zip(pgrads, fd):
            assert (np.abs(a - b) / np.maximum(np.abs(b), 1e-5)).max() < 1e-3
        # high-frequency encoding needs a small step for a valid FD reference
        fd_pos = finite_diff_grads(fn, [pos], eps=1e-6)[0]
        assert (np.abs(gpos - fd_pos) / np.maximum(np.abs(fd_pos), 1e-3)).max() < 1e-3


class TestLbs:
    def test_identity_transforms(self):
        g = make_gaussians(np.random.default_rng(14).standard_normal((6, 3)))
        sample = MotionSample.identity(0.0, 3)
        w = SkinningWeights(knn_assign(g.positions, np.zeros((3, 3)) + np.arange(3)[:, None], 2),
                            np.zeros((6, 2)))
        out = lbs_deform(g, sample, w)
        np.testing.assert_allclose(out.positions, g.positions, atol=1e-12)
        for i in range(6):
            d = min(np.abs(out.quats[i] - g.quats[i]).max(),
                    np.abs(out.quats[i] + g.quats[i]).max())
            assert d < 1e-12
        np.testing.assert_array_equal(out.log_scales, g.log_scales)
        np.testing.assert_array_equal(out.opacity_raw, g.opacity_raw)
        np.testing.assert_array_equal(out.sh, g.sh)

    def test_single_superpoint_rigid(self):
        rng = np.random.default_rng(15)
        g = make_gaussians(rng.standard_normal((4, 3)), rng)
        r = geom.quat_from_axis_angle([0, 1, 0], 0.7)
        o = np.array([0.5, -1.0, 2.0])
        m = 2
        quats = np.tile(r, (m, 1))
        sample = MotionSample(0.0, quats, np.tile(o, (m, 1)))
        logits = np.zeros((4, 2))
        logits[:, 0] = 30.0  # effectively one-hot on superpoint 0
        w = SkinningWeights(np.tile([0, 1], (4, 1)), logits)
        out = lbs_deform(g, sample, w)
        R = geom.quat_to_matrix(r)
        np.testing.assert_allclose(out.positions, g.positions @ R.T + o, atol=1e-9)
        for i in range(4):
            expect = geom.quat_mul(r, g.quats[i])
            d = min(np.abs(out.quats[i] - expect).max(),
                    np.abs(out.quats[i] + expect).max())
            assert d < 1e-9

    def test_equal_weight_translations(self):
        g = make_gaussians([[0.0, 0.0, 0.0]])
        o1, o2 = np.array([1.0, 0, 0]), np.array([0, 2.0, 0])
        q = np.tile(geom.IDENTITY_QUAT, (2, 1))
        sample = MotionSample(0.0, q, np.stack([o1, o2]))
        w = SkinningWeights(np.array([[0, 1]]), np.zeros((1, 2)))
        out = lbs_deform(g, sample, w)
        np.testing.assert_allclose(out.positions[0], (o1 + o2) / 2, atol=1e-12)

    def test_identical_transforms_partition_of_unity(self):
        rng = np.random.default_rng(16)
        g = make_gaussians(rng.standard_normal((5, 3)), rng)
        r = geom.quat_from_axis_angle(rng.standard_normal(3), 1.1)
        o = rng.standard_normal(3)
        sample = MotionSample(0.0, np.tile(r, (4, 1)), np.tile(o, (4, 1)))
        w = SkinningWeights(np.tile(np.arange(4), (5, 1)),
                            rng.standard_normal((5, 4)))
        out = lbs_deform(g, sample, w)
        R = geom.quat_to_matrix(r)
        np.testing.assert_allclose(out.positions, g.positions @ R.T + o, atol=1e-10)
        assert np.allclose(np.linalg.norm(out.quats, axis=1), 1.0, atol=1e-8)

    def test_hemisphere_alignment(self):
        # Antipodal duplicate of the same rotation must not cancel the blend.
        g = make_gaussians([[1.0, 0.0, 0.0]])
        r = geom.quat_from_axis_angle([0, 0, 1], 0.9)
        sample = MotionSample(0.0, np.stack([r, -r]), np.zeros((2, 3)))
        w = SkinningWeights(np.array([[0, 1]]), np.array([[0.1, 0.0]]))
        out = lbs_deform(g, sample, w)
        expect = geom.quat_mul(r, g.quats[0])
        d = min(np.abs(out.quats[0] - expect).max(),
                np.abs(out.quats[0] + expect).max())
        assert d < 1e-9

    def test_positions_backward_gradcheck(self):
        rng = np.random.default_rng(17)
        n, m, k = 5, 4, 3
        mu = rng.standard_normal((n, 3))
        quats = diffops.quat_normalize(rng.standard_normal((m, 4)))
        trans = rng.standard_normal((m, 3)) * 0.3
        logits = rng.standard_normal((n, k))
        neighbors = np.stack([rng.choice(m, k, replace=False) for _ in range(n)])
        g_out = rng.standard_normal((n, 3))

        def fn():
            sample = MotionSample(0.0, diffops.quat_normalize(quats), trans)
            w = diffops.softmax(logits)
            mu_t, _ = superpoints.lbs_positions(sample, w, neighbors, mu)
            return float(np.sum(mu_t * g_out))

        sample = MotionSample(0.0, diffops.quat_normalize(quats), trans)
        w = diffops.softmax(logits)
        mu_t, cache = superpoints.lbs_positions(sample, w, neighbors, mu)
        gq, gt, gw, gmu = superpoints.lbs_positions_backward(
            sample, w, neighbors, mu, cache, g_out)
        gq = diffops.quat_normalize_backward(quats, gq)
        glogits = diffops.softmax_backward(w, gw)
        fd = finite_diff_grads(fn, [quats, trans, logits, mu])
        for a, b in zip([gq, gt, glogits, gmu], fd):
            assert (np.abs(a - b) / np.maximum(np.abs(b), 1e-5)).max() < 1e-3


class TestMotionSequence:
    def test_monotone_timestamps_enforced(self):
        s0 = MotionSample.identity(0.5, 2)
        s1 = MotionSample.identity(0.2, 2)
        with pytest.raises(ValueError):
            MotionSequence([s0, s1])

    def test_range_enforced(self):
        with pytest.raises(ValueError):
            MotionSequence([MotionSample.identity(-0.1, 2)])


class TestBatchedPaths:
    """The batched field/LBS evaluation must match the per-timestamp path."""

    def _field(self, rng):
        field = superpoints.DeformField.create(hidden=16, depth=2, rng=rng)
        for p in field.mlp.parameters():
            p += 0.05 * rng.standard_normal(p.shape)
        return field

    def test_evaluate_batch_matches_loop(self):
        rng = np.random.default_rng(11)
        field = self._field(rng)
        pos = rng.standard_normal((5, 3))
        ts = np.linspace(0.0, 1.0, 4)
        quats, trans, _ = field.evaluate_batch(pos, ts)
        for i, t in enumerate(ts):
            q1, o1, _ = field.evaluate_cached(pos, float(t))
            np.testing.assert_allclose(quats[i], q1, atol=1e-12)
            np.testing.assert_allclose(trans[i], o1, atol=1e-12)

    def test_backward_batch_matches_loop(self):
        rng = np.random.default_rng(12)
        field = self._field(rng)
        pos = rng.standard_normal((4, 3))
        ts = np.array([0.0, 0.3, 0.9])
        gq = rng.standard_normal((3, 4, 4))
        go = rng.standard_normal((3, 4, 3))
        _, _, cache = field.evaluate_batch(pos, ts)
        pg, gpos = field.backward_batch(cache, gq, go)
        pg_ref = [np.zeros_like(p) for p in field.mlp.parameters()]
        gpos_ref = np.zeros_like(pos)
        for i, t in enumerate(ts):
            _, _, c1 = field.evaluate_cached(pos, float(t))
            pg1, gp1 = field.backward(c1, gq[i], go[i])
            for a, b in zip(pg_ref, pg1):
                a += b
            gpos_ref += gp1
        for a, b in zip(pg, pg_ref):
            np.testing.assert_allclose(a, b, atol=1e-10)
        np.testing.assert_allclose(gpos, gpos_ref, atol=1e-10)

    def test_lbs_batch_matches_loop(self):
        rng = np.random.default_rng(13)
        m, n, k, n_t = 6, 15, 3, 4
        quats = diffops.quat_normalize(rng.standard_normal((n_t, m, 4)))
        trans = 0.1 * rng.standard_normal((n_t, m, 3))
        mu = rng.standard_normal((n, 3))
        neighbors = np.stack([rng.choice(m, size=k, replace=False)
                              for _ in range(n)])
        w = diffops.softmax(rng.standard_normal((n, k)))
        g_out = rng.standard_normal((n_t, n, 3))

        mu_t, cache = superpoints.lbs_positions_batch(quats, trans, w,
                                                      neighbors, mu)
        gq, gt, gw, gmu = superpoints.lbs_positions_batch_backward(
            quats, w, neighbors, mu, cache, g_out)

        gw_ref = np.zeros_like(w)
        gmu_ref = np.zeros_like(mu)
        for i in range(n_t):
            sample = MotionSample(float(i) / n_t, quats[i], trans[i])
            mu1, c1 = superpoints.lbs_positions(sample, w, neighbors, mu)
            np.testing.assert_allclose(mu_t[i], mu1, atol=1e-12)
            gq1, gt1, gw1, gmu1 = superpoints.lbs_positions_backward(
                sample, w, neighbors, mu, c1, g_out[i])
            np.testing.assert_allclose(gq[i], gq1, atol=1e-12)
            np.testing.assert_allclose(gt[i], gt1, atol=1e-12)
            gw_ref += gw1
            gmu_ref += gmu1
        np.testing.assert_allclose(gw, gw_ref, atol=1e-12)
        np.testing.assert_allclose(gmu, gmu_ref, atol=1e-12)
