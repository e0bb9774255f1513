"""Ground-truth generation and skeleton scoring."""

import numpy as np
import pytest

from skelsplat import geom, synthetic
from skelsplat.kinematics import local_joint_transform
from skelsplat.superpoints import SkinningWeights, knn_assign
from skelsplat.synthetic import (ArticulatedSpec, LinkSpec, chain4,
                                 eval_skeleton, generate, hinge2, humanoid8,
                                 load_ground_truth, random_tree,
                                 save_ground_truth)


def static_spec():
    links = [
        LinkSpec(-1, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 8),
        LinkSpec(0, (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 8),
    ]
    return ArticulatedSpec(links, n_timestamps=4)


class TestGenerate:
    def test_static_all_identity(self):
        truth = generate(static_spec())
        for sample in truth.motion.samples:
            for k in range(2):
                assert np.allclose(sample.transform(k).as_matrix(), np.eye(4),
                                   atol=1e-12)
        assert np.allclose(truth.trajectories,
                           truth.trajectories[0][None], atol=1e-12)

    def test_linear_hinge_matches_pivot_rotation(self):
        links = [
            LinkSpec(-1, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 6),
            LinkSpec(0, (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 6,
                     curve="linear", amplitude=np.pi / 2),
        ]
        truth = generate(ArticulatedSpec(links, n_timestamps=5))
        for i, t in enumerate(truth.timestamps):
            q = geom.quat_from_axis_angle([0, 0, 1], (np.pi / 2) * t)
            want = local_joint_transform(q, [1.0, 0.0, 0.0])
            got = truth.motion[i].transform(1)
            assert np.allclose(got.as_matrix(), want.as_matrix(), atol=1e-12)

    def test_fk_consistency_humanoid(self):
        truth = generate(humanoid8(n_per_link=4, n_timestamps=6))
        # the generator self-checks rigidity; verify joints sit on both links
        for i in range(len(truth.timestamps)):
            sample = truth.motion[i]
            for child, parent in truth.tree.edges:
                j = truth.tree.joints[child]
                assert np.allclose(sample.transform(child).apply(j),
                                   sample.transform(parent).apply(j),
                                   atol=1e-10)

    def test_deterministic(self):
        a = generate(hinge2(seed=3))
        b = generate(hinge2(seed=3))
        assert np.array_equal(a.gaussians.positions, b.gaussians.positions)
        assert np.array_equal(a.trajectories, b.trajectories)

    def test_gaussians_lie_near_segments(self):
        truth = generate(hinge2())
        for k, link in enumerate(truth.spec.links):
            pts = truth.gaussians.positions[truth.link_ids == k]
            start = np.asarray(link.pivot)
            d = np.asarray(link.direction, dtype=float)
            rel = pts - start
            along = rel @ d
            assert (along > -0.2).all() and (along < link.length + 0.2).all()
            radial = rel - np.outer(along, d)
            assert np.linalg.norm(radial, axis=1).max() < 0.5 * link.length

    def test_invalid_tree_rejected(self):
        with pytest.raises(ValueError):
            ArticulatedSpec([LinkSpec(0, (0, 0, 0), (1, 0, 0), 1.0)])
        with pytest.raises(ValueError):
            ArticulatedSpec([
                LinkSpec(-1, (0, 0, 0), (1, 0, 0), 1.0),
                LinkSpec(5, (1, 0, 0), (1, 0, 0), 1.0),
            ])

    def test_presets_articulate_enough(self):
        # every non-root joint sweeps at least 30 degrees over the script
        for preset in (hinge2(), chain4(), humanoid8()):
            ts = np.linspace(0, 1, 50)
            for link in preset.links[1:]:
                angles = [link.angle(t) for t in ts]
                assert max(angles) - min(angles) >= np.deg2rad(30)

    def test_random_tree_parts_and_determinism(self):
        for n in (4, 6, 8):
            spec = random_tree(n, seed=2)
            assert len(spec.links) == n
            truth = generate(spec)
            assert len(truth.tree) == n
        a = random_tree(5, seed=9).to_dict()
        b = random_tree(5, seed=9).to_dict()
        assert a == b


def perfect_prediction(truth, sp_per_link=2):
    """Superpoints at link centroids; weights one-hot on the nearest."""
    sp, sp_link = [], []
    rng = np.random.default_rng(0)
    for k in range(len(truth.tree)):
        pts = truth.gaussians.positions[truth.link_ids == k]
        picks = rng.choice(len(pts), size=min(sp_per_link, len(pts)),
                           replace=False)
        for p in picks:
            sp.append(pts[p])
            sp_link.append(k)
    sp = np.array(sp)
    neighbors = knn_assign(truth.gaussians.positions, sp, k=min(3, len(sp)))
    logits = np.zeros_like(neighbors, dtype=float)
    # force dominance onto a same-link superpoint
    sp_link = np.array(sp_link)
    for i in range(len(neighbors)):
        link = truth.link_ids[i]
        cols = np.nonzero(sp_link[neighbors[i]] == link)[0]
        col = cols[0] if len(cols) else 0
        logits[i, col] = 10.0
    weights = SkinningWeights(neighbors, logits)
    # tree over superpoints mirroring the link tree
    m = len(sp)
    parents = np.zeros(m, dtype=int)
    joints = np.zeros((m, 3))
    first_of = {k: int(np.nonzero(sp_link == k)[0][0])
                for k in range(len(truth.tree))}
    root = first_of[truth.tree.root]
    for j in range(m):
        k = sp_link[j]
        if j == root:
            parents[j] = j
        elif j != first_of[k]:
            parents[j] = first_of[k]  # intra-link edge
        else:
            parents[j] = first_of[int(truth.tree.parents[k])]
            joints[j] = truth.tree.joints[k]
    from skelsplat.skeleton import SkeletonTree
    return SkeletonTree(parents, joints, root), weights


class TestEvalSkeleton:
    def test_perfect_prediction(self):
        truth = generate(chain4(n_per_link=10, n_timestamps=4))
        tree, weights = perfect_prediction(truth)
        report = eval_skeleton(tree, weights, truth)
        assert report["topology_match"] is True
        assert report["joint_rmse"] == pytest.approx(0.0, abs=1e-12)
        assert report["part_iou"] == pytest.approx(1.0)

    def test_displaced_joint_rmse(self):
        truth = generate(hinge2(n_per_link=10, n_timestamps=4))
        tree, weights = perfect_prediction(truth, sp_per_link=1)
        d = 0.05
        child = [j for j in range(len(tree)) if tree.parents[j] != j][0]
        tree.joints[child] += [d, 0.0, 0.0]
        report = eval_skeleton(tree, weights, truth)
        assert report["topology_match"] is True
        assert report["joint_rmse"] == pytest.approx(d, abs=1e-12)

    def test_along_axis_displacement_is_free(self):
        # A hinge pivot slid along its own rotation axis produces the same
        # motion, so it should not count as joint error.
        truth = generate(hinge2(n_per_link=10, n_timestamps=4))
        tree, weights = perfect_prediction(truth, sp_per_link=1)
        child = [j for j in range(len(tree)) if tree.parents[j] != j][0]
        tree.joints[child] += [0.0, 0.0, 0.7]  # hinge2 rotates about z
        report = eval_skeleton(tree, weights, truth)
        assert report["joint_rmse"] == pytest.approx(0.0, abs=1e-12)
        # mixed displacement: only the orthogonal part registers
        tree.joints[child] += [0.03, 0.04, 0.0]
        report = eval_skeleton(tree, weights, truth)
        assert report["joint_rmse"] == pytest.approx(0.05, abs=1e-12)

    def test_wrong_topology_detected(self):
        truth = generate(chain4(n_per_link=8, n_timestamps=4))
        tree, weights = perfect_prediction(truth, sp_per_link=1)
        # reroot edge 3 under 0: star instead of chain
        tree.parents[3] = 0
        report = eval_skeleton(tree, weights, truth)
        assert report["topology_match"] is False

    def test_random_assignment_iou_near_half(self):
        truth = generate(hinge2(n_per_link=200, n_timestamps=2))
        rng = np.random.default_rng(4)
        sp = np.array([[0.5, 0, 0], [1.5, 0, 0]])
        neighbors = np.tile([0, 1], (len(truth.gaussians.positions), 1))
        logits = rng.normal(size=neighbors.shape) * 5
        weights = SkinningWeights(neighbors, logits)
        from skelsplat.skeleton import SkeletonTree
        tree = SkeletonTree(np.array([0, 0]), np.zeros((2, 3)), 0)
        report = eval_skeleton(tree, weights, truth)
        assert 0.3 < report["part_iou"] < 0.7


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        truth = generate(chain4(n_per_link=6, n_timestamps=4))
        save_ground_truth(truth, tmp_path)
        back = load_ground_truth(tmp_path)
        assert np.allclose(back.gaussians.positions,
                           truth.gaussians.positions, atol=1e-6)
        assert np.array_equal(back.link_ids, truth.link_ids)
        assert np.array_equal(back.tree.parents, truth.tree.parents)
        assert np.allclose(back.trajectories, truth.trajectories, atol=1e-12)
        assert back.spec.to_dict() == truth.spec.to_dict()
