"""End-to-end training-loop behavior on small synthetic scenes."""

import numpy as np
import pytest

from skelsplat import pipeline, synthetic
from skelsplat.kinematics import JointField
from skelsplat.losses import LossWeights, make_probes
from skelsplat.pipeline import ProjectState, RunLog, StageConfig
from skelsplat.skeleton import SkeletonTree
from skelsplat.superpoints import MotionSample, MotionSequence
from skelsplat.synthetic import LinkSpec, ArticulatedSpec, generate


def small_config(**over):
    base = dict(dynamic_steps=120, discovery_steps=40, kinematic_steps=40,
                control_period=60, merge_start=60, joint_window_start=30,
                refresh_period=30, n_superpoints=6, hidden=32, depth=2,
                seed=0, loss_weights=LossWeights(smooth=0.0, sparse=0.0))
    base.update(over)
    return StageConfig(**base)


def static_truth(n_timestamps=4):
    links = [LinkSpec(-1, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 12),
             LinkSpec(0, (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, 12,
                      amplitude=0.0)]
    return generate(ArticulatedSpec(links, n_timestamps=n_timestamps))


class TestDynamicStage:
    def test_static_object_converges_to_identity(self):
        truth = static_truth()
        config = small_config()
        state = pipeline.init_state(truth, config)
        log = RunLog()
        pipeline.run_dynamic_stage(state, config, truth, log)
        last = [l for l in log.lines if l.split("\t")[1] == "dynamic"][-1]
        assert float(last.split("\t")[3]) < 1e-6
        motion = state.field.evaluate_sequence(state.superpoints.positions,
                                               state.timestamps)
        for sample in motion:
            assert np.allclose(np.abs(sample.quats[:, 0]), 1.0, atol=1e-3)
            assert np.allclose(sample.translations, 0.0, atol=1e-3)

    def test_same_seed_same_loss_log(self):
        truth = generate(synthetic.hinge2(n_per_link=10, n_timestamps=4))
        config = small_config()
        logs = []
        for _ in range(2):
            state = pipeline.init_state(truth, config)
            log = RunLog()
            pipeline.run_dynamic_stage(state, config, truth, log)
            logs.append(log.lines)
        assert logs[0] == logs[1]

    def test_divergence_guard(self):
        truth = static_truth()
        config = small_config()
        state = pipeline.init_state(truth, config)
        state.field.mlp.weights[0][0, 0] = np.nan
        with pytest.raises(RuntimeError, match="diverged"):
            pipeline.run_dynamic_stage(state, config, truth, RunLog())


class TestStageGating:
    def test_discovery_requires_skeleton(self):
        truth = static_truth()
        config = small_config()
        state = pipeline.init_state(truth, config)
        with pytest.raises(ValueError, match="dynamic stage"):
            pipeline.run_discovery_stage(state, config)

    def test_kinematic_requires_joint_field(self):
        truth = static_truth()
        config = small_config()
        state = pipeline.init_state(truth, config)
        with pytest.raises(ValueError, match="discovery stage"):
            pipeline.run_kinematic_stage(state, config, truth)


def exact_kinematic_state(seed=5):
    """A state whose cached motion is produced by its own kinematic model."""
    rng = np.random.default_rng(seed)
    truth = static_truth(n_timestamps=3)
    config = small_config(n_superpoints=3, discovery_steps=30)
    state = pipeline.init_state(truth, config)
    m = len(state.superpoints)
    parents = np.arange(m)
    parents[1:] = np.arange(m - 1)
    joints = state.superpoints.positions * 0.5
    joints[0] = 0.0
    state.tree = SkeletonTree(parents, joints, root=0)
    field = JointField.create(state.timestamps, hidden=16, depth=2, rng=rng)
    # non-trivial pose: perturb the rotation head and the root trajectory
    field.mlp.weights[-1] += 0.05 * rng.standard_normal(
        field.mlp.weights[-1].shape)
    field.root_trans += 0.1 * rng.standard_normal(field.root_trans.shape)
    state.joint_field = field
    state.probes = make_probes(state.superpoints.positions, seed=seed)
    Q, U, _ = pipeline._pose_batch(state)
    state.cached_motion = MotionSequence(
        [MotionSample(float(t), Q[i].copy(), U[i].copy())
         for i, t in enumerate(state.timestamps)])
    return state, config


class TestDiscoveryStage:
    def test_self_consistent_model_reaches_zero_loss(self):
        state, config = exact_kinematic_state()
        # the cached motion is non-trivial
        assert max(np.abs(s.translations).max()
                   for s in state.cached_motion.samples) > 0.01
        log = RunLog()
        pipeline.run_discovery_stage(state, config, log)
        last = [l for l in log.lines if l.split("\t")[1] == "discovery"][-1]
        assert float(last.split("\t")[3]) < 1e-6
        assert pipeline.discovery_loss_over_cache(state, config) < 1e-6

    def test_kinematic_stage_no_regression_from_optimum(self):
        state, config = exact_kinematic_state()
        truth = static_truth(n_timestamps=3)
        # ground-truth trajectories generated by the model itself
        Q, U, _ = pipeline._pose_batch(state)
        from skelsplat.superpoints import lbs_positions_batch
        mu_t, _ = lbs_positions_batch(Q, U, state.weights.weights(),
                                      state.weights.neighbors,
                                      state.gaussians.positions)
        truth.trajectories = mu_t.copy()
        log = RunLog()
        pipeline.run_kinematic_stage(state, config, truth, log)
        losses = [float(l.split("\t")[3]) for l in log.lines
                  if l.split("\t")[1] == "kinematic"]
        assert losses[0] < 1e-20
        assert losses[-1] < 1e-12


class TestCheckpointing:
    def test_stage_boundary_resume_parity(self, tmp_path):
        truth = generate(synthetic.hinge2(n_per_link=10, n_timestamps=4))
        config = small_config()
        state = pipeline.init_state(truth, config)
        pipeline.run_dynamic_stage(state, config, truth, RunLog())
        pipeline.save_state(state, tmp_path)
        resumed = pipeline.load_state(tmp_path)

        state.step = 0
        resumed.step = 0
        log_a, log_b = RunLog(), RunLog()
        pipeline.run_discovery_stage(state, config, log_a)
        pipeline.run_discovery_stage(resumed, config, log_b)
        last_a = float(log_a.lines[-1].split("\t")[3])
        last_b = float(log_b.lines[-1].split("\t")[3])
        assert last_b == pytest.approx(last_a, abs=1e-6)
        assert pipeline.sp_trajectory_rmse(resumed, truth) == pytest.approx(
            pipeline.sp_trajectory_rmse(state, truth), abs=1e-6)


class TestReport:
    def test_report_renders_figures(self, tmp_path):
        truth = static_truth()
        config = small_config()
        state = pipeline.init_state(truth, config)
        log = RunLog()
        pipeline.run_dynamic_stage(state, config, truth, log)
        pipeline.write_report(tmp_path, log, state,
                              metrics={"trajectory_rmse": 0.0})
        assert (tmp_path / "loss_curves.png").exists()
        assert (tmp_path / "skeleton.png").exists()
        content = (tmp_path / "report.txt").read_text()
        assert "trajectory_rmse\t0.0" in content
