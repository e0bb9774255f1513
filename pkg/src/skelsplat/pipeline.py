"""Three-stage training: dynamic fit, skeleton discovery, kinematic fit.

The dynamic stage trains the superpoint deformation field and skinning
weights against ground-truth trajectories while adaptive control reshapes the
superpoint set. Discovery freezes the field, caches its motion, and fits the
joint field plus joint positions. The kinematic stage fine-tunes everything
pose-related with counts and the field frozen.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import diffops, nn
from .control import ControlThresholds, densify, merge, prune
from .gaussians import GaussianSet, load_ply, save_ply
from .geom import matrix_to_quat
from .kinematics import (JointField, forward_kinematics_backward,
                         forward_kinematics_batch,
                         forward_kinematics_batch_backward,
                         forward_kinematics_cached)
from .losses import (LossWeights, l_discovery, l_joint, l_smooth, l_sparse,
                     make_probes, neighbor_edges)
from .skeleton import SkeletonTree, discover_skeleton
from .superpoints import (DeformField, MotionSample, MotionSequence,
                          SkinningWeights, SuperpointSet,
                          farthest_point_sampling, knn_assign, lbs_positions,
                          lbs_positions_backward, lbs_positions_batch,
                          lbs_positions_batch_backward)


@dataclass
class StageConfig:
    dynamic_steps: int = 8000
    discovery_steps: int = 2000
    kinematic_steps: int = 8000
    control_period: int = 1000
    # merge events start at this step; before it, control events prune/clone
    merge_start: int = 4000
    # step at which the joint term activates and pair refreshes begin
    joint_window_start: int = 1000
    refresh_period: int = 100
    lr: float = 1e-3
    lr_final: float = 1e-5
    discovery_lr: float = 1e-3
    n_superpoints: int = 16
    hidden: int = 64
    depth: int = 3
    seed: int = 0
    loss_weights: LossWeights = dc_field(default_factory=LossWeights)
    thresholds: ControlThresholds = dc_field(default_factory=ControlThresholds)

    def __post_init__(self):
        if not (0 <= self.joint_window_start <= self.dynamic_steps):
            raise ValueError("joint window outside the dynamic stage")
        if not (0 <= self.merge_start <= self.dynamic_steps):
            raise ValueError("merge window outside the dynamic stage")


@dataclass
class ProjectState:
    gaussians: GaussianSet
    superpoints: SuperpointSet
    weights: SkinningWeights
    field: DeformField
    timestamps: np.ndarray
    cached_motion: MotionSequence | None = None
    pair_table: dict | None = None
    tree: SkeletonTree | None = None
    joint_field: JointField | None = None
    probes: np.ndarray | None = None
    stage: str = "init"
    step: int = 0
    rng: np.random.Generator = None

    def motion_source(self):
        """Cached motion when available, live field otherwise."""
        if self.cached_motion is not None:
            return self.cached_motion
        return self.field.evaluate_sequence(self.superpoints.positions,
                                            self.timestamps)


def init_state(truth, config: StageConfig) -> ProjectState:
    """FPS superpoints over the canonical Gaussians, fresh field and weights."""
    mu = truth.gaussians.positions
    m = min(config.n_superpoints, len(mu))
    idx = farthest_point_sampling(mu, m, seed=config.seed)
    superpoints = SuperpointSet(mu[idx].copy())
    k = min(5, m)
    neighbors = knn_assign(mu, superpoints.positions, k=k)
    weights = SkinningWeights(neighbors, np.zeros_like(neighbors, dtype=float))
    field = DeformField.create(hidden=config.hidden, depth=config.depth,
                               rng=np.random.default_rng(config.seed + 1))
    return ProjectState(truth.gaussians.copy(), superpoints, weights, field,
                        np.asarray(truth.timestamps, dtype=float),
                        rng=np.random.default_rng(config.seed + 2))


def _sp_links(state: ProjectState, truth):
    """Superpoint-to-part labels by dominant share of skinning-weight mass.

    Labeling by the Gaussians a superpoint actually drives (rather than by
    its nearest canonical Gaussian) keeps the transform supervision aligned
    with the skinning assignment; a boundary superpoint otherwise gets
    supervised with one part's motion while animating another's Gaussians,
    which corrupts every candidate pair it participates in.
    """
    if getattr(state, "_sp_links_cache", None) is None or \
            len(state._sp_links_cache) != len(state.superpoints):
        m = len(state.superpoints)
        w = state.weights.weights()
        mass = np.zeros((m, int(truth.link_ids.max()) + 1))
        np.add.at(mass, (state.weights.neighbors.ravel(),
                         np.repeat(truth.link_ids, state.weights.k)),
                  w.ravel())
        links = np.argmax(mass, axis=1)
        uncovered = mass.sum(axis=1) <= 0
        if uncovered.any():
            d2 = ((state.superpoints.positions[uncovered, None, :]
                   - truth.gaussians.positions[None, :, :]) ** 2).sum(axis=2)
            links[uncovered] = truth.link_ids[np.argmin(d2, axis=1)]
        state._sp_links_cache = links
    return state._sp_links_cache


def _dynamic_targets(state: ProjectState, truth):
    """Stacked trajectory and per-superpoint transform targets (all t)."""
    links = _sp_links(state, truth)
    gt_traj = np.stack(truth.trajectories)                    # (T, N, 3)
    gt_sp_q = np.stack([s.quats[links] for s in truth.motion])
    gt_sp_o = np.stack([s.translations[links] for s in truth.motion])
    return gt_traj, gt_sp_q, gt_sp_o


class RunLog:
    """Line-delimited training log; deterministic content for fixed seeds."""

    def __init__(self, path=None):
        self.path = path
        self.lines = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "a")
        else:
            self._fh = None

    def write(self, line):
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _refresh_skeleton(state: ProjectState):
    """Re-estimate candidate joints from the live field, EMA-folded."""
    motion = state.field.evaluate_sequence(state.superpoints.positions,
                                           state.timestamps)
    try:
        tree, pairs = discover_skeleton(state.superpoints.positions, motion,
                                        pair_table=state.pair_table)
    except ValueError:
        return  # disconnected candidate graph; keep the previous estimate
    state.tree = tree
    state.pair_table = pairs


def run_dynamic_stage(state: ProjectState, config: StageConfig, truth,
                      log: RunLog | None = None) -> ProjectState:
    log = log or RunLog()
    lw = config.loss_weights
    mu = state.gaussians.positions
    n_t = len(state.timestamps)
    adam_field, adam_skin = _make_dynamic_adams(state, config)
    state.stage = "dynamic"
    gt_traj, gt_sp_q, gt_sp_o = _dynamic_targets(state, truth)
    smooth_edges = neighbor_edges(mu, 5)

    for step in range(state.step, config.dynamic_steps):
        state.step = step
        joint_active = step >= config.joint_window_start

        # control events between optimization steps
        if step > 0 and step % config.control_period == 0:
            changed = _control_event(state, config, truth, log, step,
                                     gt_traj)
            if changed:
                # the field keeps its schedule; the skinning side restarts
                # so rebuilt weights retrain at a healthy learning rate
                adam_field, adam_skin = _make_dynamic_adams(
                    state, config, t_field=adam_field.t)
                mu = state.gaussians.positions
            # Superpoint part labels follow the evolving skinning weights,
            # but only while the learning rate is high enough for the field
            # to track a flipped target; late flips would strand a
            # superpoint's transform between two parts' motions.
            if step <= config.dynamic_steps // 2:
                state._sp_links_cache = None
            gt_traj, gt_sp_q, gt_sp_o = _dynamic_targets(state, truth)

        if joint_active and step % config.refresh_period == 0:
            _refresh_skeleton(state)

        m = len(state.superpoints)
        soft = state.weights.weights()
        quats, trans, f_cache = state.field.evaluate_batch(
            state.superpoints.positions, state.timestamps)

        # per-superpoint transform supervision, full batch over timestamps
        sp_denom = n_t * m
        od = trans - gt_sp_o
        ang2 = diffops.geodesic_angle_sq(quats, gt_sp_q)
        fit = float((od ** 2).sum() + ang2.sum()) / sp_denom
        gQ, _ = diffops.geodesic_angle_sq_backward(
            quats, gt_sp_q, np.full(ang2.shape, 1.0 / sp_denom))
        gT = 2.0 * od / sp_denom

        # Gaussian trajectory term on one timestamp, rotated deterministically
        i = step % n_t
        sample = MotionSample(float(state.timestamps[i]), quats[i], trans[i])
        mu_t, lbs_cache = lbs_positions(sample, soft,
                                        state.weights.neighbors, mu)
        diff = mu_t - gt_traj[i]
        fit += float((diff ** 2).sum()) / len(mu)
        # Gradient stop toward the field: the trajectory term trains the
        # skinning weights; the field is driven by the transform supervision
        # and the rigidity term. Full coupling keeps the field's noise floor
        # above the merge threshold (see losses for the fully coupled form).
        _, _, gW, _ = lbs_positions_backward(
            sample, soft, state.weights.neighbors, mu, lbs_cache,
            2.0 * diff / len(mu))

        # rigidity between neighboring superpoints at the same timestamp
        src, dst = neighbor_edges(state.superpoints.positions, 5)
        e_ang2 = diffops.geodesic_angle_sq(quats[i, src], quats[i, dst])
        e_od = trans[i, src] - trans[i, dst]
        arap = float(e_ang2.sum() + (e_od ** 2).sum())
        ea, eb = diffops.geodesic_angle_sq_backward(
            quats[i, src], quats[i, dst], np.ones(len(src)))
        gQ_arap = np.zeros_like(gQ)
        gT_arap = np.zeros_like(gT)
        np.add.at(gQ_arap[i], src, ea)
        np.add.at(gQ_arap[i], dst, eb)
        np.add.at(gT_arap[i], src, 2.0 * e_od)
        np.add.at(gT_arap[i], dst, -2.0 * e_od)

        field_params, grad_sp = state.field.backward_batch(
            f_cache, lw.fit * gQ + lw.arap * gQ_arap,
            lw.fit * gT + lw.arap * gT_arap)

        smooth, g_logits_sm = l_smooth(state.weights, mu, m,
                                       edges=smooth_edges)
        sparse, g_logits_sp = l_sparse(state.weights)

        joint = 0.0
        if joint_active and state.tree is not None and state.pair_table:
            distances = {k: p.smoothed for k, p in state.pair_table.items()}
            joint = l_joint(distances, m, state.tree.edges)
        joint_w = lw.joint if joint_active else 0.0

        total = (lw.fit * fit + joint_w * joint + lw.arap * arap
                 + lw.smooth * smooth + lw.sparse * sparse)
        if not np.isfinite(total):
            raise RuntimeError(f"dynamic stage diverged at step {step}")

        adam_field.step(field_params)
        adam_skin.step([lw.fit * diffops.softmax_backward(soft, gW)
                        + lw.smooth * g_logits_sm + lw.sparse * g_logits_sp,
                        grad_sp])

        log.write(f"step\tdynamic\t{step}\t{total:.10g}\t{fit:.10g}\t"
                  f"{joint:.10g}\t{arap:.10g}\t{smooth:.10g}\t{sparse:.10g}")

    state.step = config.dynamic_steps
    _refresh_skeleton(state)
    refine_rigid_motion(state, truth)
    return state


def _kabsch(x, y):
    """Least-squares rigid transform mapping point set x onto y."""
    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    h = (x - cx).T @ (y - cy)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cy - rot @ cx


def refine_rigid_motion(state: ProjectState, truth, n_iters=2):
    """Hard-EM polish of the superpoint motion after the dynamic stage.

    The scenes are piecewise rigid, so alternating closed-form rigid fits
    per superpoint with reassignment of each Gaussian to the nearby
    superpoint whose motion predicts its trajectory best sharpens both the
    cached motion and the skinning weights far beyond what gradient steps
    reach. The skeleton is then re-discovered from the polished motion.
    """
    mu = state.gaussians.positions
    traj = np.stack(truth.trajectories)                       # (T, N, 3)
    m = len(state.superpoints)
    k = state.weights.k
    assign = np.argmax(state.weights.dense(m), axis=1)
    motion = state.field.evaluate_sequence(state.superpoints.positions,
                                           state.timestamps)
    Q = np.stack([s.quats for s in motion.samples])           # (T, M, 4)
    U = np.stack([s.translations for s in motion.samples])    # (T, M, 3)
    candidates = knn_assign(mu, state.superpoints.positions, k)

    def refit(targets):
        for j in targets:
            members = np.nonzero(assign == j)[0]
            if len(members) < 3:
                continue  # keep the field's estimate for starved superpoints
            for i in range(len(state.timestamps)):
                rot, off = _kabsch(mu[members], traj[i, members])
                Q[i, j] = matrix_to_quat(rot)
                U[i, j] = off

    for _ in range(n_iters):
        refit(range(m))
        # reassign each Gaussian within its spatial neighborhood by fit
        err = np.empty((len(mu), k))
        for c in range(k):
            j = candidates[:, c]
            pred = diffops.rotate(Q[:, j], mu) + U[:, j]
            err[:, c] = ((pred - traj) ** 2).sum(axis=2).mean(axis=0)
        assign = candidates[np.arange(len(mu)), err.argmin(axis=1)]

    # drop superpoints that attract too few Gaussians to fit a rigid motion;
    # their stale field motion would otherwise pollute the joint solves
    counts = np.bincount(assign, minlength=m)
    keep = np.nonzero(counts >= 3)[0]
    if 2 <= len(keep) < m:
        remap = np.full(m, -1, dtype=int)
        remap[keep] = np.arange(len(keep))
        state.superpoints = SuperpointSet(state.superpoints.positions[keep])
        Q, U = Q[:, keep], U[:, keep]
        assign = remap[assign]
        m = len(keep)
        k = min(k, m)
        candidates = knn_assign(mu, state.superpoints.positions, k)
    refit(np.unique(assign))

    state.cached_motion = MotionSequence(
        [MotionSample(float(t), Q[i].copy(), U[i].copy())
         for i, t in enumerate(state.timestamps)])
    # near-one-hot skinning onto the assigned superpoint (column 0)
    neighbors = candidates.copy()
    rows = np.arange(len(mu))
    match = neighbors == assign[:, None]
    col = np.where(match.any(axis=1), match.argmax(axis=1), k - 1)
    neighbors[rows, col] = neighbors[rows, 0]
    neighbors[rows, 0] = assign
    logits = np.zeros((len(mu), k))
    logits[:, 0] = 8.0
    state.weights = SkinningWeights(neighbors, logits)
    state._sp_links_cache = None
    try:
        # all pairs: co-moving superpoints must be able to link directly even
        # when they sit at opposite ends of a long part
        tree, pairs = discover_skeleton(state.superpoints.positions,
                                        state.cached_motion,
                                        k_prime=m - 1, pair_table={})
        state.tree, state.pair_table = tree, pairs
    except ValueError:
        pass  # disconnected candidate graph; keep the previous skeleton


def _make_dynamic_adams(state, config, t_field=0):
    adam_field = nn.Adam(state.field.mlp.parameters(), lr=config.lr,
                         lr_final=config.lr_final,
                         total_steps=config.dynamic_steps)
    adam_field.t = t_field
    adam_skin = nn.Adam([state.weights.logits, state.superpoints.positions],
                        lr=config.lr, lr_final=config.lr_final,
                        total_steps=config.dynamic_steps)
    return adam_field, adam_skin


def _control_event(state: ProjectState, config: StageConfig, truth, log,
                   step, gt_traj):
    """Prune + densify early; merge once the motion has settled."""
    mu = state.gaussians.positions
    changed = False
    if step < config.merge_start:
        sp, w, report = prune(mu, state.superpoints, state.weights,
                              config.thresholds)
        for e in report:
            log.write(e.line())
        if report:
            state.superpoints, state.weights = sp, w
            changed = True
        # densification driven by current trajectory residuals
        quats, trans, _ = state.field.evaluate_batch(
            state.superpoints.positions, state.timestamps)
        mu_t, _ = lbs_positions_batch(quats, trans, state.weights.weights(),
                                      state.weights.neighbors, mu)
        grad_mu_t = (2.0 * (mu_t - gt_traj) / len(mu)).mean(axis=0)
        sp, w, report = densify(mu, state.superpoints, state.weights,
                                config.thresholds, grad_mu_t,
                                rng=state.rng)
        for e in report:
            log.write(e.line())
        if report:
            state.superpoints, state.weights = sp, w
            changed = True
    else:
        motion = state.field.evaluate_sequence(state.superpoints.positions,
                                               state.timestamps)
        sp, w, report = merge(mu, state.superpoints, state.weights, motion,
                              config.thresholds)
        for e in report:
            log.write(e.line())
        if report:
            state.superpoints, state.weights = sp, w
            changed = True
    if changed:
        # superpoint identities moved: joint estimates no longer apply
        state.tree = None
        state.pair_table = None
        state._sp_links_cache = None
    return changed


def _discovery_params(state: ProjectState):
    jf = state.joint_field
    return (jf.mlp.parameters()
            + [state.tree.joints, jf.root_quats_raw, jf.root_trans])


def _pose_at_index(state: ProjectState, i):
    """Differentiable pose at training timestamp index i; returns values+caches."""
    jf = state.joint_field
    t = float(state.timestamps[i])
    jq, psi_cache = jf.joint_quats_cached(state.tree.joints, t)
    root_q = diffops.quat_normalize(jf.root_quats_raw[i])
    root_t = jf.root_trans[i]
    Q, U, fk_cache = forward_kinematics_cached(
        state.tree, root_q, root_t, jq, state.tree.joints)
    return Q, U, (jq, psi_cache, root_q, fk_cache, i)


def _pose_backward(state: ProjectState, caches, grad_Q, grad_U):
    """Push transform grads to Psi params, joints, and root parameters."""
    jq, psi_cache, root_q, fk_cache, i = caches
    jf = state.joint_field
    d_root_q, d_root_t, d_jq, d_joints = forward_kinematics_backward(
        state.tree, root_q, jf.root_trans[i], jq, state.tree.joints,
        fk_cache, grad_Q, grad_U)
    psi_grads, d_joints_enc = jf.joint_quats_backward(psi_cache, d_jq)
    d_joints = d_joints + d_joints_enc
    d_joints[state.tree.root] = 0.0  # the root has no joint
    g_root_raw = np.zeros_like(jf.root_quats_raw)
    g_root_raw[i] = diffops.quat_normalize_backward(jf.root_quats_raw[i],
                                                    d_root_q)
    g_root_t = np.zeros_like(jf.root_trans)
    g_root_t[i] = d_root_t
    return psi_grads + [d_joints, g_root_raw, g_root_t]


def _pose_batch(state: ProjectState):
    """Differentiable poses at every training timestamp at once."""
    jf = state.joint_field
    jq, psi_cache = jf.joint_quats_batch(state.tree.joints, state.timestamps)
    root_q = diffops.quat_normalize(jf.root_quats_raw)
    Q, U, fk_cache = forward_kinematics_batch(
        state.tree, root_q, jf.root_trans, jq, state.tree.joints)
    return Q, U, (jq, psi_cache, root_q, fk_cache)


def _pose_batch_backward(state: ProjectState, caches, grad_Q, grad_U):
    """Batched counterpart of ``_pose_backward`` over all timestamps."""
    jq, psi_cache, root_q, fk_cache = caches
    jf = state.joint_field
    d_root_q, d_root_t, d_jq, d_joints = forward_kinematics_batch_backward(
        state.tree, jq, state.tree.joints, fk_cache, grad_Q, grad_U)
    psi_grads, d_joints_enc = jf.joint_quats_batch_backward(psi_cache, d_jq)
    d_joints = d_joints + d_joints_enc
    d_joints[state.tree.root] = 0.0  # the root has no joint
    g_root_raw = diffops.quat_normalize_backward(jf.root_quats_raw, d_root_q)
    return psi_grads + [d_joints, g_root_raw, d_root_t]


def run_discovery_stage(state: ProjectState, config: StageConfig,
                        log: RunLog | None = None) -> ProjectState:
    log = log or RunLog()
    if state.tree is None:
        raise ValueError("no skeleton available; run the dynamic stage first")
    lw = config.loss_weights
    state.stage = "discovery"
    # freeze the deformation field by caching its outputs
    if state.cached_motion is None:
        state.cached_motion = state.field.evaluate_sequence(
            state.superpoints.positions, state.timestamps)
    if state.joint_field is None:
        state.joint_field = JointField.create(
            state.timestamps, hidden=config.hidden, depth=config.depth,
            rng=np.random.default_rng(config.seed + 3))
    if state.probes is None:
        state.probes = make_probes(state.superpoints.positions,
                                   seed=config.seed)
    adam = nn.Adam(_discovery_params(state), lr=config.discovery_lr,
                   total_steps=config.discovery_steps)
    n_t = len(state.timestamps)
    m = len(state.superpoints)
    cached_q = np.stack([s.quats for s in state.cached_motion.samples])
    cached_o = np.stack([s.translations for s in state.cached_motion.samples])
    probes_b = np.tile(state.probes, (n_t, 1))

    for step in range(config.discovery_steps):
        Q, U, caches = _pose_batch(state)
        loss, gQ, gU = l_discovery(Q.reshape(-1, 4), U.reshape(-1, 3),
                                   cached_q.reshape(-1, 4),
                                   cached_o.reshape(-1, 3),
                                   probes_b, lambda_pos=lw.pos,
                                   lambda_probe=lw.probe)
        if not np.isfinite(loss):
            raise RuntimeError(f"discovery stage diverged at step {step}")
        adam.step(_pose_batch_backward(state, caches,
                                       gQ.reshape(n_t, m, 4),
                                       gU.reshape(n_t, m, 3)))
        log.write(f"step\tdiscovery\t{step}\t{loss:.10g}")
    state.step = config.discovery_steps
    return state


def discovery_loss_over_cache(state: ProjectState, config: StageConfig):
    """Mean l_discovery across all cached timestamps (evaluation only)."""
    lw = config.loss_weights
    total = 0.0
    for i in range(len(state.timestamps)):
        cached = state.cached_motion[i]
        Q, U, _ = _pose_at_index(state, i)
        loss, _, _ = l_discovery(Q, U, cached.quats, cached.translations,
                                 state.probes, lambda_pos=lw.pos,
                                 lambda_probe=lw.probe)
        total += loss
    return total / len(state.timestamps)


def run_kinematic_stage(state: ProjectState, config: StageConfig, truth,
                        log: RunLog | None = None) -> ProjectState:
    log = log or RunLog()
    if state.joint_field is None:
        raise ValueError("no joint field; run the discovery stage first")
    state.stage = "kinematic"
    mu = state.gaussians.positions
    params = _discovery_params(state) + [state.weights.logits, mu]
    adam = nn.Adam(params, lr=config.lr, lr_final=config.lr_final,
                   total_steps=config.kinematic_steps)
    n_t = len(state.timestamps)
    n = len(mu)

    gt_traj = np.stack(truth.trajectories)

    for step in range(config.kinematic_steps):
        Q, U, caches = _pose_batch(state)
        soft = state.weights.weights()
        mu_t, lbs_cache = lbs_positions_batch(Q, U, soft,
                                              state.weights.neighbors, mu)
        diff = mu_t - gt_traj
        loss = float((diff ** 2).sum() / (n * n_t))
        if not np.isfinite(loss):
            raise RuntimeError(f"kinematic stage diverged at step {step}")
        gQ, gU, g_w, g_mu = lbs_positions_batch_backward(
            Q, soft, state.weights.neighbors, mu, lbs_cache,
            2.0 * diff / (n * n_t))
        pose_grads = _pose_batch_backward(state, caches, gQ, gU)
        g_logits = diffops.softmax_backward(soft, g_w)
        adam.step(pose_grads + [g_logits, g_mu])
        log.write(f"step\tkinematic\t{step}\t{loss:.10g}")
    state.step = config.kinematic_steps
    return state


def trajectory_rmse(state: ProjectState, truth):
    """RMSE of kinematically reposed Gaussian centers over all timestamps."""
    mu = state.gaussians.positions
    errs = []
    for i in range(len(state.timestamps)):
        Q, U, _ = _pose_at_index(state, i)
        sample = MotionSample(float(state.timestamps[i]), Q, U)
        mu_t, _ = lbs_positions(sample, state.weights.weights(),
                                state.weights.neighbors, mu)
        errs.append(((mu_t - truth.trajectories[i]) ** 2).sum(axis=1))
    return float(np.sqrt(np.mean(np.concatenate(errs))))


def sp_trajectory_rmse(state: ProjectState, truth):
    """RMSE of kinematically posed superpoint positions over all timestamps.

    Ground-truth superpoint trajectories come from the part transform each
    superpoint's skinning mass selects, recomputed from the final weights.
    """
    state._sp_links_cache = None
    links = _sp_links(state, truth)
    sp = state.superpoints.positions
    Q, U, _ = _pose_batch(state)
    pred = diffops.rotate(Q, np.broadcast_to(sp, Q.shape[:2] + (3,))) + U
    gt = np.stack([diffops.rotate(s.quats[links], sp) + s.translations[links]
                   for s in truth.motion])
    return float(np.sqrt(np.mean(np.sum((pred - gt) ** 2, axis=2))))


def dynamic_trajectory_rmse(state: ProjectState, truth):
    """RMSE of field-deformed Gaussian centers (dynamic-stage fit quality)."""
    mu = state.gaussians.positions
    motion = state.motion_source()
    errs = []
    for i in range(len(state.timestamps)):
        mu_t, _ = lbs_positions(motion[i], state.weights.weights(),
                                state.weights.neighbors, mu)
        errs.append(((mu_t - truth.trajectories[i]) ** 2).sum(axis=1))
    return float(np.sqrt(np.mean(np.concatenate(errs))))


def train_all(state: ProjectState, config: StageConfig, truth,
              log: RunLog | None = None) -> ProjectState:
    state = run_dynamic_stage(state, config, truth, log)
    state.step = 0
    state = run_discovery_stage(state, config, log)
    state.step = 0
    state = run_kinematic_stage(state, config, truth, log)
    return state


# ---------------------------------------------------------------------------
# checkpointing

def save_state(state: ProjectState, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_ply(state.gaussians, os.path.join(out_dir, "gaussians.ply"))
    nn.save_checkpoint(os.path.join(out_dir, "field.bin"), state.field.mlp)
    arrays = {
        "sp_positions": state.superpoints.positions,
        "neighbors": state.weights.neighbors,
        "logits": state.weights.logits,
        "timestamps": state.timestamps,
        "gaussian_positions": state.gaussians.positions,
    }
    if state.probes is not None:
        arrays["probes"] = state.probes
    if state.joint_field is not None:
        nn.save_checkpoint(os.path.join(out_dir, "psi.bin"),
                           state.joint_field.mlp)
        arrays["root_quats_raw"] = state.joint_field.root_quats_raw
        arrays["root_trans"] = state.joint_field.root_trans
    if state.cached_motion is not None:
        arrays["cached_quats"] = np.stack([s.quats for s in
                                           state.cached_motion.samples])
        arrays["cached_trans"] = np.stack([s.translations for s in
                                           state.cached_motion.samples])
    np.savez(os.path.join(out_dir, "state.npz"), **arrays)
    meta = {
        "version": 1,
        "stage": state.stage,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state if state.rng else None,
        "tree": state.tree.to_dict() if state.tree is not None else None,
        "pair_table": ({f"{a},{b}": p.smoothed
                        for (a, b), p in state.pair_table.items()}
                       if state.pair_table else None),
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh)


def load_state(out_dir) -> ProjectState:
    from .skeleton import evaluate_pair  # local import to avoid a cycle

    gaussians = load_ply(os.path.join(out_dir, "gaussians.ply"))
    data = np.load(os.path.join(out_dir, "state.npz"))
    # PLY stores float32; restore the float64 training positions
    gaussians.positions = data["gaussian_positions"].copy()
    with open(os.path.join(out_dir, "meta.json")) as fh:
        meta = json.load(fh)
    mlp, _ = nn.load_checkpoint(os.path.join(out_dir, "field.bin"))
    state = ProjectState(
        gaussians,
        SuperpointSet(data["sp_positions"].copy()),
        SkinningWeights(data["neighbors"].copy(), data["logits"].copy()),
        DeformField(mlp),
        data["timestamps"].copy(),
        stage=meta["stage"],
        step=meta["step"],
    )
    if meta["rng_state"] is not None:
        state.rng = np.random.default_rng(0)
        state.rng.bit_generator.state = meta["rng_state"]
    if meta["tree"] is not None:
        state.tree = SkeletonTree.from_dict(meta["tree"])
    if "probes" in data:
        state.probes = data["probes"].copy()
    if os.path.exists(os.path.join(out_dir, "psi.bin")):
        psi, _ = nn.load_checkpoint(os.path.join(out_dir, "psi.bin"))
        state.joint_field = JointField(psi, state.timestamps,
                                       data["root_quats_raw"].copy(),
                                       data["root_trans"].copy())
    if "cached_quats" in data:
        samples = [MotionSample(float(t), q.copy(), o.copy())
                   for t, q, o in zip(state.timestamps, data["cached_quats"],
                                      data["cached_trans"])]
        state.cached_motion = MotionSequence(samples)
    if meta["pair_table"]:
        # rebuild full pair entries from the live field; EMA values restored
        motion = state.field.evaluate_sequence(state.superpoints.positions,
                                               state.timestamps)
        table = {}
        for key, smoothed in meta["pair_table"].items():
            a, b = (int(v) for v in key.split(","))
            pair = evaluate_pair(a, b, motion)
            pair.smoothed = smoothed
            table[(a, b)] = pair
        state.pair_table = table
    return state


# ---------------------------------------------------------------------------
# report figures

def write_report(project_dir, log: RunLog, state: ProjectState = None,
                 metrics: dict = None):
    """Loss curves and a skeleton plot rendered next to the run log."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(project_dir, exist_ok=True)
    by_stage = {}
    for line in log.lines:
        parts = line.split("\t")
        if parts[0] != "step":
            continue
        by_stage.setdefault(parts[1], []).append(float(parts[3]))
    if by_stage:
        fig, ax = plt.subplots(figsize=(7, 4))
        for stage, values in by_stage.items():
            ax.plot(values, label=stage, linewidth=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("step (within stage)")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(project_dir, "loss_curves.png"), dpi=110)
        plt.close(fig)

    if state is not None and state.tree is not None:
        fig = plt.figure(figsize=(6, 6))
        ax = fig.add_subplot(projection="3d")
        sp = state.superpoints.positions
        ax.scatter(sp[:, 0], sp[:, 1], sp[:, 2], s=30, c="tab:blue")
        for child, parent in state.tree.edges:
            j = state.tree.joints[child]
            ax.scatter(*j, s=50, c="tab:red", marker="x")
            for end in (sp[child], sp[parent]):
                ax.plot(*np.stack([j, end]).T, c="gray", linewidth=0.8)
        ax.set_title("discovered skeleton")
        fig.tight_layout()
        fig.savefig(os.path.join(project_dir, "skeleton.png"), dpi=110)
        plt.close(fig)

    if metrics:
        with open(os.path.join(project_dir, "report.txt"), "w") as fh:
            for key, value in metrics.items():
                fh.write(f"{key}\t{value}\n")
