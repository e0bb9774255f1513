"""Forward-kinematic pose model over a discovered skeleton.

A pose is a root transform plus one rotation per non-root node; each node's
global transform is the product of its ancestors' pivot rotations. The
quaternion-form FK keeps the whole chain differentiable for the fitting
stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffops, geom, nn
from .gaussians import GaussianSet
from .geom import RigidTransform
from .skeleton import SkeletonTree
from .superpoints import (L_POS, L_TIME, MotionSample, SkinningWeights,
                          lbs_deform)


@dataclass
class KinematicPose:
    """Root transform plus per-node pivot rotations (root row is unused)."""

    root_quat: np.ndarray     # (4,) unit
    root_trans: np.ndarray    # (3,)
    joint_quats: np.ndarray   # (M, 4) unit

    def __post_init__(self):
        self.root_quat = np.asarray(self.root_quat, dtype=float)
        self.root_trans = np.asarray(self.root_trans, dtype=float)
        self.joint_quats = np.asarray(self.joint_quats, dtype=float)

    @staticmethod
    def identity(m):
        jq = np.zeros((m, 4))
        jq[:, 0] = 1.0
        return KinematicPose(geom.IDENTITY_QUAT.copy(), np.zeros(3), jq)

    def __len__(self):
        return len(self.joint_quats)


def local_joint_transform(quat, joint) -> RigidTransform:
    """Rotation about the fixed pivot: [R, j - R j]."""
    R = geom.quat_to_matrix(quat)
    joint = np.asarray(joint, dtype=float)
    return RigidTransform(R, joint - R @ joint)


def forward_kinematics(tree: SkeletonTree, pose: KinematicPose) -> MotionSample:
    """Global transform per superpoint via root-first ancestor products."""
    if len(pose) != len(tree):
        raise ValueError("pose does not cover the skeleton")
    quats, trans, _ = forward_kinematics_cached(
        tree, pose.root_quat, pose.root_trans, pose.joint_quats, tree.joints)
    return MotionSample(0.0, quats, trans)


def forward_kinematics_cached(tree, root_quat, root_trans, joint_quats, joints):
    """Differentiable FK in quaternion form; returns (quats, trans, cache)."""
    m = len(tree)
    Q = np.zeros((m, 4))
    U = np.zeros((m, 3))
    order = tree.topological_order()
    locals_ = {}
    Q[tree.root] = root_quat
    U[tree.root] = root_trans
    for node in order[1:]:
        p = int(tree.parents[node])
        rotated_j = diffops.rotate(joint_quats[node], joints[node])
        l = joints[node] - rotated_j
        locals_[node] = l
        Q[node] = diffops.quat_mul(Q[p], joint_quats[node])
        U[node] = U[p] + diffops.rotate(Q[p], l)
    return Q, U, (order, locals_, Q.copy(), U.copy())


def forward_kinematics_backward(tree, root_quat, root_trans, joint_quats, joints,
                                cache, grad_Q, grad_U):
    """Reverse-mode FK: grads w.r.t. root params, joint rotations, pivots."""
    order, locals_, Q, U = cache
    m = len(tree)
    dQ = np.asarray(grad_Q, dtype=float).copy()
    dU = np.asarray(grad_U, dtype=float).copy()
    d_jq = np.zeros((m, 4))
    d_joints = np.zeros((m, 3))
    for node in reversed(order[1:]):
        p = int(tree.parents[node])
        l = locals_[node]
        # U[node] = U[p] + rotate(Q[p], l)
        dU[p] += dU[node]
        gq_p, dl = diffops.rotate_backward(Q[p], l, dU[node])
        dQ[p] += gq_p
        # Q[node] = Q[p] (x) jq[node]
        ga, gb = diffops.quat_mul_backward(Q[p], joint_quats[node], dQ[node])
        dQ[p] += ga
        d_jq[node] += gb
        # l = j - rotate(jq, j)
        d_joints[node] += dl
        gq_l, gj = diffops.rotate_backward(joint_quats[node], joints[node], -dl)
        d_jq[node] += gq_l
        d_joints[node] += gj
    return dQ[tree.root], dU[tree.root], d_jq, d_joints


def forward_kinematics_batch(tree, root_quats, root_trans, joint_quats,
                             joints):
    """FK for a batch of poses at once.

    root_quats (T, 4), root_trans (T, 3), joint_quats (T, M, 4); joints are
    shared across the batch. Returns Q (T, M, 4), U (T, M, 3), cache.
    """
    n_t = len(root_quats)
    m = len(tree)
    Q = np.zeros((n_t, m, 4))
    U = np.zeros((n_t, m, 3))
    order = tree.topological_order()
    locals_ = {}
    Q[:, tree.root] = root_quats
    U[:, tree.root] = root_trans
    for node in order[1:]:
        p = int(tree.parents[node])
        jb = np.broadcast_to(joints[node], (n_t, 3))
        l = joints[node] - diffops.rotate(joint_quats[:, node], jb)
        locals_[node] = l
        Q[:, node] = diffops.quat_mul(Q[:, p], joint_quats[:, node])
        U[:, node] = U[:, p] + diffops.rotate(Q[:, p], l)
    return Q, U, (order, locals_, Q.copy(), U.copy())


def forward_kinematics_batch_backward(tree, joint_quats, joints, cache,
                                      grad_Q, grad_U):
    """Batched reverse-mode FK.

    Returns per-pose grads for the root and joint rotations and the pivot
    grads summed over the batch.
    """
    order, locals_, Q, U = cache
    n_t, m = joint_quats.shape[:2]
    dQ = np.asarray(grad_Q, dtype=float).copy()
    dU = np.asarray(grad_U, dtype=float).copy()
    d_jq = np.zeros((n_t, m, 4))
    d_joints = np.zeros((m, 3))
    for node in reversed(order[1:]):
        p = int(tree.parents[node])
        l = locals_[node]
        dU[:, p] += dU[:, node]
        gq_p, dl = diffops.rotate_backward(Q[:, p], l, dU[:, node])
        dQ[:, p] += gq_p
        ga, gb = diffops.quat_mul_backward(Q[:, p], joint_quats[:, node],
                                           dQ[:, node])
        dQ[:, p] += ga
        d_jq[:, node] += gb
        d_joints[node] += dl.sum(axis=0)
        jb = np.broadcast_to(joints[node], (n_t, 3))
        gq_l, gj = diffops.rotate_backward(joint_quats[:, node], jb, -dl)
        d_jq[:, node] += gq_l
        d_joints[node] += gj.sum(axis=0)
    return dQ[:, tree.root], dU[:, tree.root], d_jq, d_joints


class JointField:
    """Joint-rotation network plus a free per-timestamp root trajectory.

    The rotation head mirrors the deformation field: a 4-value quaternion
    delta added to identity, zero-initialized so the pose is the identity at
    step 0. Root parameters are stored raw and normalized at evaluation.
    """

    HEAD = 4

    def __init__(self, mlp: nn.Mlp, timestamps, root_quats_raw=None,
                 root_trans=None):
        expected = nn.encoding_dim(3, L_POS) + nn.encoding_dim(1, L_TIME)
        if mlp.in_dim != expected or mlp.out_dim != self.HEAD:
            raise ValueError("network shape does not match the joint-field head")
        self.mlp = mlp
        self.timestamps = np.asarray(timestamps, dtype=float)
        n_t = len(self.timestamps)
        if root_quats_raw is None:
            root_quats_raw = np.zeros((n_t, 4))
            root_quats_raw[:, 0] = 1.0
        if root_trans is None:
            root_trans = np.zeros((n_t, 3))
        self.root_quats_raw = np.asarray(root_quats_raw, dtype=float)
        self.root_trans = np.asarray(root_trans, dtype=float)

    @classmethod
    def create(cls, timestamps, hidden=256, depth=8, rng=None):
        in_dim = nn.encoding_dim(3, L_POS) + nn.encoding_dim(1, L_TIME)
        mlp = nn.Mlp.create(in_dim, cls.HEAD, hidden=hidden, depth=depth,
                            rng=rng, zero_init_output=True)
        return cls(mlp, timestamps)

    def _encode(self, joints, t):
        joints = np.atleast_2d(joints)
        enc_p = nn.positional_encoding(joints, L_POS)
        enc_t = nn.positional_encoding(np.array([[t]]), L_TIME)
        return np.concatenate(
            [enc_p, np.broadcast_to(enc_t, (len(joints), enc_t.shape[1]))], axis=1)

    def joint_quats_cached(self, joints, t):
        x = self._encode(joints, t)
        out, mlp_cache = self.mlp.forward_cached(x)
        raw = out.copy()
        raw[:, 0] += 1.0
        quats = diffops.quat_normalize(raw)
        return quats, (joints, mlp_cache, raw)

    def joint_quats_backward(self, cache, grad_quats):
        joints, mlp_cache, raw = cache
        grad_out = diffops.quat_normalize_backward(raw, grad_quats)
        param_grads, grad_x = self.mlp.backward(mlp_cache, grad_out)
        enc_dim = nn.encoding_dim(3, L_POS)
        grad_joints = nn.positional_encoding_backward(
            np.atleast_2d(joints), L_POS, grad_x[:, :enc_dim])
        return param_grads, grad_joints

    def joint_quats_batch(self, joints, timestamps):
        """Rotations for every (timestamp, joint) pair in one MLP pass.

        Returns quats (T, M, 4) and a cache for ``joint_quats_batch_backward``.
        """
        joints = np.atleast_2d(joints)
        ts = np.asarray(timestamps, dtype=float).reshape(-1)
        n_t, m = len(ts), len(joints)
        enc_p = nn.positional_encoding(joints, L_POS)
        enc_t = nn.positional_encoding(ts[:, None], L_TIME)
        x = np.concatenate([np.tile(enc_p, (n_t, 1)),
                            np.repeat(enc_t, m, axis=0)], axis=1)
        out, mlp_cache = self.mlp.forward_cached(x)
        raw = out.copy()
        raw[:, 0] += 1.0
        quats = diffops.quat_normalize(raw).reshape(n_t, m, 4)
        return quats, (joints, n_t, m, mlp_cache, raw)

    def joint_quats_batch_backward(self, cache, grad_quats):
        """Returns (mlp param grads, joint-position grads summed over time)."""
        joints, n_t, m, mlp_cache, raw = cache
        grad_out = diffops.quat_normalize_backward(
            raw, np.asarray(grad_quats).reshape(n_t * m, 4))
        param_grads, grad_x = self.mlp.backward(mlp_cache, grad_out)
        enc_dim = nn.encoding_dim(3, L_POS)
        tiled = np.tile(joints, (n_t, 1))
        rows = nn.positional_encoding_backward(tiled, L_POS,
                                               grad_x[:, :enc_dim])
        return param_grads, rows.reshape(n_t, m, 3).sum(axis=0)

    def root_at(self, t):
        """Root transform at time t; slerp/lerp between training timestamps."""
        ts = self.timestamps
        if len(ts) == 0:
            return geom.IDENTITY_QUAT.copy(), np.zeros(3)
        i = int(np.searchsorted(ts, t))
        if i == 0 or (i < len(ts) and ts[i] == t):
            idx = min(i, len(ts) - 1)
            return (geom.normalize_quat(self.root_quats_raw[idx]),
                    self.root_trans[idx].copy())
        if i >= len(ts):
            return (geom.normalize_quat(self.root_quats_raw[-1]),
                    self.root_trans[-1].copy())
        u = (t - ts[i - 1]) / (ts[i] - ts[i - 1])
        qa = geom.normalize_quat(self.root_quats_raw[i - 1])
        qb = geom.normalize_quat(self.root_quats_raw[i])
        return (geom.slerp(qa, qb, u),
                (1 - u) * self.root_trans[i - 1] + u * self.root_trans[i])

    def evaluate(self, tree: SkeletonTree, t) -> KinematicPose:
        quats, _ = self.joint_quats_cached(tree.joints, t)
        root_q, root_t = self.root_at(t)
        return KinematicPose(root_q, root_t, quats)


def repose(g_set: GaussianSet, weights: SkinningWeights, tree: SkeletonTree,
           pose: KinematicPose) -> GaussianSet:
    """Forward kinematics then linear blend skinning."""
    return lbs_deform(g_set, forward_kinematics(tree, pose), weights)


def interpolate_poses(a: KinematicPose, b: KinematicPose, u) -> KinematicPose:
    """Per-joint slerp; root rotation slerp plus translation lerp."""
    if len(a) != len(b):
        raise ValueError("skeleton size mismatch between poses")
    jq = np.stack([geom.slerp(qa, qb, u)
                   for qa, qb in zip(a.joint_quats, b.joint_quats)])
    return KinematicPose(geom.slerp(a.root_quat, b.root_quat, u),
                         (1 - u) * a.root_trans + u * b.root_trans, jq)
