"""Procedural articulated objects with exact ground truth.

Generates capsule-shaped Gaussian links on a kinematic tree, scripts joint
angles over time, and produces per-link rigid transforms plus per-Gaussian
trajectories by exact forward kinematics. These play the role that multi-view
video plays at full scale: a supervision signal with known answers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .gaussians import GaussianSet, inverse_sigmoid, save_ply, load_ply
from .kinematics import KinematicPose, forward_kinematics
from .skeleton import SkeletonTree
from .superpoints import MotionSequence, SkinningWeights

SH_DC = 0.28209479177387814


@dataclass
class LinkSpec:
    """One rigid segment; non-root links hinge about `axis` at `pivot`."""

    parent: int                 # -1 for the root link
    pivot: tuple                # segment start; the joint for non-root links
    direction: tuple            # unit segment direction
    length: float
    n_gaussians: int = 24
    color: tuple = (0.8, 0.3, 0.3)
    # angle script theta(t): "sine" uses amplitude*sin(2*pi*freq*t + phase),
    # "linear" ramps 0 -> amplitude
    curve: str = "sine"
    amplitude: float = 0.0
    frequency: float = 1.0
    phase: float = 0.0
    axis: tuple = (0.0, 0.0, 1.0)

    def angle(self, t):
        if self.curve == "linear":
            return self.amplitude * t
        if self.curve == "sine":
            return self.amplitude * np.sin(2 * np.pi * self.frequency * t
                                           + self.phase)
        raise ValueError(f"unknown angle curve: {self.curve}")


@dataclass
class ArticulatedSpec:
    links: list
    n_timestamps: int = 20
    seed: int = 0
    # root motion: sinusoidal translation plus rotation about an axis
    root_trans_amp: tuple = (0.0, 0.0, 0.0)
    root_rot_axis: tuple = (0.0, 1.0, 0.0)
    root_rot_amp: float = 0.0

    def __post_init__(self):
        if self.n_timestamps < 2:
            raise ValueError("need at least 2 timestamps")
        for k, link in enumerate(self.links):
            if link.parent >= k:
                raise ValueError("links must be listed parents-first")
        if self.links[0].parent != -1:
            raise ValueError("link 0 must be the root")
        if sum(1 for l in self.links if l.parent == -1) != 1:
            raise ValueError("exactly one root link")

    def to_dict(self):
        return {
            "version": 1,
            "n_timestamps": self.n_timestamps,
            "seed": self.seed,
            "root_trans_amp": list(self.root_trans_amp),
            "root_rot_axis": list(self.root_rot_axis),
            "root_rot_amp": self.root_rot_amp,
            "links": [{
                "parent": l.parent,
                "pivot": list(l.pivot),
                "direction": list(l.direction),
                "length": l.length,
                "n_gaussians": l.n_gaussians,
                "color": list(l.color),
                "curve": l.curve,
                "amplitude": l.amplitude,
                "frequency": l.frequency,
                "phase": l.phase,
                "axis": list(l.axis),
            } for l in self.links],
        }

    @staticmethod
    def from_dict(d):
        links = [LinkSpec(parent=ld["parent"], pivot=tuple(ld["pivot"]),
                          direction=tuple(ld["direction"]),
                          length=ld["length"],
                          n_gaussians=ld.get("n_gaussians", 24),
                          color=tuple(ld.get("color", (0.8, 0.3, 0.3))),
                          curve=ld.get("curve", "sine"),
                          amplitude=ld.get("amplitude", 0.0),
                          frequency=ld.get("frequency", 1.0),
                          phase=ld.get("phase", 0.0),
                          axis=tuple(ld.get("axis", (0, 0, 1))))
                 for ld in d["links"]]
        return ArticulatedSpec(links,
                               n_timestamps=d.get("n_timestamps", 20),
                               seed=d.get("seed", 0),
                               root_trans_amp=tuple(d.get("root_trans_amp",
                                                          (0, 0, 0))),
                               root_rot_axis=tuple(d.get("root_rot_axis",
                                                         (0, 1, 0))),
                               root_rot_amp=d.get("root_rot_amp", 0.0))


@dataclass
class GroundTruth:
    gaussians: GaussianSet        # canonical
    link_ids: np.ndarray          # (N,)
    motion: MotionSequence        # per-link transforms per timestamp
    tree: SkeletonTree            # true skeleton over links
    trajectories: np.ndarray      # (N_t, N, 3)
    timestamps: np.ndarray        # (N_t,)
    spec: ArticulatedSpec

    @property
    def bbox_diagonal(self):
        pos = self.gaussians.positions
        return float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))


def _direction_quat(direction):
    """Unit quaternion rotating +x onto `direction`."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    x = np.array([1.0, 0.0, 0.0])
    c = float(x @ d)
    if c > 1.0 - 1e-12:
        return geom.IDENTITY_QUAT.copy()
    if c < -1.0 + 1e-12:
        return np.array([0.0, 0.0, 0.0, 1.0])  # pi about z
    axis = np.cross(x, d)
    axis /= np.linalg.norm(axis)
    return geom.quat_from_axis_angle(axis, float(np.arccos(c)))


def _sample_link_gaussians(link: LinkSpec, rng):
    """Capsule-like blobs along the segment, elongated toward its direction."""
    d = np.asarray(link.direction, dtype=float)
    d = d / np.linalg.norm(d)
    start = np.asarray(link.pivot, dtype=float)
    n = link.n_gaussians
    radius = 0.05 * link.length
    u = rng.uniform(0.0, 1.0, size=n)
    lateral = rng.normal(scale=radius, size=(n, 3))
    lateral -= np.outer(lateral @ d, d)  # keep noise orthogonal to the axis
    positions = start + np.outer(u * link.length, d) + lateral
    quat = _direction_quat(d)
    log_scales = np.tile(np.log([0.08 * link.length, radius, radius]), (n, 1))
    sh = np.tile((np.asarray(link.color) - 0.5) / SH_DC, (n, 1))[:, None, :]
    return GaussianSet(positions, np.tile(quat, (n, 1)), log_scales,
                       np.full(n, inverse_sigmoid(0.9)), sh, 0)


def _true_tree(spec: ArticulatedSpec) -> SkeletonTree:
    parents = np.array([max(l.parent, 0) for l in spec.links])
    parents[0] = 0
    joints = np.zeros((len(spec.links), 3))
    for k, link in enumerate(spec.links[1:], start=1):
        joints[k] = link.pivot
    return SkeletonTree(parents, joints, 0)


def _pose_at(spec: ArticulatedSpec, t) -> KinematicPose:
    m = len(spec.links)
    pose = KinematicPose.identity(m)
    for k, link in enumerate(spec.links[1:], start=1):
        axis = np.asarray(link.axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        pose.joint_quats[k] = geom.quat_from_axis_angle(axis, link.angle(t))
    if spec.root_rot_amp:
        axis = np.asarray(spec.root_rot_axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        pose.root_quat = geom.quat_from_axis_angle(
            axis, spec.root_rot_amp * np.sin(2 * np.pi * t))
    pose.root_trans = np.asarray(spec.root_trans_amp) * np.sin(2 * np.pi * t)
    return pose


def generate(spec: ArticulatedSpec) -> GroundTruth:
    """Sample Gaussians per link and script exact rigid motion."""
    rng = np.random.default_rng(spec.seed)
    parts = [_sample_link_gaussians(link, rng) for link in spec.links]
    link_ids = np.concatenate([np.full(len(p.positions), k, dtype=int)
                               for k, p in enumerate(parts)])
    gaussians = GaussianSet(
        np.vstack([p.positions for p in parts]),
        np.vstack([p.quats for p in parts]),
        np.vstack([p.log_scales for p in parts]),
        np.concatenate([p.opacity_raw for p in parts]),
        np.vstack([p.sh for p in parts]), 0)

    tree = _true_tree(spec)
    timestamps = np.linspace(0.0, 1.0, spec.n_timestamps)
    samples = []
    trajectories = np.zeros((spec.n_timestamps, len(gaussians.positions), 3))
    for i, t in enumerate(timestamps):
        sample = forward_kinematics(tree, _pose_at(spec, float(t)))
        sample.t = float(t)
        samples.append(sample)
        R = sample.matrices()[link_ids]
        o = sample.translations[link_ids]
        trajectories[i] = np.einsum("nij,nj->ni", R, gaussians.positions) + o
    motion = MotionSequence(samples)

    truth = GroundTruth(gaussians, link_ids, motion, tree, trajectories,
                        timestamps, spec)
    _self_check(truth)
    return truth


def _self_check(truth: GroundTruth):
    """Rigidity invariant: trajectories equal link transforms applied to mu."""
    for i in range(len(truth.timestamps)):
        sample = truth.motion[i]
        for k in range(len(truth.tree)):
            mask = truth.link_ids == k
            if not mask.any():
                continue
            T = sample.transform(k)
            want = truth.gaussians.positions[mask] @ T.rotation.T + T.translation
            if not np.allclose(truth.trajectories[i][mask], want, atol=1e-10):
                raise AssertionError("generated trajectories violate rigidity")


# ---------------------------------------------------------------------------
# presets

def hinge2(seed=0, n_per_link=24, n_timestamps=20):
    """Two links hinging about z at the shared endpoint."""
    links = [
        LinkSpec(-1, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, n_per_link,
                 (0.85, 0.3, 0.25)),
        LinkSpec(0, (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0, n_per_link,
                 (0.25, 0.45, 0.85), amplitude=0.9, frequency=1.0),
    ]
    return ArticulatedSpec(links, n_timestamps=n_timestamps, seed=seed)


def chain4(seed=0, n_per_link=20, n_timestamps=20):
    """Four links, three joints, varied frequencies and axes."""
    links = [
        LinkSpec(-1, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.8, n_per_link,
                 (0.85, 0.3, 0.25)),
        LinkSpec(0, (0.8, 0.0, 0.0), (1.0, 0.0, 0.0), 0.8, n_per_link,
                 (0.25, 0.45, 0.85), amplitude=0.8, frequency=1.0),
        LinkSpec(1, (1.6, 0.0, 0.0), (1.0, 0.0, 0.0), 0.8, n_per_link,
                 (0.3, 0.75, 0.35), amplitude=0.7, frequency=1.5,
                 phase=0.7, axis=(0.0, 1.0, 0.0)),
        LinkSpec(2, (2.4, 0.0, 0.0), (1.0, 0.0, 0.0), 0.8, n_per_link,
                 (0.9, 0.75, 0.2), amplitude=0.9, frequency=0.5,
                 phase=1.9),
    ]
    return ArticulatedSpec(links, n_timestamps=n_timestamps, seed=seed)


def humanoid8(seed=0, n_per_link=18, n_timestamps=20):
    """Torso, head, two two-segment arms, two legs, eight links total."""
    up, fwd = (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)
    links = [
        LinkSpec(-1, (0.0, 0.0, 0.0), up, 1.0, n_per_link, (0.8, 0.7, 0.5)),
        LinkSpec(0, (0.0, 1.0, 0.0), up, 0.35, n_per_link, (0.9, 0.6, 0.5),
                 amplitude=0.6, frequency=1.0, axis=(0, 0, 1)),
        LinkSpec(0, (0.0, 0.9, 0.12), (0.0, -0.2, 1.0), 0.6, n_per_link,
                 (0.3, 0.5, 0.9), amplitude=0.8, frequency=1.5,
                 phase=0.5, axis=fwd),
        LinkSpec(2, (0.0, 0.78, 0.71), (0.0, -0.8, 0.6), 0.5, n_per_link,
                 (0.3, 0.7, 0.9), amplitude=0.7, frequency=0.5,
                 phase=1.2, axis=fwd),
        LinkSpec(0, (0.0, 0.9, -0.12), (0.0, -0.2, -1.0), 0.6, n_per_link,
                 (0.8, 0.4, 0.3), amplitude=0.8, frequency=1.0,
                 phase=2.1, axis=fwd),
        LinkSpec(4, (0.0, 0.78, -0.71), (0.0, -0.8, -0.6), 0.5, n_per_link,
                 (0.8, 0.5, 0.2), amplitude=0.7, frequency=2.0,
                 phase=0.2, axis=fwd),
        LinkSpec(0, (0.0, 0.0, 0.2), (0.1, -1.0, 0.1), 0.8, n_per_link,
                 (0.4, 0.8, 0.4), amplitude=0.7, frequency=0.5,
                 phase=2.8, axis=(0, 0, 1)),
        LinkSpec(0, (0.0, 0.0, -0.2), (0.1, -1.0, -0.1), 0.8, n_per_link,
                 (0.5, 0.8, 0.3), amplitude=0.7, frequency=1.5,
                 phase=4.0, axis=(0, 0, 1)),
    ]
    return ArticulatedSpec(links, n_timestamps=n_timestamps, seed=seed)


def random_tree(n_parts, seed=0, n_per_link=20, n_timestamps=20):
    """Random tree topology with varied joint axes, frequencies, and phases."""
    rng = np.random.default_rng(seed)
    links = [LinkSpec(-1, (0.0, 0.0, 0.0),
                      tuple(_random_unit(rng)), 1.0, n_per_link,
                      tuple(rng.uniform(0.2, 0.9, 3)))]
    tips = {0: (np.zeros(3), np.asarray(links[0].direction, dtype=float))}
    freqs = [0.5, 1.0, 1.5, 2.0]
    for k in range(1, n_parts):
        parent = int(rng.integers(0, k))
        p_start, p_dir = tips[parent]
        p_len = links[parent].length
        u = rng.uniform(0.5, 1.0)
        pivot = p_start + u * p_len * p_dir
        direction = _random_unit(rng)
        # keep child segments from doubling back along the parent
        while abs(direction @ p_dir) > 0.9:
            direction = _random_unit(rng)
        length = rng.uniform(0.6, 1.0)
        axis = _random_unit(rng)
        while abs(axis @ direction) > 0.8:
            axis = _random_unit(rng)
        links.append(LinkSpec(parent, tuple(pivot), tuple(direction), length,
                              n_per_link, tuple(rng.uniform(0.2, 0.9, 3)),
                              amplitude=rng.uniform(0.6, 0.9),
                              frequency=freqs[(k - 1) % len(freqs)],
                              phase=rng.uniform(0, 2 * np.pi),
                              axis=tuple(axis)))
        tips[k] = (pivot, direction)
    return ArticulatedSpec(links, n_timestamps=n_timestamps, seed=seed)


PRESETS = {"hinge2": hinge2, "chain4": chain4, "humanoid8": humanoid8}


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# evaluation

def eval_skeleton(tree: SkeletonTree, weights: SkinningWeights,
                  truth: GroundTruth, sp_positions=None):
    """Score a discovered skeleton against the generator's ground truth.

    Superpoints get the link label holding the most of their skinning-weight
    mass. Topology matches when the predicted edge set, collapsed over shared
    labels, equals the true link tree's edge set.
    """
    m = len(tree)
    if m == 0:
        raise ValueError("empty prediction")
    w = weights.weights()
    dominant = weights.neighbors[np.arange(len(w)), np.argmax(w, axis=1)]

    n_links = len(truth.tree)
    mass = np.zeros((m, n_links))
    np.add.at(mass, (weights.neighbors.ravel(),
                     np.repeat(truth.link_ids, weights.k)), w.ravel())
    labels = np.where(mass.sum(axis=1) > 0, np.argmax(mass, axis=1), -1)

    part_iou = float(np.mean(labels[dominant] == truth.link_ids))

    pred_edges = set()
    edge_joints = {}
    for child, parent in tree.edges:
        a, b = labels[child], labels[parent]
        if a < 0 or b < 0 or a == b:
            continue
        key = (min(a, b), max(a, b))
        pred_edges.add(key)
        edge_joints.setdefault(key, []).append(tree.joints[child])

    true_edges = set()
    true_joints = {}
    true_axes = {}
    for child, parent in truth.tree.edges:
        key = (min(child, parent), max(child, parent))
        true_edges.add(key)
        true_joints[key] = truth.tree.joints[child]
        axis = np.asarray(truth.spec.links[child].axis, dtype=float)
        true_axes[key] = axis / np.linalg.norm(axis)

    topology_match = (pred_edges == true_edges
                      and set(labels[labels >= 0]) == set(range(len(truth.tree))))

    # A hinge pivot only influences motion through its component orthogonal
    # to the rotation axis (shifting it along the axis leaves every rigid
    # transform unchanged), so joint error is measured against the true
    # joint's axis line rather than the point itself.
    matched = pred_edges & true_edges
    if matched:
        def _axis_dist_sq(j, key):
            d = j - true_joints[key]
            d = d - (d @ true_axes[key]) * true_axes[key]
            return np.sum(d ** 2)

        sq = [np.mean([_axis_dist_sq(j, key) for j in edge_joints[key]])
              for key in sorted(matched)]
        joint_rmse = float(np.sqrt(np.mean(sq)))
    else:
        joint_rmse = float("inf")

    return {"topology_match": bool(topology_match),
            "joint_rmse": joint_rmse,
            "part_iou": part_iou,
            "labels": labels.tolist()}


# ---------------------------------------------------------------------------
# serialization

def save_ground_truth(truth: GroundTruth, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_ply(truth.gaussians, os.path.join(out_dir, "canonical.ply"))
    doc = {
        "version": 1,
        "spec": truth.spec.to_dict(),
        "timestamps": truth.timestamps.tolist(),
        "link_ids": truth.link_ids.tolist(),
        "skeleton": truth.tree.to_dict(),
        "motion": [{
            "t": s.t,
            "quats": s.quats.tolist(),
            "translations": s.translations.tolist(),
        } for s in truth.motion.samples],
        "trajectories": truth.trajectories.tolist(),
    }
    with open(os.path.join(out_dir, "ground_truth.json"), "w") as fh:
        json.dump(doc, fh)


def load_ground_truth(out_dir) -> GroundTruth:
    from .superpoints import MotionSample
    gaussians = load_ply(os.path.join(out_dir, "canonical.ply"))
    with open(os.path.join(out_dir, "ground_truth.json")) as fh:
        doc = json.load(fh)
    spec = ArticulatedSpec.from_dict(doc["spec"])
    samples = [MotionSample(s["t"], np.array(s["quats"]),
                            np.array(s["translations"]))
               for s in doc["motion"]]
    return GroundTruth(gaussians,
                       np.array(doc["link_ids"], dtype=int),
                       MotionSequence(samples),
                       SkeletonTree.from_dict(doc["skeleton"]),
                       np.array(doc["trajectories"]),
                       np.array(doc["timestamps"]),
                       spec)
