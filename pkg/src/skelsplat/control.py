"""Adaptive superpoint control: prune, densify, and merge.

Runs between optimization steps of the dynamic stage. Each operation returns
an updated (superpoints, weights) pair plus a report of events suitable for a
line-delimited run log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geom
from .skeleton import _UnionFind, candidate_index_pairs
from .superpoints import (K_NEIGHBORS, MotionSequence, SkinningWeights,
                          SuperpointSet, knn_assign)

MAX_SUPERPOINTS = 2048


@dataclass
class ControlThresholds:
    prune: float = 0.001
    grad: float = 0.0002
    merge: float = 0.0005
    # impact threshold for cloning; None means 4x the mean impact at the
    # time of the event (the source material gives no value for this one)
    clone: float | None = None
    max_superpoints: int = MAX_SUPERPOINTS

    def __post_init__(self):
        if min(self.prune, self.grad, self.merge) < 0:
            raise ValueError("thresholds must be non-negative")
        if self.clone is not None and self.clone < 0:
            raise ValueError("thresholds must be non-negative")

    def clone_threshold(self, impacts):
        if self.clone is not None:
            return self.clone
        return 4.0 * float(np.mean(impacts))


@dataclass
class ControlEvent:
    event: str   # "prune" | "clone" | "merge"
    index: int
    metric: float
    threshold: float

    def line(self):
        return (f"control\t{self.event}\t{self.index}\t"
                f"{self.metric:.6g}\t{self.threshold:.6g}")


def impacts(weights: SkinningWeights, m):
    """Overall impact W_j = sum of skinning weight mass landing on each j."""
    out = np.zeros(m)
    np.add.at(out, weights.neighbors, weights.weights())
    return out


def impact(weights: SkinningWeights, j):
    w = weights.weights()
    return float(w[weights.neighbors == j].sum())


def weighted_grad_norm(weights: SkinningWeights, position_grads, m):
    """Impact-normalized squared gradient norm per superpoint."""
    g2 = (np.asarray(position_grads, dtype=float) ** 2).sum(axis=1)
    w = weights.weights()
    num = np.zeros(m)
    den = np.zeros(m)
    np.add.at(num, weights.neighbors, w * g2[:, None])
    np.add.at(den, weights.neighbors, w)
    out = np.zeros(m)
    live = den > 0
    out[live] = num[live] / den[live]
    return out


def _rebuild_weights(weights, gaussian_positions, new_positions, index_map):
    """Fresh KNN over the new superpoints; logits carried over where a
    Gaussian keeps a (mapped) neighbor, zero for new entries."""
    k = min(weights.k, len(new_positions))
    neighbors = knn_assign(gaussian_positions, new_positions, k=k)
    logits = np.zeros_like(neighbors, dtype=float)
    old_mapped = index_map[weights.neighbors]  # (N, K_old), -1 where removed
    for i in range(len(neighbors)):
        for c in range(k):
            hits = np.nonzero(old_mapped[i] == neighbors[i, c])[0]
            if len(hits):
                logits[i, c] = weights.logits[i, hits[0]]
    return SkinningWeights(neighbors, logits)


def prune(gaussian_positions, superpoints: SuperpointSet,
          weights: SkinningWeights, thresholds: ControlThresholds):
    """Drop superpoints whose impact falls below the prune threshold."""
    m = len(superpoints)
    W = impacts(weights, m)
    doomed = np.nonzero(W < thresholds.prune)[0]
    if len(doomed) > m - 2:  # never prune below 2: drop only the weakest
        order = doomed[np.argsort(W[doomed], kind="stable")]
        doomed = np.sort(order[: max(m - 2, 0)])
    if len(doomed) == 0:
        return superpoints, weights, []
    keep = np.setdiff1d(np.arange(m), doomed)
    index_map = np.full(m, -1, dtype=int)
    index_map[keep] = np.arange(len(keep))
    new_sp = SuperpointSet(superpoints.positions[keep])
    new_w = _rebuild_weights(weights, gaussian_positions, new_sp.positions,
                             index_map)
    report = [ControlEvent("prune", int(j), float(W[j]), thresholds.prune)
              for j in doomed]
    return new_sp, new_w, report


def densify(gaussian_positions, superpoints: SuperpointSet,
            weights: SkinningWeights, thresholds: ControlThresholds,
            position_grads=None, rng=None):
    """Clone overloaded superpoints toward their weighted Gaussian mass."""
    gaussian_positions = np.asarray(gaussian_positions, dtype=float)
    m = len(superpoints)
    W = impacts(weights, m)
    clone_thr = thresholds.clone_threshold(W)
    hot = W > clone_thr
    metric = W.copy()
    threshold_used = np.full(m, clone_thr)
    if position_grads is not None:
        g = weighted_grad_norm(weights, position_grads, m)
        grad_hot = g > thresholds.grad
        metric = np.where(hot, W, g)
        threshold_used = np.where(hot, clone_thr, thresholds.grad)
        hot = hot | grad_hot
    idx = np.nonzero(hot)[0]
    room = thresholds.max_superpoints - m
    idx = idx[:max(room, 0)]
    if len(idx) == 0:
        return superpoints, weights, []
    if rng is None:
        rng = np.random.default_rng(0)
    span = gaussian_positions.max(axis=0) - gaussian_positions.min(axis=0)
    diag = float(np.linalg.norm(span))
    w_dense = weights.dense(m)
    clones = []
    for j in idx:
        wj = w_dense[:, j]
        total = wj.sum()
        if total > 0:
            centroid = (wj[:, None] * gaussian_positions).sum(axis=0) / total
        else:
            centroid = superpoints.positions[j]
        jitter = rng.normal(size=3)
        jitter *= 1e-4 * diag / max(np.linalg.norm(jitter), 1e-12)
        clones.append(centroid + jitter)
    new_positions = np.vstack([superpoints.positions, clones])
    index_map = np.arange(m)
    new_sp = SuperpointSet(new_positions)
    new_w = _rebuild_weights(weights, gaussian_positions, new_positions,
                             index_map)
    report = [ControlEvent("clone", int(j), float(metric[j]),
                           float(threshold_used[j])) for j in idx]
    return new_sp, new_w, report


def merge_distance(a, b, motion: MotionSequence):
    """Mean twist magnitude of the relative transform of a w.r.t. b."""
    total = 0.0
    for sample in motion.samples:
        rel = geom.compose(geom.inverse(sample.transform(b)),
                           sample.transform(a))
        total += geom.se3_log(rel).norm()
    return total / len(motion)


def merge(gaussian_positions, superpoints: SuperpointSet,
          weights: SkinningWeights, motion: MotionSequence,
          thresholds: ControlThresholds):
    """Collapse groups of superpoints that move rigidly together."""
    m = len(superpoints)
    if len(motion) == 0 or motion[0].quats.shape[0] != m:
        raise ValueError("motion does not cover the superpoint set")
    uf = _UnionFind(m)
    report = []
    groups = m
    for a, b in candidate_index_pairs(superpoints.positions):
        if groups <= 2:  # never merge below 2 superpoints
            break
        d = merge_distance(a, b, motion)
        if d < thresholds.merge and uf.union(a, b):
            groups -= 1
            report.append(ControlEvent("merge", int(a), float(d),
                                       thresholds.merge))
    if not report:
        return superpoints, weights, []
    roots = np.array([uf.find(j) for j in range(m)])
    group_ids = np.unique(roots)
    W = impacts(weights, m)
    new_positions = np.zeros((len(group_ids), 3))
    index_map = np.zeros(m, dtype=int)
    for g, gid in enumerate(group_ids):
        members = np.nonzero(roots == gid)[0]
        index_map[members] = g
        wj = W[members]
        if wj.sum() > 0:
            new_positions[g] = (wj[:, None] *
                                superpoints.positions[members]).sum(0) / wj.sum()
        else:
            new_positions[g] = superpoints.positions[members].mean(axis=0)
    new_sp = SuperpointSet(new_positions)
    new_w = _rebuild_weights(weights, gaussian_positions, new_positions,
                             index_map)
    return new_sp, new_w, report
