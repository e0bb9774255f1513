"""Training objectives and regularizers.

The photometric term is evaluation-only; everything the optimizer touches is
supervised through trajectories, so each differentiable loss here returns the
scalar together with hand-derived gradients for the quantities it trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffops
from .render import ssim
from .superpoints import (DeformField, MotionSample, SkinningWeights,
                          knn_assign, lbs_positions, lbs_positions_backward)

_NORM_EPS = 1e-12


@dataclass
class LossWeights:
    fit: float = 1.0        # trajectory (or photometric) term
    joint: float = 1.0      # pairwise joint-distance term
    arap: float = 1e-3      # local rigidity
    smooth: float = 0.1     # skinning-weight smoothness over Gaussian KNN
    sparse: float = 0.1     # skinning-weight entropy
    dssim: float = 0.2      # SSIM mix inside the photometric term
    pos: float = 1.0        # transform-agreement weight in the discovery loss
    probe: float = 0.1      # probe-point weight in the discovery loss

    def __post_init__(self):
        for name in ("fit", "joint", "arap", "smooth", "sparse", "dssim",
                     "pos", "probe"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def l_rgb(rendered, gt, mix=0.2):
    """(1-mix) L1 + mix (1 - SSIM). Metric only; not backpropagated."""
    rendered = np.asarray(rendered, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if rendered.shape != gt.shape:
        raise ValueError("image dimensions differ")
    l1 = float(np.abs(rendered - gt).mean())
    if mix == 0.0:
        return l1
    return (1.0 - mix) * l1 + mix * (1.0 - ssim(rendered, gt))


@dataclass
class TrajectoryGrads:
    field_params: list        # grads for DeformField mlp parameters
    logits: np.ndarray        # (N, K)
    sp_positions: np.ndarray  # (M, 3)
    mu: np.ndarray            # (N, 3) canonical Gaussian centers
    mu_t: np.ndarray          # (N, 3) deformed centers (for control stats)


def l_traj(field: DeformField, sp_positions, weights: SkinningWeights, mu,
           t, gt_positions, gt_sample: MotionSample | None = None):
    """Trajectory supervision at one timestamp.

    Mean squared error between deformed Gaussian centers and their ground
    truth, plus (when superpoint ground truth is supplied) the mean transform
    error of the superpoints themselves. Returns (loss, TrajectoryGrads).
    """
    gt_positions = np.asarray(gt_positions, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if gt_positions.shape != mu.shape:
        raise ValueError("trajectory supervision does not match the Gaussians")
    n = len(mu)
    quats, trans, field_cache = field.evaluate_cached(sp_positions, t)
    sample = MotionSample(t, quats, trans)
    soft = weights.weights()
    mu_t, lbs_cache = lbs_positions(sample, soft, weights.neighbors, mu)

    diff = mu_t - gt_positions
    loss = float((diff ** 2).sum() / n)
    grad_mu_t = 2.0 * diff / n

    grad_quats, grad_trans, grad_w, grad_mu = lbs_positions_backward(
        sample, soft, weights.neighbors, mu, lbs_cache, grad_mu_t)

    if gt_sample is not None:
        m = len(quats)
        od = trans - gt_sample.translations
        ang2 = diffops.geodesic_angle_sq(quats, gt_sample.quats)
        loss += float(((od ** 2).sum(axis=1) + ang2).mean())
        grad_trans = grad_trans + 2.0 * od / m
        gq, _ = diffops.geodesic_angle_sq_backward(
            quats, gt_sample.quats, np.full(m, 1.0 / m))
        grad_quats = grad_quats + gq

    grad_logits = diffops.softmax_backward(soft, grad_w)
    param_grads, grad_sp = field.backward(field_cache, grad_quats, grad_trans)
    return loss, TrajectoryGrads(param_grads, grad_logits, grad_sp, grad_mu,
                                 mu_t)


def l_joint(pair_distances, m, edges):
    """Mean joint-cost over candidate pairs plus mean over skeleton edges."""
    if m < 2:
        raise ValueError("need at least 2 superpoints")
    total = sum(pair_distances.values())
    term1 = total / (m * m)
    term2 = 0.0
    if edges:
        for child, parent in edges:
            key = (min(child, parent), max(child, parent))
            if key not in pair_distances:
                raise KeyError(f"edge {key} missing from the candidate table")
            term2 += pair_distances[key]
        term2 /= (m - 1)
    return term1 + term2


def neighbor_edges(positions, k):
    """Directed K-NN edge arrays (src, dst) excluding self-loops."""
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    nb = knn_assign(positions, positions, min(k, n - 1) + 1)
    src = np.repeat(np.arange(n), nb.shape[1])
    dst = nb.ravel()
    keep = src != dst
    return src[keep], dst[keep]


def l_arap(sample: MotionSample, sp_positions, k_prime=5, edges=None):
    """Neighboring superpoints should move near-rigidly together.

    Sum over directed K'-NN edges of squared rotation angle plus squared
    translation gap. Returns (loss, grad_quats, grad_trans). Pass
    ``edges=(src, dst)`` to reuse a precomputed neighbor graph.
    """
    sp_positions = np.asarray(sp_positions, dtype=float)
    m = len(sp_positions)
    if edges is None:
        edges = neighbor_edges(sp_positions, k_prime)
    src, dst = edges
    qa, qb = sample.quats[src], sample.quats[dst]
    oa, ob = sample.translations[src], sample.translations[dst]
    ang2 = diffops.geodesic_angle_sq(qa, qb)
    od = oa - ob
    loss = float(ang2.sum() + (od ** 2).sum())

    grad_quats = np.zeros((m, 4))
    grad_trans = np.zeros((m, 3))
    ga, gb = diffops.geodesic_angle_sq_backward(qa, qb, np.ones(len(src)))
    np.add.at(grad_quats, src, ga)
    np.add.at(grad_quats, dst, gb)
    np.add.at(grad_trans, src, 2.0 * od)
    np.add.at(grad_trans, dst, -2.0 * od)
    return loss, grad_quats, grad_trans


def l_smooth(weights: SkinningWeights, gaussian_positions, m, k_gauss=5,
             edges=None):
    """L1 divergence of densified weight vectors across Gaussian neighbors.

    Returns (loss, grad_logits) with the sign subgradient pushed back
    through the softmax. Pass ``edges=(src, dst)`` to reuse a precomputed
    Gaussian neighbor graph.
    """
    gp = np.asarray(gaussian_positions, dtype=float)
    n = len(gp)
    if min(k_gauss, n - 1) < 1:
        return 0.0, np.zeros_like(weights.logits)
    if edges is None:
        edges = neighbor_edges(gp, k_gauss)
    src, dst = edges
    dense = weights.dense(m)
    d = dense[src] - dense[dst]
    loss = float(np.abs(d).sum())
    s = np.sign(d)
    grad_dense = np.zeros_like(dense)
    np.add.at(grad_dense, src, s)
    np.add.at(grad_dense, dst, -s)
    grad_entries = np.take_along_axis(grad_dense, weights.neighbors, axis=1)
    grad_logits = diffops.softmax_backward(weights.weights(), grad_entries)
    return loss, grad_logits


def l_sparse(weights: SkinningWeights):
    """Binary entropy over the stored weights; pushes them toward 0 or 1.

    Returns (loss, grad_logits).
    """
    w = np.clip(weights.weights(), 1e-12, 1.0 - 1e-12)
    loss = float(-(w * np.log(w) + (1.0 - w) * np.log(1.0 - w)).sum())
    grad_w = np.log((1.0 - w) / w)
    grad_logits = diffops.softmax_backward(weights.weights(), grad_w)
    return loss, grad_logits


def make_probes(sp_positions, seed=0):
    """One fixed offset per superpoint, drawn at bounding-box scale."""
    sp_positions = np.asarray(sp_positions, dtype=float)
    span = sp_positions.max(axis=0) - sp_positions.min(axis=0)
    diag = float(np.linalg.norm(span))
    if diag == 0.0:
        diag = 1.0
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, size=sp_positions.shape) * diag


def l_discovery(pred_quats, pred_trans, cached_quats, cached_trans, probes,
                lambda_pos=1.0, lambda_probe=0.1):
    """Agreement between kinematic-predicted and cached superpoint motion.

    Per superpoint: lambda_pos (squared translation gap + squared rotation
    angle) + lambda_probe * distance between a probe point pushed through
    both transforms; averaged over superpoints. Returns
    (loss, grad_pred_quats, grad_pred_trans).
    """
    pred_quats = np.asarray(pred_quats, dtype=float)
    pred_trans = np.asarray(pred_trans, dtype=float)
    if pred_quats.shape != cached_quats.shape:
        raise ValueError("kinematic prediction does not match cached motion")
    m = len(pred_quats)
    od = pred_trans - cached_trans
    ang2 = diffops.geodesic_angle_sq(pred_quats, cached_quats)

    probe_cached = diffops.rotate(cached_quats, probes) + cached_trans
    probe_pred = diffops.rotate(pred_quats, probes) + pred_trans
    pv = probe_cached - probe_pred
    pn = np.linalg.norm(pv, axis=1)

    loss = float((lambda_pos * ((od ** 2).sum(axis=1) + ang2)
                  + lambda_probe * pn).mean())

    grad_trans = lambda_pos * 2.0 * od / m
    gq, _ = diffops.geodesic_angle_sq_backward(
        pred_quats, cached_quats, np.full(m, lambda_pos / m))
    grad_quats = gq
    # probe term: d||v||/d pred = -v/||v||
    unit = pv / np.maximum(pn, _NORM_EPS)[:, None]
    grad_probe_pred = -(lambda_probe / m) * unit
    gq_p, _ = diffops.rotate_backward(pred_quats, probes, grad_probe_pred)
    grad_quats = grad_quats + gq_p
    grad_trans = grad_trans + grad_probe_pred
    return loss, grad_quats, grad_trans


def total_dynamic_loss(fit, joint, arap, smooth, sparse,
                       weights: LossWeights):
    return (weights.fit * fit + weights.joint * joint + weights.arap * arap
            + weights.smooth * smooth + weights.sparse * sparse)
