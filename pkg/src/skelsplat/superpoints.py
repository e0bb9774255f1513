"""Superpoints, skinning weights, the deformation field, and the LBS warp.

Each Gaussian is bound to its K nearest superpoints; per-timestamp rigid
transforms of the superpoints are blended with softmax skinning weights to
deform Gaussian centers and rotations from canonical to observation space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffops, nn
from .gaussians import GaussianSet
from .geom import RigidTransform, quat_to_matrix

K_NEIGHBORS = 5
L_POS = 10
L_TIME = 6


@dataclass
class SuperpointSet:
    positions: np.ndarray  # (M, 3), learnable

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if len(self.positions) < 2:
            raise ValueError("need at least 2 superpoints")

    def __len__(self):
        return len(self.positions)


@dataclass
class SkinningWeights:
    neighbors: np.ndarray  # (N, K) indices into the superpoint set
    logits: np.ndarray     # (N, K), learnable

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=int)
        self.logits = np.asarray(self.logits, dtype=float)
        if self.neighbors.shape != self.logits.shape:
            raise ValueError("neighbor/logit shape mismatch")

    @property
    def k(self):
        return self.neighbors.shape[1]

    def weights(self):
        return diffops.softmax(self.logits)

    def dense(self, m):
        """(N, M) weight matrix with zeros outside each neighbor list."""
        n = len(self.neighbors)
        out = np.zeros((n, m))
        np.put_along_axis(out, self.neighbors, self.weights(), axis=1)
        return out


@dataclass
class MotionSample:
    """Per-superpoint rigid transforms at one timestamp."""

    t: float
    quats: np.ndarray         # (M, 4) unit
    translations: np.ndarray  # (M, 3)

    def transform(self, j) -> RigidTransform:
        return RigidTransform(quat_to_matrix(self.quats[j]), self.translations[j])

    def matrices(self):
        return diffops.quat_to_matrix_batch(self.quats)

    @staticmethod
    def identity(t, m):
        q = np.zeros((m, 4))
        q[:, 0] = 1.0
        return MotionSample(t, q, np.zeros((m, 3)))


@dataclass
class MotionSequence:
    samples: list = field(default_factory=list)

    def __post_init__(self):
        ts = self.timestamps
        if len(ts) and (np.diff(ts) <= 0).any():
            raise ValueError("timestamps must be strictly increasing")
        if len(ts) and (ts[0] < 0 or ts[-1] > 1):
            raise ValueError("timestamps must lie in [0, 1]")

    @property
    def timestamps(self):
        return np.array([s.t for s in self.samples])

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def farthest_point_sampling(points, m, seed=0):
    """Greedy max-min subset of size m; the start index is drawn from seed."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if m > n:
        raise ValueError(f"cannot sample {m} from {n} points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    chosen = [first]
    dist = np.linalg.norm(points - points[first], axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def knn_assign(gaussian_positions, superpoint_positions, k=K_NEIGHBORS):
    """K nearest superpoints per Gaussian; ties broken by lower index."""
    gp = np.asarray(gaussian_positions, dtype=float)
    sp = np.asarray(superpoint_positions, dtype=float)
    if k > len(sp):
        raise ValueError("K exceeds superpoint count")
    d2 = ((gp[:, None, :] - sp[None, :, :]) ** 2).sum(axis=2)
    # stable argsort on distance keeps index order on ties
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


class DeformField:
    """MLP mapping (gamma(p), gamma(t)) to a 6-DoF superpoint transform.

    The 7-value head is a quaternion delta added to identity plus a
    translation; the output layer is zero-initialized so the field is the
    identity transform everywhere at step 0.
    """

    HEAD = 7

    def __init__(self, mlp: nn.Mlp):
        expected = nn.encoding_dim(3, L_POS) + nn.encoding_dim(1, L_TIME)
        if mlp.in_dim != expected or mlp.out_dim != self.HEAD:
            raise ValueError("network shape does not match the deform-field head")
        self.mlp = mlp

    @classmethod
    def create(cls, hidden=256, depth=8, rng=None):
        in_dim = nn.encoding_dim(3, L_POS) + nn.encoding_dim(1, L_TIME)
        return cls(nn.Mlp.create(in_dim, cls.HEAD, hidden=hidden, depth=depth,
                                 rng=rng, zero_init_output=True))

    def _encode(self, positions, t):
        positions = np.atleast_2d(positions)
        enc_p = nn.positional_encoding(positions, L_POS)
        enc_t = nn.positional_encoding(np.array([[t]]), L_TIME)
        return np.concatenate(
            [enc_p, np.broadcast_to(enc_t, (len(positions), enc_t.shape[1]))], axis=1)

    def evaluate(self, positions, t) -> MotionSample:
        quats, trans, _ = self.evaluate_cached(positions, t)
        return MotionSample(t, quats, trans)

    def evaluate_cached(self, positions, t):
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        x = self._encode(positions, t)
        out, mlp_cache = self.mlp.forward_cached(x)
        raw = out[:, :4].copy()
        raw[:, 0] += 1.0
        quats = diffops.quat_normalize(raw)
        trans = out[:, 4:]
        cache = (positions, mlp_cache, raw)
        return quats, trans, cache

    def backward(self, cache, grad_quats, grad_trans):
        """Returns (mlp parameter grads, grads w.r.t. the query positions)."""
        positions, mlp_cache, raw = cache
        grad_out = np.zeros((len(positions), self.HEAD))
        grad_out[:, :4] = diffops.quat_normalize_backward(raw, grad_quats)
        grad_out[:, 4:] = grad_trans
        param_grads, grad_x = self.mlp.backward(mlp_cache, grad_out)
        enc_dim = nn.encoding_dim(3, L_POS)
        grad_pos = nn.positional_encoding_backward(positions, L_POS,
                                                   grad_x[:, :enc_dim])
        return param_grads, grad_pos

    def evaluate_sequence(self, positions, timestamps) -> MotionSequence:
        return MotionSequence([self.evaluate(positions, float(t))
                               for t in timestamps])

    def evaluate_batch(self, positions, timestamps):
        """Evaluate the field at every (timestamp, superpoint) pair at once.

        Returns quats (T, M, 4), translations (T, M, 3), and a cache for
        ``backward_batch``.  One MLP pass over T*M rows, so per-call overhead
        does not scale with the number of timestamps.
        """
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        ts = np.asarray(timestamps, dtype=float).reshape(-1)
        n_t, m = len(ts), len(positions)
        enc_p = nn.positional_encoding(positions, L_POS)          # (M, Dp)
        enc_t = nn.positional_encoding(ts[:, None], L_TIME)       # (T, Dt)
        x = np.concatenate([np.tile(enc_p, (n_t, 1)),
                            np.repeat(enc_t, m, axis=0)], axis=1)
        out, mlp_cache = self.mlp.forward_cached(x)
        raw = out[:, :4].copy()
        raw[:, 0] += 1.0
        quats = diffops.quat_normalize(raw).reshape(n_t, m, 4)
        trans = out[:, 4:].reshape(n_t, m, 3)
        cache = (positions, n_t, m, mlp_cache, raw)
        return quats, trans, cache

    def backward_batch(self, cache, grad_quats, grad_trans):
        """Returns (mlp parameter grads, grads on positions summed over time)."""
        positions, n_t, m, mlp_cache, raw = cache
        grad_out = np.zeros((n_t * m, self.HEAD))
        grad_out[:, :4] = diffops.quat_normalize_backward(
            raw, grad_quats.reshape(n_t * m, 4))
        grad_out[:, 4:] = grad_trans.reshape(n_t * m, 3)
        param_grads, grad_x = self.mlp.backward(mlp_cache, grad_out)
        enc_dim = nn.encoding_dim(3, L_POS)
        tiled = np.tile(positions, (n_t, 1))
        grad_pos_rows = nn.positional_encoding_backward(tiled, L_POS,
                                                        grad_x[:, :enc_dim])
        grad_pos = grad_pos_rows.reshape(n_t, m, 3).sum(axis=0)
        return param_grads, grad_pos


def _align_signs(q_nk, weights):
    """Flip each neighbor quaternion into the dominant neighbor's hemisphere."""
    ref = np.take_along_axis(
        q_nk, np.argmax(weights, axis=1)[:, None, None].repeat(4, axis=2), axis=1)
    sign = np.sign(np.sum(q_nk * ref, axis=2, keepdims=True))
    sign[sign == 0] = 1.0
    return sign


def lbs_positions(sample: MotionSample, weights_soft, neighbors, mu):
    """Blend superpoint transforms into Gaussian centers; returns (mu_t, cache)."""
    q_nk = sample.quats[neighbors]            # (N, K, 4)
    o_nk = sample.translations[neighbors]     # (N, K, 3)
    mu_b = np.broadcast_to(mu[:, None, :], q_nk.shape[:2] + (3,))
    rotated = diffops.rotate(q_nk, mu_b)
    contrib = rotated + o_nk
    mu_t = (weights_soft[:, :, None] * contrib).sum(axis=1)
    return mu_t, (q_nk, o_nk, mu_b, contrib)


def lbs_positions_backward(sample, weights_soft, neighbors, mu, cache, grad_mu_t):
    """Distribute grad on deformed centers to quats, trans, weights, centers."""
    q_nk, o_nk, mu_b, contrib = cache
    m = len(sample.quats)
    grad_w = np.sum(grad_mu_t[:, None, :] * contrib, axis=2)
    grad_contrib = weights_soft[:, :, None] * grad_mu_t[:, None, :]
    grad_q_nk, grad_mu_b = diffops.rotate_backward(q_nk, mu_b, grad_contrib)
    grad_quats = np.zeros((m, 4))
    grad_trans = np.zeros((m, 3))
    np.add.at(grad_quats, neighbors.ravel(), grad_q_nk.reshape(-1, 4))
    np.add.at(grad_trans, neighbors.ravel(), grad_contrib.reshape(-1, 3))
    grad_mu = grad_mu_b.sum(axis=1)
    return grad_quats, grad_trans, grad_w, grad_mu


def lbs_positions_batch(quats, trans, weights_soft, neighbors, mu):
    """Blend superpoint transforms for all timestamps at once.

    quats (T, M, 4) and trans (T, M, 3) come from
    ``DeformField.evaluate_batch``; returns (mu_t (T, N, 3), cache).
    """
    q_nk = quats[:, neighbors]                 # (T, N, K, 4)
    o_nk = trans[:, neighbors]                 # (T, N, K, 3)
    mu_b = np.broadcast_to(mu[None, :, None, :], q_nk.shape[:-1] + (3,))
    rotated = diffops.rotate(q_nk, mu_b)
    contrib = rotated + o_nk
    mu_t = (weights_soft[None, :, :, None] * contrib).sum(axis=2)
    return mu_t, (q_nk, mu_b, contrib)


def lbs_positions_batch_backward(quats, weights_soft, neighbors, mu,
                                 cache, grad_mu_t):
    """Batched counterpart of ``lbs_positions_backward``.

    Weight and center grads are summed over timestamps; quat/translation
    grads keep the (T, M, ...) layout.
    """
    q_nk, mu_b, contrib = cache
    n_t, m = quats.shape[:2]
    grad_w = np.sum(grad_mu_t[:, :, None, :] * contrib, axis=(0, 3))
    grad_contrib = weights_soft[None, :, :, None] * grad_mu_t[:, :, None, :]
    grad_q_nk, grad_mu_b = diffops.rotate_backward(q_nk, mu_b, grad_contrib)
    grad_quats = np.zeros((n_t, m, 4))
    grad_trans = np.zeros((n_t, m, 3))
    t_idx = np.arange(n_t)[:, None, None]
    np.add.at(grad_quats, (t_idx, neighbors[None]), grad_q_nk)
    np.add.at(grad_trans, (t_idx, neighbors[None]), grad_contrib)
    grad_mu = grad_mu_b.sum(axis=(0, 2))
    return grad_quats, grad_trans, grad_w, grad_mu


def lbs_deform(g_set: GaussianSet, sample: MotionSample,
               weights: SkinningWeights) -> GaussianSet:
    """Warp centers and rotations to observation space; s, opacity, sh unchanged."""
    if len(g_set) != len(weights.neighbors):
        raise ValueError("Gaussian count does not match skinning weights")
    w = weights.weights()
    mu_t, _ = lbs_positions(sample, w, weights.neighbors, g_set.positions)
    q_nk = sample.quats[weights.neighbors]
    sign = _align_signs(q_nk, w)
    blended = np.sum((w[:, :, None] * sign) * q_nk, axis=1)
    norms = np.linalg.norm(blended, axis=1)
    if (norms < 1e-8).any():
        raise ValueError("degenerate blended quaternion (antipodal neighbors)")
    blended = blended / norms[:, None]
    q_t = diffops.quat_mul(blended, g_set.quats)
    q_t = q_t / np.linalg.norm(q_t, axis=1, keepdims=True)
    return GaussianSet(mu_t, q_t, g_set.log_scales, g_set.opacity_raw,
                       g_set.sh, g_set.sh_degree)
