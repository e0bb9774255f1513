"""Batched differentiable kernels used by the training losses.

Each op comes as a forward function plus a matching *_backward that maps an
upstream gradient to input gradients. Quaternions here are NOT
sign-canonicalized: flipping sign inside a differentiable path would kill
smoothness, so canonicalization happens only at the value level (geom module).
All arrays are (..., 4) for quaternions and (..., 3) for vectors.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_normalize_backward(q, grad_out):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    y = q / n
    dot = np.sum(y * grad_out, axis=-1, keepdims=True)
    return (grad_out - y * dot) / n


def quat_to_matrix_batch(q):
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_jacobian(q):
    """(..., 3, 3, 4) tensor of dR_ij/dq_k for the unit-quaternion formula."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    J = np.empty(q.shape[:-1] + (3, 3, 4))
    # dR/dw, dR/dx, dR/dy, dR/dz stacked on the last axis.
    J[..., 0, 0, :] = 2 * np.stack([zero, zero, -2 * y, -2 * z], axis=-1)
    J[..., 0, 1, :] = 2 * np.stack([-z, y, x, -w], axis=-1)
    J[..., 0, 2, :] = 2 * np.stack([y, z, w, x], axis=-1)
    J[..., 1, 0, :] = 2 * np.stack([z, y, x, w], axis=-1)
    J[..., 1, 1, :] = 2 * np.stack([zero, -2 * x, zero, -2 * z], axis=-1)
    J[..., 1, 2, :] = 2 * np.stack([-x, -w, z, y], axis=-1)
    J[..., 2, 0, :] = 2 * np.stack([-y, z, -w, x], axis=-1)
    J[..., 2, 1, :] = 2 * np.stack([x, w, z, y], axis=-1)
    J[..., 2, 2, :] = 2 * np.stack([zero, -2 * x, -2 * y, zero], axis=-1)
    return J


def rotate(q, v):
    """Apply unit quaternions (..., 4) to vectors (..., 3)."""
    R = quat_to_matrix_batch(q)
    return np.einsum("...ij,...j->...i", R, v)


def rotate_backward(q, v, grad_out):
    """Gradients of rotate w.r.t. q (through the unit formula) and v."""
    R = quat_to_matrix_batch(q)
    J = quat_to_matrix_jacobian(q)
    grad_v = np.einsum("...ij,...i->...j", R, grad_out)
    grad_q = np.einsum("...i,...ijk,...j->...k", grad_out, J, v)
    return grad_q, grad_v


def _left_matrix(q):
    """L(a) with a (x) b = L(a) b."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    L = np.empty(q.shape[:-1] + (4, 4))
    L[..., 0, :] = np.stack([w, -x, -y, -z], axis=-1)
    L[..., 1, :] = np.stack([x, w, -z, y], axis=-1)
    L[..., 2, :] = np.stack([y, z, w, -x], axis=-1)
    L[..., 3, :] = np.stack([z, -y, x, w], axis=-1)
    return L


def _right_matrix(q):
    """Rm(b) with a (x) b = Rm(b) a."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (4, 4))
    R[..., 0, :] = np.stack([w, -x, -y, -z], axis=-1)
    R[..., 1, :] = np.stack([x, w, z, -y], axis=-1)
    R[..., 2, :] = np.stack([y, -z, w, x], axis=-1)
    R[..., 3, :] = np.stack([z, y, -x, w], axis=-1)
    return R


def quat_mul(a, b):
    return np.einsum("...ij,...j->...i", _left_matrix(a), b)


def quat_mul_backward(a, b, grad_out):
    grad_a = np.einsum("...ij,...i->...j", _right_matrix(b), grad_out)
    grad_b = np.einsum("...ij,...i->...j", _left_matrix(a), grad_out)
    return grad_a, grad_b


def quat_conj(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_conj_backward(grad_out):
    return quat_conj(grad_out)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(weights, grad_out):
    dot = np.sum(weights * grad_out, axis=-1, keepdims=True)
    return weights * (grad_out - dot)


_TINY_SIN = 1e-9


def geodesic_angle_sq(a, b):
    """Squared rotation angle between unit quaternions, ||log(Ra^T Rb)||^2."""
    rel = quat_mul(quat_conj(a), b)
    s = np.linalg.norm(rel[..., 1:], axis=-1)
    theta = 2.0 * np.arctan2(s, np.abs(rel[..., 0]))
    return theta * theta


def geodesic_angle_sq_backward(a, b, grad_out):
    """Gradients of the squared geodesic angle w.r.t. both quaternions."""
    rel = quat_mul(quat_conj(a), b)
    w = rel[..., 0]
    vec = rel[..., 1:]
    s = np.linalg.norm(vec, axis=-1)
    aw = np.abs(w)
    theta = 2.0 * np.arctan2(s, aw)
    denom = aw * aw + s * s
    # d(theta^2)/ds = 2 theta * 2|w|/denom ; divide by s for the vec direction.
    small = s < _TINY_SIN
    coef_vec = np.where(small, 8.0 / np.maximum(denom, 1e-300),
                        4.0 * theta * aw / (denom * np.where(small, 1.0, s)))
    d_w = -4.0 * theta * np.sign(w) * s / denom
    grad_rel = np.empty_like(rel)
    grad_rel[..., 0] = grad_out * d_w
    grad_rel[..., 1:] = (grad_out * coef_vec)[..., None] * vec
    grad_ca, grad_b = quat_mul_backward(quat_conj(a), b, grad_rel)
    return quat_conj_backward(grad_ca), grad_b
