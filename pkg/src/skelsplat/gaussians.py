"""Canonical-space Gaussian splats: covariance, SH color, PLY persistence.

Scales are stored in log space and opacity pre-sigmoid, matching the de-facto
splat PLY layout (x,y,z, rot_0..3, scale_0..2, opacity, f_dc_*, f_rest_*).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geom

# Real spherical harmonics constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = np.array([1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                  -1.0925484305920792, 0.5462742152960396])
SH_C3 = np.array([-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                  0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                  -0.5900435899266435])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


@dataclass
class GaussianSet:
    """Struct-of-arrays collection of 3D Gaussians.

    positions: (N,3), quats: (N,4) unit (w,x,y,z), log_scales: (N,3),
    opacity_raw: (N,) pre-sigmoid, sh: (N, (degree+1)^2, 3).
    """

    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_raw: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        n = len(self.positions)
        expected = (self.sh_degree + 1) ** 2
        if not (len(self.quats) == len(self.log_scales) == len(self.opacity_raw)
                == len(self.sh) == n):
            raise ValueError("inconsistent array lengths")
        if self.sh.shape[1] != expected:
            raise ValueError(f"sh degree {self.sh_degree} needs {expected} coefficients, "
                             f"got {self.sh.shape[1]}")

    def __len__(self):
        return len(self.positions)

    @property
    def opacities(self):
        return sigmoid(self.opacity_raw)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def copy(self):
        return GaussianSet(self.positions.copy(), self.quats.copy(),
                           self.log_scales.copy(), self.opacity_raw.copy(),
                           self.sh.copy(), self.sh_degree)

    @staticmethod
    def empty(sh_degree=0):
        k = (sh_degree + 1) ** 2
        return GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                           np.zeros(0), np.zeros((0, k, 3)), sh_degree)


def covariance(q, log_s):
    """3D covariance R S S^T R^T with S = diag(exp(log_s))."""
    R = geom.quat_to_matrix(q)
    S = np.exp(np.asarray(log_s, dtype=float))
    M = R * S[None, :]
    return M @ M.T


def covariances(set_: GaussianSet):
    """Covariance for every Gaussian, (N,3,3)."""
    return np.stack([covariance(q, s) for q, s in zip(set_.quats, set_.log_scales)])


def eval_sh(sh, direction, degree=None):
    """Evaluate real SH color for coefficients (K,3) and a unit view direction.

    Returns the RGB color with the 3D-GS +0.5 DC offset, clamped at zero.
    """
    sh = np.asarray(sh, dtype=float)
    if degree is None:
        degree = int(round(np.sqrt(sh.shape[0]))) - 1
    if sh.shape[0] != (degree + 1) ** 2:
        raise ValueError(f"sh length {sh.shape[0]} does not match degree {degree}")
    x, y, z = direction
    color = SH_C0 * sh[0]
    if degree >= 1:
        color = color - SH_C1 * y * sh[1] + SH_C1 * z * sh[2] - SH_C1 * x * sh[3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        color = (color
                 + SH_C2[0] * xy * sh[4]
                 + SH_C2[1] * yz * sh[5]
                 + SH_C2[2] * (2.0 * zz - xx - yy) * sh[6]
                 + SH_C2[3] * xz * sh[7]
                 + SH_C2[4] * (xx - yy) * sh[8])
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        color = (color
                 + SH_C3[0] * y * (3 * xx - yy) * sh[9]
                 + SH_C3[1] * x * y * z * sh[10]
                 + SH_C3[2] * y * (4 * zz - xx - yy) * sh[11]
                 + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[12]
                 + SH_C3[4] * x * (4 * zz - xx - yy) * sh[13]
                 + SH_C3[5] * z * (xx - yy) * sh[14]
                 + SH_C3[6] * x * (xx - 3 * yy) * sh[15])
    return np.maximum(color + 0.5, 0.0)


def _ply_property_names(sh_degree):
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    n_rest = ((sh_degree + 1) ** 2 - 1) * 3
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    return names


def save_ply(set_: GaussianSet, path):
    """Write the 3D-GS-compatible binary-little-endian PLY layout."""
    names = _ply_property_names(set_.sh_degree)
    n = len(set_)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    n_rest = ((set_.sh_degree + 1) ** 2 - 1)
    cols = [set_.positions, set_.sh[:, 0, :]]
    if n_rest:
        # f_rest is stored channel-major like 3D-GS: all R coeffs, then G, then B.
        cols.append(set_.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1))
    cols += [set_.opacity_raw[:, None], set_.log_scales, set_.quats]
    data = np.concatenate(cols, axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def load_ply(path) -> GaussianSet:
    """Read a Gaussian-splat PLY; raises on missing properties."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if end < 0:
        raise ValueError("not a PLY file: no end_header")
    header_lines = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    count = None
    props = []
    for line in header_lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] != "float":
                raise ValueError(f"unsupported property type: {parts[1]}")
            props.append(parts[2])
        elif parts[:2] == ["format", "binary_little_endian"]:
            pass
    if count is None:
        raise ValueError("missing vertex element")
    for required in ("x", "y", "z", "opacity", "rot_0", "scale_0", "f_dc_0"):
        if required not in props:
            raise ValueError(f"missing property: {required}")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    if n_rest % 3 != 0:
        raise ValueError("f_rest count not divisible by 3")
    sh_degree = int(round(np.sqrt(n_rest // 3 + 1))) - 1
    expected_bytes = count * len(props) * 4
    if len(body) < expected_bytes:
        raise ValueError(f"expected {expected_bytes} bytes of vertex data, "
                         f"got {len(body)}")
    data = np.frombuffer(body[:expected_bytes], dtype="<f4").reshape(count, len(props))
    col = {name: i for i, name in enumerate(props)}

    def take(names):
        return data[:, [col[n] for n in names]].astype(np.float64)

    positions = take(["x", "y", "z"])
    sh_dc = take([f"f_dc_{i}" for i in range(3)])
    sh = np.zeros((count, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = sh_dc
    if n_rest:
        rest = take([f"f_rest_{i}" for i in range(n_rest)])
        sh[:, 1:, :] = rest.reshape(count, 3, -1).transpose(0, 2, 1)
    return GaussianSet(
        positions=positions,
        quats=take([f"rot_{i}" for i in range(4)]),
        log_scales=take([f"scale_{i}" for i in range(3)]),
        opacity_raw=take(["opacity"])[:, 0],
        sh=sh,
        sh_degree=sh_degree,
    )
