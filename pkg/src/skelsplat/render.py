"""Forward CPU rasterizer: EWA projection, depth sort, alpha compositing.

No gradients flow through this path; it is a forward metric / preview
renderer. Naive and tiled compositing share the same per-splat math so the
tile path can be checked against the full-image path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage
from scipy.signal import fftconvolve

from . import gaussians, geom
from .gaussians import GaussianSet
from .geom import RigidTransform

# 3D-GS conventions.
LOWPASS = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
CONFIDENCE_SIGMA = 3.0  # ~99% ellipse radius used for culling / tile bins
TILE = 16


@dataclass
class Camera:
    world_to_camera: RigidTransform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def position(self):
        wc = self.world_to_camera
        return -wc.rotation.T @ wc.translation

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg=50.0,
                width=256, height=256, near=0.01):
        """Right-handed, y-up camera looking down +z in camera space."""
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=float))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # camera-from-world rotation
        t = -R @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return Camera(RigidTransform(R, t), f, f, width / 2, height / 2,
                      width, height, near)


@dataclass
class Splat2D:
    center: np.ndarray      # pixel coordinates
    cov: np.ndarray         # 2x2, px^2, low-pass regularized
    depth: float            # camera-space z
    color: np.ndarray
    opacity: float


def project(position, quat, log_scales, sh, opacity, cam: Camera, sh_degree=None):
    """EWA-project one Gaussian; returns a Splat2D or None when culled."""
    wc = cam.world_to_camera
    p_cam = wc.rotation @ np.asarray(position, dtype=float) + wc.translation
    z = p_cam[2]
    if z < cam.near:
        return None
    center = np.array([cam.fx * p_cam[0] / z + cam.cx,
                       cam.fy * p_cam[1] / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * p_cam[0] / (z * z)],
                  [0.0, cam.fy / z, -cam.fy * p_cam[1] / (z * z)]])
    cov3 = gaussians.covariance(quat, log_scales)
    M = J @ wc.rotation
    cov2 = M @ cov3 @ M.T + LOWPASS * np.eye(2)
    radius = CONFIDENCE_SIGMA * math.sqrt(max(np.linalg.eigvalsh(cov2).max(), 0.0))
    if (center[0] + radius < 0 or center[0] - radius > cam.width
            or center[1] + radius < 0 or center[1] - radius > cam.height):
        return None
    view_dir = np.asarray(position, dtype=float) - cam.position
    n = np.linalg.norm(view_dir)
    view_dir = view_dir / n if n > 1e-12 else np.array([0.0, 0.0, 1.0])
    color = gaussians.eval_sh(sh, view_dir, degree=sh_degree)
    return Splat2D(center, cov2, float(z), color, float(opacity))


def project_gaussian(g_set: GaussianSet, i, cam: Camera):
    return project(g_set.positions[i], g_set.quats[i], g_set.log_scales[i],
                   g_set.sh[i], g_set.opacities[i], cam, sh_degree=g_set.sh_degree)


def pixel_alpha(splat: Splat2D, x):
    """Opacity contribution of a splat at pixel location x, clamped at 0.99."""
    d = np.asarray(x, dtype=float) - splat.center
    cov_inv = np.linalg.inv(splat.cov)
    alpha = splat.opacity * math.exp(-0.5 * float(d @ cov_inv @ d))
    return min(alpha, ALPHA_CLAMP)


def _prepare_splats(g_set: GaussianSet, cam: Camera):
    splats = []
    for i in range(len(g_set)):
        s = project_gaussian(g_set, i, cam)
        if s is not None:
            splats.append(s)
    # Ascending depth; stable sort keeps index order on ties.
    splats.sort(key=lambda s: s.depth)
    return splats


def _composite_region(splats, x0, x1, y0, y1, background):
    """Front-to-back compositing of sorted splats over a pixel window."""
    h, w = y1 - y0, x1 - x0
    img = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    for s in splats:
        radius = CONFIDENCE_SIGMA * math.sqrt(max(np.linalg.eigvalsh(s.cov).max(), 0.0))
        bx0 = max(x0, int(math.floor(s.center[0] - radius)))
        bx1 = min(x1, int(math.ceil(s.center[0] + radius)) + 1)
        by0 = max(y0, int(math.floor(s.center[1] - radius)))
        by1 = min(y1, int(math.ceil(s.center[1] + radius)) + 1)
        if bx0 >= bx1 or by0 >= by1:
            continue
        dx = xs[bx0 - x0:bx1 - x0] - s.center[0]
        dy = ys[by0 - y0:by1 - y0] - s.center[1]
        cov_inv = np.linalg.inv(s.cov)
        quad = (cov_inv[0, 0] * dx[None, :] ** 2
                + 2.0 * cov_inv[0, 1] * dy[:, None] * dx[None, :]
                + cov_inv[1, 1] * dy[:, None] ** 2)
        alpha = np.minimum(s.opacity * np.exp(-0.5 * quad), ALPHA_CLAMP)
        alpha[alpha < ALPHA_CUTOFF] = 0.0
        sub = (slice(by0 - y0, by1 - y0), slice(bx0 - x0, bx1 - x0))
        weight = alpha * trans[sub]
        img[sub] += weight[:, :, None] * s.color[None, None, :]
        trans[sub] = trans[sub] * (1.0 - alpha)
    img += trans[:, :, None] * np.asarray(background, dtype=float)[None, None, :]
    return img


def render(g_set: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Naive full-image renderer (reference path)."""
    splats = _prepare_splats(g_set, cam)
    return _composite_region(splats, 0, cam.width, 0, cam.height, background)


def render_tiled(g_set: GaussianSet, cam: Camera, background=(0.0, 0.0, 0.0),
                 tile=TILE):
    """Tile-based renderer; splats binned by confidence-ellipse bounding box."""
    splats = _prepare_splats(g_set, cam)
    img = np.zeros((cam.height, cam.width, 3))
    for y0 in range(0, cam.height, tile):
        y1 = min(y0 + tile, cam.height)
        for x0 in range(0, cam.width, tile):
            x1 = min(x0 + tile, cam.width)
            local = []
            for s in splats:
                radius = CONFIDENCE_SIGMA * math.sqrt(
                    max(np.linalg.eigvalsh(s.cov).max(), 0.0))
                # Same integer pixel bbox as _composite_region, so a splat is
                # assigned to every tile whose pixels it can touch.
                bx0 = int(math.floor(s.center[0] - radius))
                bx1 = int(math.ceil(s.center[0] + radius)) + 1
                by0 = int(math.floor(s.center[1] - radius))
                by1 = int(math.ceil(s.center[1] + radius)) + 1
                if bx1 > x0 and bx0 < x1 and by1 > y0 and by0 < y1:
                    local.append(s)
            img[y0:y1, x0:x1] = _composite_region(local, x0, x1, y0, y1, background)
    return img


def save_png(image, path):
    """8-bit RGB PNG, values clipped to [0,1]."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def png_bytes(image):
    import io
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(data, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def psnr(a, b):
    """Peak signal-to-noise ratio in dB with peak 1.0; inf on identical input."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Structural similarity with the standard 11x11 Gaussian window, peak 1.0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    window = _gaussian_window(window_size, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = fftconvolve(x, window, mode="valid")
        mu_y = fftconvolve(y, window, mode="valid")
        xx = fftconvolve(x * x, window, mode="valid") - mu_x ** 2
        yy = fftconvolve(y * y, window, mode="valid") - mu_y ** 2
        xy = fftconvolve(x * y, window, mode="valid") - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
