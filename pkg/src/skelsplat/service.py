"""HTTP render/pose service plus the model/pose document plumbing it shares
with the command line.

The wire format is JSON; the versioned schema lives in docs/wire_schema.md.
Every render — CLI or HTTP — goes through :func:`render_pose`, so identical
inputs produce identical PNG bytes on either path.
"""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import pipeline
from .kinematics import (KinematicPose, interpolate_poses, repose)
from .render import Camera, png_bytes, render_tiled

SCHEMA_VERSION = 1
SERVICE_VERSION = "0.1.0"

MODEL_FILES = ("gaussians.ply", "field.bin", "state.npz", "meta.json")


class SchemaError(ValueError):
    """A request document violates the wire schema; carries the field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class SkeletonMismatch(ValueError):
    """A pose document does not fit the loaded skeleton."""


@dataclass
class LoadedModel:
    state: pipeline.ProjectState
    model_hash: str

    @property
    def tree(self):
        return self.state.tree


def load_model(model_dir) -> LoadedModel:
    """Read a trained checkpoint directory and fingerprint its files."""
    state = pipeline.load_state(model_dir)
    if state.tree is None or state.joint_field is None:
        raise ValueError("checkpoint has no kinematic model; train first")
    digest = hashlib.sha256()
    for name in MODEL_FILES + ("psi.bin",):
        path = os.path.join(model_dir, name)
        if os.path.exists(path):
            with open(path, "rb") as fh:
                digest.update(fh.read())
    return LoadedModel(state, digest.hexdigest())


# ---------------------------------------------------------------------------
# documents

def _require(doc, key, types, path):
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    if key not in doc:
        raise SchemaError(f"{path}.{key}", "missing required field")
    value = doc[key]
    if not isinstance(value, types):
        raise SchemaError(f"{path}.{key}", f"expected {types}")
    return value


def _vector(doc, key, n, path, default=None):
    if default is not None and key not in doc:
        return np.asarray(default, dtype=float)
    value = _require(doc, key, (list, tuple), path)
    if len(value) != n or not all(isinstance(v, (int, float)) for v in value):
        raise SchemaError(f"{path}.{key}", f"expected {n} numbers")
    return np.asarray(value, dtype=float)


def pose_to_doc(pose: KinematicPose, tree) -> dict:
    joints = [{"index": k, "quat": [float(v) for v in pose.joint_quats[k]]}
              for k in range(len(pose)) if k != tree.root]
    return {
        "schema_version": SCHEMA_VERSION,
        "root": {"quat": [float(v) for v in pose.root_quat],
                 "translation": [float(v) for v in pose.root_trans]},
        "joints": joints,
    }


def pose_from_doc(doc, tree, path="pose") -> KinematicPose:
    """Validate and expand a pose document against a skeleton.

    Joints omitted from the document stay at identity; indices outside the
    skeleton (or the root) raise :class:`SkeletonMismatch`.
    """
    m = len(tree)
    pose = KinematicPose.identity(m)
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    if "root" in doc:
        root = doc["root"]
        pose.root_quat = _normalized_quat(
            _vector(root, "quat", 4, f"{path}.root"), f"{path}.root.quat")
        pose.root_trans = _vector(root, "translation", 3, f"{path}.root",
                                  default=(0.0, 0.0, 0.0))
    entries = doc.get("joints", [])
    if not isinstance(entries, list):
        raise SchemaError(f"{path}.joints", "expected a list")
    for i, entry in enumerate(entries):
        idx = _require(entry, "index", int, f"{path}.joints[{i}]")
        if idx < 0 or idx >= m or idx == tree.root:
            raise SkeletonMismatch(
                f"joint index {idx} does not exist in the loaded skeleton "
                f"(valid: 0..{m - 1} excluding root {tree.root})")
        quat = _vector(entry, "quat", 4, f"{path}.joints[{i}]")
        pose.joint_quats[idx] = _normalized_quat(
            quat, f"{path}.joints[{i}].quat")
    return pose


def _normalized_quat(q, path):
    norm = np.linalg.norm(q)
    if norm < 1e-8:
        raise SchemaError(path, "zero-norm quaternion")
    return q / norm


def camera_from_doc(doc, path="camera") -> Camera:
    position = _vector(doc, "position", 3, path)
    target = _vector(doc, "target", 3, path)
    up = _vector(doc, "up", 3, path, default=(0.0, 1.0, 0.0))
    fov = doc.get("fov", 50.0)
    width = doc.get("width", 256)
    height = doc.get("height", 256)
    if not isinstance(fov, (int, float)) or not 0 < fov < 180:
        raise SchemaError(f"{path}.fov", "expected a degree value in (0, 180)")
    for key, value in (("width", width), ("height", height)):
        if not isinstance(value, int) or value < 1 or value > 2048:
            raise SchemaError(f"{path}.{key}", "expected an int in [1, 2048]")
    if np.allclose(position, target):
        raise SchemaError(f"{path}.target", "camera position equals target")
    return Camera.look_at(position, target, up=up, fov_deg=float(fov),
                          width=width, height=height)


def model_document(model: LoadedModel) -> dict:
    state = model.state
    pos = state.gaussians.positions
    return {
        "schema_version": SCHEMA_VERSION,
        "skeleton": state.tree.to_dict(),
        "superpoint_count": len(state.superpoints),
        "gaussian_count": len(state.gaussians),
        "bounding_box": {"min": [float(v) for v in pos.min(axis=0)],
                         "max": [float(v) for v in pos.max(axis=0)]},
        "timestamps": [float(t) for t in state.timestamps],
    }


# ---------------------------------------------------------------------------
# the single render code path

def render_pose(state: pipeline.ProjectState, pose: KinematicPose,
                cam: Camera, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Repose the canonical Gaussians and rasterize them."""
    posed = repose(state.gaussians, state.weights, state.tree, pose)
    return render_tiled(posed, cam, background=background)


def pose_at_time(model: LoadedModel, t) -> KinematicPose:
    return model.state.joint_field.evaluate(model.tree, float(t))


# ---------------------------------------------------------------------------
# FastAPI application

def create_app(model: LoadedModel | None = None):
    from fastapi import FastAPI, Request, Response
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    app = FastAPI(title="skelsplat render service")
    app.state.model = model

    def current_model() -> LoadedModel:
        return app.state.model

    @app.exception_handler(SchemaError)
    async def schema_error(request: Request, exc: SchemaError):
        return JSONResponse(status_code=400,
                            content={"error": str(exc), "field": exc.path})

    @app.exception_handler(SkeletonMismatch)
    async def mismatch_error(request: Request, exc: SkeletonMismatch):
        return JSONResponse(status_code=422, content={"error": str(exc)})

    @app.exception_handler(RequestValidationError)
    async def body_error(request: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        path = ".".join(str(p) for p in first.get("loc", ()))
        return JSONResponse(status_code=400,
                            content={"error": first.get("msg", "invalid body"),
                                     "field": path})

    def require_model():
        m = current_model()
        if m is None:
            from fastapi import HTTPException
            raise HTTPException(status_code=404, detail="no model loaded")
        return m

    @app.get("/health")
    async def health():
        m = current_model()
        return {"version": SERVICE_VERSION,
                "schema_version": SCHEMA_VERSION,
                "model_hash": m.model_hash if m else None}

    @app.get("/model")
    async def get_model():
        return model_document(require_model())

    @app.post("/render")
    async def post_render(body: dict):
        m = require_model()
        cam = camera_from_doc(_require(body, "camera", dict, "body"))
        pose = pose_from_doc(_require(body, "pose", dict, "body"),
                             m.tree, path="body.pose")
        background = tuple(_vector(body, "background", 3, "body",
                                   default=(0.0, 0.0, 0.0)))
        image = render_pose(m.state, pose, cam, background=background)
        return Response(content=png_bytes(image), media_type="image/png")

    @app.post("/interpolate")
    async def post_interpolate(body: dict):
        m = require_model()
        pose_a = pose_from_doc(_require(body, "pose_a", dict, "body"),
                               m.tree, path="body.pose_a")
        pose_b = pose_from_doc(_require(body, "pose_b", dict, "body"),
                               m.tree, path="body.pose_b")
        u = _require(body, "u", (int, float), "body")
        if not 0.0 <= float(u) <= 1.0:
            raise SchemaError("body.u", "expected a value in [0, 1]")
        pose = interpolate_poses(pose_a, pose_b, float(u))
        return {"schema_version": SCHEMA_VERSION,
                "pose": pose_to_doc(pose, m.tree)}

    @app.get("/pose")
    async def get_pose(t: float):
        m = require_model()
        pose = pose_at_time(m, t)
        return {"schema_version": SCHEMA_VERSION, "t": t,
                "pose": pose_to_doc(pose, m.tree)}

    return app


def serve(model_dir, port=8000, host="127.0.0.1"):
    import uvicorn

    app = create_app(load_model(model_dir))
    uvicorn.run(app, host=host, port=port)
