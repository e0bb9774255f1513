"""HTTP service endpoints against a trained model."""

import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from skelsplat import service

CAMERA = {"position": [0.5, 0.6, 3.0], "target": [0.5, 0.0, 0.0],
          "width": 64, "height": 64}


@pytest.fixture(scope="session")
def model(trained_project):
    return service.load_model(str(trained_project / "model"))


@pytest.fixture(scope="session")
def client(model):
    return TestClient(service.create_app(model))


def identity_pose():
    return {"root": {"quat": [1, 0, 0, 0], "translation": [0, 0, 0]},
            "joints": []}


class TestHealthAndModel:
    def test_health(self, client, model):
        doc = client.get("/health").json()
        assert doc["schema_version"] == service.SCHEMA_VERSION
        assert doc["model_hash"] == model.model_hash

    def test_model_document(self, client, model):
        doc = client.get("/model").json()
        assert doc["superpoint_count"] == len(model.state.superpoints)
        nodes = doc["skeleton"]["nodes"]
        assert len(nodes) == len(model.tree)
        assert {"index", "parent", "joint", "children"} <= set(nodes[0])
        assert len(doc["timestamps"]) == len(model.state.timestamps)
        bb = doc["bounding_box"]
        assert np.all(np.asarray(bb["min"]) <= np.asarray(bb["max"]))

    def test_404_before_model_load(self):
        bare = TestClient(service.create_app(None))
        assert bare.get("/model").status_code == 404
        assert bare.post("/render", json={"camera": CAMERA,
                                          "pose": identity_pose()}
                         ).status_code == 404
        assert bare.get("/health").json()["model_hash"] is None


class TestRenderEndpoint:
    def test_identity_render_matches_direct_call(self, client, model):
        resp = client.post("/render", json={"camera": CAMERA,
                                            "pose": identity_pose()})
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        from skelsplat.kinematics import KinematicPose
        from skelsplat.render import png_bytes
        cam = service.camera_from_doc(CAMERA)
        image = service.render_pose(model.state,
                                    KinematicPose.identity(len(model.tree)),
                                    cam)
        assert resp.content == png_bytes(image)

    def test_unknown_joint_is_422(self, client):
        pose = {"joints": [{"index": 99, "quat": [1, 0, 0, 0]}]}
        resp = client.post("/render", json={"camera": CAMERA, "pose": pose})
        assert resp.status_code == 422
        assert "99" in resp.json()["error"]

    def test_schema_violation_reports_field_path(self, client):
        resp = client.post("/render", json={"camera": {"target": [0, 0, 0]},
                                            "pose": identity_pose()})
        assert resp.status_code == 400
        assert resp.json()["field"] == "camera.position"

    def test_bad_quaternion_is_400(self, client):
        pose = {"joints": [{"index": 1, "quat": [0, 0, 0, 0]}]}
        resp = client.post("/render", json={"camera": CAMERA, "pose": pose})
        assert resp.status_code == 400
        assert "quat" in resp.json()["field"]

    def test_background_changes_pixels(self, client):
        black = client.post("/render", json={"camera": CAMERA,
                                             "pose": identity_pose()})
        white = client.post("/render", json={"camera": CAMERA,
                                             "pose": identity_pose(),
                                             "background": [1, 1, 1]})
        assert black.content != white.content


class TestInterpolateEndpoint:
    def pose(self, angle, index=1):
        half = angle / 2
        return {"joints": [{"index": index,
                            "quat": [float(np.cos(half)), 0.0, 0.0,
                                     float(np.sin(half))]}]}

    def test_endpoints_match_inputs(self, client, model):
        a, b = self.pose(0.0), self.pose(0.9)
        for u, expected in ((0.0, a), (1.0, b)):
            doc = client.post("/interpolate",
                              json={"pose_a": a, "pose_b": b, "u": u}).json()
            got = {j["index"]: j["quat"] for j in doc["pose"]["joints"]}
            want = {j["index"]: j["quat"] for j in expected["joints"]}
            for idx, quat in want.items():
                assert np.allclose(got[idx], quat, atol=1e-12)

    def test_midpoint_is_slerp(self, client):
        a, b = self.pose(0.0), self.pose(0.8)
        doc = client.post("/interpolate",
                          json={"pose_a": a, "pose_b": b, "u": 0.5}).json()
        got = {j["index"]: j["quat"] for j in doc["pose"]["joints"]}
        assert np.allclose(got[1], [np.cos(0.2), 0, 0, np.sin(0.2)],
                           atol=1e-12)

    def test_u_out_of_range(self, client):
        resp = client.post("/interpolate", json={"pose_a": self.pose(0),
                                                 "pose_b": self.pose(0),
                                                 "u": 1.5})
        assert resp.status_code == 400
        assert resp.json()["field"] == "body.u"


class TestPoseEndpoint:
    def test_pose_at_training_time(self, client, model):
        t0 = float(model.state.timestamps[0])
        doc = client.get("/pose", params={"t": t0}).json()
        assert doc["t"] == t0
        assert len(doc["pose"]["joints"]) == len(model.tree) - 1
        direct = service.pose_at_time(model, t0)
        got = {j["index"]: j["quat"] for j in doc["pose"]["joints"]}
        for idx, quat in got.items():
            assert np.allclose(quat, direct.joint_quats[idx], atol=1e-12)

    def test_pose_render_roundtrip(self, client, model):
        """A /pose document feeds back into /render without error."""
        t0 = float(model.state.timestamps[-1])
        pose = client.get("/pose", params={"t": t0}).json()["pose"]
        resp = client.post("/render", json={"camera": CAMERA, "pose": pose})
        assert resp.status_code == 200

    def test_missing_t_is_400(self, client):
        assert client.get("/pose").status_code == 400


class TestCliServiceParity:
    def test_canonical_render_byte_identical(self, trained_project, client,
                                             tmp_path):
        from click.testing import CliRunner
        from skelsplat.cli import main as cli_main
        out = tmp_path / "cli.png"
        eye = ",".join(str(v) for v in CAMERA["position"])
        target = ",".join(str(v) for v in CAMERA["target"])
        result = CliRunner().invoke(cli_main, [
            "render", str(trained_project), str(out), "--eye", eye,
            "--target", target, "--width", "64", "--height", "64"])
        assert result.exit_code == 0, result.output
        resp = client.post("/render", json={"camera": CAMERA,
                                            "pose": identity_pose()})
        assert out.read_bytes() == resp.content
