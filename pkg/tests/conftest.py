import json
import os

import pytest
from click.testing import CliRunner

from skelsplat.cli import main as cli_main

TINY_SCENE = {"preset": "hinge2", "n_per_link": 6, "n_timestamps": 3}
TINY_CONFIG = {
    "stage": {
        "dynamic_steps": 60, "discovery_steps": 30, "kinematic_steps": 30,
        "control_period": 30, "merge_start": 30, "joint_window_start": 10,
        "refresh_period": 10, "n_superpoints": 4, "hidden": 16, "depth": 2,
        "loss_weights": {"smooth": 0.0, "sparse": 0.0},
    },
}


@pytest.fixture(scope="session")
def trained_project(tmp_path_factory):
    """A small hinge project taken through synth + train once per session."""
    project = tmp_path_factory.mktemp("project")
    spec_file = project / "scene.json"
    spec_file.write_text(json.dumps(TINY_SCENE))
    runner = CliRunner()
    result = runner.invoke(cli_main, ["synth", str(spec_file), str(project)])
    assert result.exit_code == 0, result.output
    (project / "config.json").write_text(json.dumps(TINY_CONFIG))
    result = runner.invoke(cli_main, ["train", str(project)])
    assert result.exit_code == 0, result.output
    assert os.path.exists(project / "model")
    return project
