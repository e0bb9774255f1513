"""Command-line entry points: scene synthesis, training, rendering, serving.

A project directory holds the synthetic scene (`canonical.ply`,
`ground_truth.json`), optional `config.json`, per-stage checkpoints under
`checkpoints/`, the final model under `model/`, and the training report
(delimited log plus rendered figures) under `report/`.
"""

import json
import os

import click
import numpy as np

from . import pipeline, service, synthetic
from .control import ControlThresholds
from .losses import LossWeights
from .pipeline import RunLog, StageConfig
from .render import Camera, psnr, render_tiled, save_png
from .superpoints import lbs_deform

PRESETS = dict(synthetic.PRESETS, random_tree=synthetic.random_tree)


def _fail(message):
    raise click.ClickException(message)


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        _fail(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        _fail(f"{what} {path} is not valid JSON "
              f"(line {exc.lineno}, column {exc.colno}): {exc.msg}")


def _dataclass_from(cls, doc, path):
    fields = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(doc) - fields
    if unknown:
        _fail(f"{path}: unknown field '{sorted(unknown)[0]}' "
              f"(valid: {sorted(fields)})")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        _fail(f"{path}: {exc}")


def load_project_config(project_dir):
    """Optional config.json: stage settings, camera presets, service port."""
    path = os.path.join(project_dir, "config.json")
    if not os.path.exists(path):
        return StageConfig(), {}, 8000
    doc = _load_json(path, "config")
    known = {"stage", "camera_presets", "service_port"}
    unknown = set(doc) - known
    if unknown:
        _fail(f"config: unknown field '{sorted(unknown)[0]}' "
              f"(valid: {sorted(known)})")
    stage_doc = dict(doc.get("stage", {}))
    lw = _dataclass_from(LossWeights, stage_doc.pop("loss_weights", {}),
                         "config.stage.loss_weights")
    th = _dataclass_from(ControlThresholds, stage_doc.pop("thresholds", {}),
                         "config.stage.thresholds")
    config = _dataclass_from(
        StageConfig, dict(stage_doc, loss_weights=lw, thresholds=th),
        "config.stage")
    port = doc.get("service_port", 8000)
    if not isinstance(port, int) or not 0 < port < 65536:
        _fail("config.service_port: expected a port number")
    return config, doc.get("camera_presets", {}), port


def _load_truth(project_dir):
    if not os.path.exists(os.path.join(project_dir, "ground_truth.json")):
        _fail(f"no scene in {project_dir}; run `skelsplat synth` first")
    return synthetic.load_ground_truth(project_dir)


def _default_camera(positions, preset=None, width=256, height=256):
    if preset:
        return service.camera_from_doc(preset, path="camera_preset")
    center = 0.5 * (positions.min(axis=0) + positions.max(axis=0))
    diag = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    eye = center + np.array([0.0, 0.35, 1.1]) * max(diag, 1e-6) * 1.5
    return Camera.look_at(eye, center, width=width, height=height)


def _gt_frame(truth, i):
    """Ground-truth Gaussians posed with the true per-link transforms."""
    from .superpoints import SkinningWeights
    sample = truth.motion[i]
    weights = SkinningWeights(truth.link_ids[:, None],
                              np.zeros((len(truth.gaussians), 1)))
    return lbs_deform(truth.gaussians, sample, weights)


@click.group()
def main():
    """Articulated-object reconstruction, skeleton discovery, and reposing."""


@main.command()
@click.argument("spec_file")
@click.argument("out_dir")
def synth(spec_file, out_dir):
    """Generate a synthetic scene from a JSON spec or preset."""
    doc = _load_json(spec_file, "scene spec")
    if "preset" in doc:
        name = doc.pop("preset")
        if name not in PRESETS:
            _fail(f"unknown preset '{name}' (valid: {sorted(PRESETS)})")
        try:
            spec = PRESETS[name](**doc)
        except TypeError as exc:
            _fail(f"preset '{name}': {exc}")
    else:
        try:
            spec = synthetic.ArticulatedSpec.from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            _fail(f"scene spec: {exc}")
    truth = synthetic.generate(spec)
    synthetic.save_ground_truth(truth, out_dir)
    click.echo(f"scene\t{out_dir}\tgaussians\t{len(truth.gaussians)}"
               f"\tlinks\t{len(truth.tree)}"
               f"\ttimestamps\t{len(truth.timestamps)}")


def _save_stage(state, project_dir, name):
    out = os.path.join(project_dir, "checkpoints", name)
    pipeline.save_state(state, out)
    return out


def _report(project_dir, log, state, truth):
    report_dir = os.path.join(project_dir, "report")
    metrics = {"sp_trajectory_rmse": pipeline.sp_trajectory_rmse(state, truth),
               "trajectory_rmse": pipeline.trajectory_rmse(state, truth),
               "bbox_diagonal": truth.bbox_diagonal}
    ev = synthetic.eval_skeleton(state.tree, state.weights, truth)
    metrics.update({"topology_match": ev["topology_match"],
                    "joint_rmse": ev["joint_rmse"],
                    "part_iou": ev["part_iou"],
                    "joints": sum(1 for _ in state.tree.edges)})
    pipeline.write_report(report_dir, log, state, metrics)
    with open(os.path.join(report_dir, "skeleton.json"), "w") as fh:
        json.dump(state.tree.to_dict(), fh, indent=2)
    for key, value in metrics.items():
        click.echo(f"{key}\t{value}")
    return report_dir


@main.command()
@click.argument("project_dir")
def train(project_dir):
    """Run all three stages and write the final model and report."""
    truth = _load_truth(project_dir)
    config, _, _ = load_project_config(project_dir)
    log = RunLog(os.path.join(project_dir, "report", "run_log.txt"))
    state = pipeline.init_state(truth, config)
    try:
        pipeline.run_dynamic_stage(state, config, truth, log)
        _save_stage(state, project_dir, "dynamic")
        state.step = 0
        pipeline.run_discovery_stage(state, config, log)
        _save_stage(state, project_dir, "discovery")
        state.step = 0
        pipeline.run_kinematic_stage(state, config, truth, log)
    except (RuntimeError, ValueError) as exc:
        _fail(f"training failed during the {state.stage} stage: {exc}")
    pipeline.save_state(state, os.path.join(project_dir, "model"))
    _report(project_dir, log, state, truth)
    log.close()


@main.command()
@click.argument("project_dir")
def discover(project_dir):
    """Run the skeleton-discovery stage from the dynamic checkpoint."""
    src = os.path.join(project_dir, "checkpoints", "dynamic")
    if not os.path.exists(src):
        _fail("no dynamic checkpoint; run `skelsplat train` or the dynamic "
              "stage first")
    config, _, _ = load_project_config(project_dir)
    state = pipeline.load_state(src)
    state.step = 0
    log = RunLog(os.path.join(project_dir, "report", "run_log.txt"))
    try:
        pipeline.run_discovery_stage(state, config, log)
    except (RuntimeError, ValueError) as exc:
        _fail(f"training failed during the discovery stage: {exc}")
    out = _save_stage(state, project_dir, "discovery")
    log.close()
    click.echo(f"checkpoint\t{out}")


@main.command()
@click.argument("project_dir")
def kinefit(project_dir):
    """Run the kinematic-fit stage from the discovery checkpoint."""
    src = os.path.join(project_dir, "checkpoints", "discovery")
    if not os.path.exists(src):
        _fail("no discovery checkpoint; run `skelsplat discover` first")
    truth = _load_truth(project_dir)
    config, _, _ = load_project_config(project_dir)
    state = pipeline.load_state(src)
    state.step = 0
    log = RunLog(os.path.join(project_dir, "report", "run_log.txt"))
    try:
        pipeline.run_kinematic_stage(state, config, truth, log)
    except (RuntimeError, ValueError) as exc:
        _fail(f"training failed during the kinematic stage: {exc}")
    pipeline.save_state(state, os.path.join(project_dir, "model"))
    _report(project_dir, log, state, truth)
    log.close()


def _load_model(project_dir):
    model_dir = os.path.join(project_dir, "model")
    if not os.path.exists(model_dir):
        _fail(f"no trained model in {project_dir}; run `skelsplat train`")
    return service.load_model(model_dir)


def _camera_opts(fn):
    fn = click.option("--eye", default=None, help="camera position x,y,z")(fn)
    fn = click.option("--target", default=None, help="look-at point x,y,z")(fn)
    fn = click.option("--width", default=256, show_default=True)(fn)
    fn = click.option("--height", default=256, show_default=True)(fn)
    return fn


def _camera_from_opts(model, presets, eye, target, width, height):
    if eye or target:
        positions = model.state.gaussians.positions
        center = 0.5 * (positions.min(axis=0) + positions.max(axis=0))
        doc = {"position": [float(v) for v in eye.split(",")] if eye else
               list(_default_camera(positions).position),
               "target": [float(v) for v in target.split(",")] if target
               else [float(v) for v in center],
               "width": width, "height": height}
        return service.camera_from_doc(doc, path="camera")
    preset = presets.get("default")
    if preset:
        preset = dict(preset, width=width, height=height)
    return _default_camera(model.state.gaussians.positions, preset,
                           width, height)


@main.command()
@click.argument("project_dir")
@click.argument("out_png")
@click.option("--t", "t_value", type=float, default=None,
              help="evaluate the fitted pose field at this training time")
@click.option("--pose-file", default=None, help="pose document (JSON)")
@_camera_opts
def render(project_dir, out_png, t_value, pose_file, eye, target,
           width, height):
    """Render the model: canonical pose, a pose file, or a training time."""
    model = _load_model(project_dir)
    _, presets, _ = load_project_config(project_dir)
    cam = _camera_from_opts(model, presets, eye, target, width, height)
    if t_value is not None and pose_file is not None:
        _fail("pass either --t or --pose-file, not both")
    if pose_file is not None:
        doc = _load_json(pose_file, "pose document")
        try:
            pose = service.pose_from_doc(doc, model.tree)
        except (service.SchemaError, service.SkeletonMismatch) as exc:
            _fail(f"pose document: {exc}")
    elif t_value is not None:
        pose = service.pose_at_time(model, t_value)
    else:
        from .kinematics import KinematicPose
        pose = KinematicPose.identity(len(model.tree))
    image = service.render_pose(model.state, pose, cam)
    save_png(image, out_png)
    click.echo(f"frame\t{out_png}")
    if t_value is not None:
        truth_path = os.path.join(project_dir, "ground_truth.json")
        if os.path.exists(truth_path):
            truth = synthetic.load_ground_truth(project_dir)
            ts = np.asarray(truth.timestamps)
            i = int(np.argmin(np.abs(ts - t_value)))
            if abs(float(ts[i]) - t_value) < 1e-9:
                gt_image = render_tiled(_gt_frame(truth, i), cam)
                click.echo(f"psnr_vs_gt\t{psnr(image, gt_image):.4f}")


@main.command()
@click.argument("project_dir")
@click.argument("pose_a")
@click.argument("pose_b")
@click.argument("out_dir")
@click.option("--frames", default=10, show_default=True)
@_camera_opts
def repose(project_dir, pose_a, pose_b, out_dir, frames, eye, target,
           width, height):
    """Render an interpolated sequence between two pose documents."""
    if frames < 2:
        _fail("--frames must be at least 2")
    model = _load_model(project_dir)
    _, presets, _ = load_project_config(project_dir)
    cam = _camera_from_opts(model, presets, eye, target, width, height)
    from .kinematics import interpolate_poses
    try:
        pa = service.pose_from_doc(_load_json(pose_a, "pose document"),
                                   model.tree)
        pb = service.pose_from_doc(_load_json(pose_b, "pose document"),
                                   model.tree)
    except (service.SchemaError, service.SkeletonMismatch) as exc:
        _fail(f"pose document: {exc}")
    os.makedirs(out_dir, exist_ok=True)
    for f in range(frames):
        u = f / (frames - 1)
        pose = interpolate_poses(pa, pb, u)
        image = service.render_pose(model.state, pose, cam)
        path = os.path.join(out_dir, f"frame_{f:04d}.png")
        save_png(image, path)
        click.echo(f"frame\t{path}\tu\t{u:.6f}")


@main.command()
@click.argument("project_dir")
@click.option("--port", default=None, type=int)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(project_dir, port, host):
    """Serve the trained model over HTTP for the pose editor."""
    _, _, config_port = load_project_config(project_dir)
    model_dir = os.path.join(project_dir, "model")
    if not os.path.exists(model_dir):
        _fail(f"no trained model in {project_dir}; run `skelsplat train`")
    service.serve(model_dir, port=port or config_port, host=host)


if __name__ == "__main__":
    main()
