#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Orchestration of the avatar pipeline steps.

Each step is a plain function the CLI calls:
- run_synth: generate the synthetic dataset
- run_train: fit a model to a manifest (checkpoints + loss curve CSV)
- run_render / run_animate: images of a checkpoint for one pose or a sequence
- run_export: rigged colored mesh of a checkpoint
- run_eval: MetricsReport JSON for a checkpoint or a mesh pair

Steps log what they do and let errors propagate; main() maps them to exit codes.

Usage:
    Import: from splat_avatar.scripts.run_pipeline import run_train
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from splat_avatar.config import DEFAULT_CONFIG
from splat_avatar.scripts.avatar_model import BoundSplatModel, render_avatar
from splat_avatar.scripts.checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from splat_avatar.scripts.export_mesh import colored_template, export_colored_mesh
from splat_avatar.scripts.losses import LossWeights
from splat_avatar.scripts.metrics import MetricsReport, metric_images, metric_meshes
from splat_avatar.scripts.synth_scene import synth_scene
from splat_avatar.scripts.templates import (
    load_camera,
    load_frames,
    load_manifest,
    load_mesh,
    load_pose,
    load_poses,
    load_template,
)
from splat_avatar.scripts.training import Optimizer, StageSchedule, train_epoch
from splat_avatar.scripts.utils import DataError, DivergenceError, ensure_directory_exists, write_json, write_normal_png, write_png

logger = logging.getLogger("splat_avatar.pipeline")

LOSS_COLUMNS = ["epoch", "iter", "l_rgb", "l_normal", "l_nc", "total"]


@dataclass
class TrainResult:
    model: BoundSplatModel
    rows: list
    final_checkpoint: Path
    loss_csv: Path


def write_loss_csv(path, rows):
    """Loss curve with one row per iteration."""
    frame = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    ensure_directory_exists(Path(path).parent)
    frame.to_csv(path, index=False, float_format="%.10g")
    return Path(path)


def smoothed_epoch_losses(rows, window=3):
    """Per-epoch mean total loss smoothed with a trailing moving average."""
    frame = pd.DataFrame(rows, columns=LOSS_COLUMNS)
    per_epoch = frame.groupby("epoch")["total"].mean()
    return per_epoch.rolling(window, min_periods=1).mean().tolist()


def run_synth(out_dir, config=None, seed=0):
    """Generate the synthetic dataset; returns the SynthResult."""
    config = config or dict(DEFAULT_CONFIG)
    logger.info(f"Generating synthetic scene in {out_dir}...")
    result = synth_scene(out_dir, config, seed)
    logger.info(f"Wrote {len(result.manifest.frames)} frames, manifest {result.manifest_path}")
    return result


def run_train(manifest_path, out_dir, config=None, seed=0):
    """
    Fit a model to the training split of a manifest.

    Writes latest.ckpt after every epoch, final.ckpt at the end and
    losses.csv. On divergence the state from the start of the failing epoch
    is saved as last_good.ckpt before the error propagates.

    Returns:
        TrainResult: Trained model, loss rows and output paths
    """
    config = config or dict(DEFAULT_CONFIG)
    out_dir = ensure_directory_exists(out_dir)
    manifest = load_manifest(manifest_path)
    template = load_template(manifest.template, units_scale=manifest.units_scale)
    frames = load_frames(manifest, "train")
    if not frames:
        raise DataError(f"{manifest_path}: no training frames")

    model = BoundSplatModel(template.mesh, template.skeleton, template.weights, config, seed=seed,
                            frame_count=len(frames))
    schedule = StageSchedule.from_config(config)
    optimizer = Optimizer.from_config(config)
    weights = LossWeights.from_config(config)
    logger.info(f"Training on {len(frames)} frames for {schedule.epochs} epochs "
                f"({template.mesh.face_count} splats, displacement={config['displacement_mode']})")

    rows = []
    loss_csv = out_dir / "losses.csv"
    for epoch in range(1, schedule.epochs + 1):
        last_good = checkpoint_from_model(model, epoch - 1, seed, schedule.to_dict())
        try:
            result = train_epoch(frames, model, schedule, epoch, optimizer, weights)
        except DivergenceError as e:
            logger.error(f"Epoch {epoch} diverged ({e}); saving last good state")
            save_checkpoint(out_dir / "last_good.ckpt", last_good)
            write_loss_csv(loss_csv, rows)
            raise
        rows.extend(result.rows)
        means = result.means
        logger.info(f"Epoch {epoch}/{schedule.epochs} (stage {result.stage}): total {means['total']:.6f}, "
                    f"rgb {means['l_rgb']:.6f}, normal {means['l_normal']:.6f}, nc {means['l_nc']:.6f}")
        save_checkpoint(out_dir / "latest.ckpt", model, epoch, seed, schedule.to_dict())

    final = save_checkpoint(out_dir / "final.ckpt", model, schedule.epochs, seed, schedule.to_dict())
    write_loss_csv(loss_csv, rows)
    logger.info(f"Training complete: {final}")
    return TrainResult(model, rows, final, loss_csv)


def _write_render(out_dir, stem, result):
    color = write_png(out_dir / f"{stem}_color.png", result.image.color, bits=8)
    normal = write_normal_png(out_dir / f"{stem}_normal.png", result.image.normal)
    return color, normal


def run_render(checkpoint_path, camera_path, pose_path, out_dir, background=None):
    """Render color and normal PNGs of a checkpoint for one camera and pose."""
    model = model_from_checkpoint(load_checkpoint(checkpoint_path))
    camera, pose = load_camera(camera_path), load_pose(pose_path)
    out_dir = ensure_directory_exists(out_dir)
    with torch.no_grad():
        result = render_avatar(model, camera, pose, background)
    paths = _write_render(out_dir, "render", result)
    logger.info(f"Rendered {camera.width}x{camera.height} images to {out_dir}")
    return paths


def run_animate(checkpoint_path, camera_path, poses_path, out_dir, background=None):
    """Render one color/normal pair per pose of a sequence."""
    model = model_from_checkpoint(load_checkpoint(checkpoint_path))
    camera, poses = load_camera(camera_path), load_poses(poses_path)
    out_dir = ensure_directory_exists(out_dir)
    paths = []
    for i, pose in enumerate(poses):
        with torch.no_grad():
            result = render_avatar(model, camera, pose, background)
        paths.append(_write_render(out_dir, f"frame_{i:04d}", result))
        if (i + 1) % model.config.get("log_every", 10) == 0 or (i + 1) == len(poses):
            logger.info(f"Animated {i + 1}/{len(poses)} poses")
    return paths


def run_export(checkpoint_path, out_path):
    """Export the rigged colored mesh of a checkpoint."""
    model = model_from_checkpoint(load_checkpoint(checkpoint_path))
    return export_colored_mesh(model, out_path)


def _image_metrics(model, manifest):
    frames = load_frames(manifest, "test")
    split = "test"
    if not frames:
        logger.warning("Manifest has no held-out frames; evaluating images on the training split")
        frames, split = load_frames(manifest, "train"), "train"
    psnrs, ssims = [], []
    for frame in frames:
        with torch.no_grad():
            result = render_avatar(model, frame.camera, frame.pose)
        value_psnr, value_ssim = metric_images(result.image.color, frame.image)
        psnrs.append(value_psnr)
        ssims.append(value_ssim)
    logger.info(f"Image metrics over {len(frames)} {split} frames")
    return float(np.mean(psnrs)), float(np.mean(ssims)), split, len(frames)


def run_eval(out_path, checkpoint_path=None, manifest_path=None, mesh_paths=None, config=None, seed=0):
    """
    Evaluate a checkpoint against a manifest, or two meshes against each other.

    With a checkpoint and manifest: PSNR/SSIM over held-out frames, and v2v/NC
    between the model's displaced canonical mesh and the manifest's ground
    truth when one is recorded. With mesh_paths: v2v/NC of the pair only.

    Returns:
        MetricsReport: The metrics (also written as JSON to out_path)
    """
    config = config or dict(DEFAULT_CONFIG)
    samples = int(config["v2v_samples"])
    report = MetricsReport()
    extra = {}

    if mesh_paths:
        mesh_a, mesh_b = (load_mesh(path) for path in mesh_paths)
        report.v2v_mm, report.nc = metric_meshes(mesh_a, mesh_b, samples, seed)
    else:
        if checkpoint_path is None or manifest_path is None:
            raise DataError("eval needs a checkpoint and a manifest, or two meshes")
        manifest = load_manifest(manifest_path)
        model = model_from_checkpoint(load_checkpoint(checkpoint_path))
        report.psnr, report.ssim, split, count = _image_metrics(model, manifest)
        extra.update({"image_split": split, "image_frames": count})
        if manifest.ground_truth is not None:
            truth = load_mesh(manifest.ground_truth)
            report.v2v_mm, report.nc = metric_meshes(colored_template(model).mesh, truth, samples, seed)
            extra["baseline_v2v_mm"] = manifest.baseline_v2v_mm

    document = report.to_dict()
    document.update(extra)
    write_json(out_path, document)
    logger.info(f"Metrics: psnr={report.psnr}, ssim={report.ssim}, v2v_mm={report.v2v_mm}, nc={report.nc}")
    return report
