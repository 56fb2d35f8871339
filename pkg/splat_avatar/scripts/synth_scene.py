#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Synthetic rigged scene for desk-scale experiments.

The scene is a vertical capsule (radius 0.15 m, total height 1 m, base at the
origin) with a two-bone rig: a root joint near the base and a child joint at
mid-height whose influence ramps in smoothly around it.

- coarse template: the plain UV capsule (about 2K faces); training starts here
- ground truth: the capsule subdivided, snapped back onto the capsule surface
  and pushed along its normals by a smooth bump pattern, with a procedural
  texture baked into per-face colors
- views: a turntable of cameras around the capsule; training frames bend the
  child joint about z, held-out frames sit between training azimuths

Ground-truth images are rendered with the same rasterizer the model uses.

Usage:
    Import: from splat_avatar.scripts.synth_scene import synth_scene
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import trimesh
import trimesh.remesh

from splat_avatar.config import DEFAULT_CONFIG, DTYPE, MANIFEST_VERSION
from splat_avatar.scripts.geometry import (
    SplatGeometry,
    TemplateMesh,
    build_covariance,
    build_face_frames,
    face_centroids,
    lift_rotation,
)
from splat_avatar.scripts.metrics import metric_v2v
from splat_avatar.scripts.skinning import PoseFrame, Skeleton, SkinWeights, bone_transforms, skin_vertices
from splat_avatar.scripts.splatting import Camera, rasterize
from splat_avatar.scripts.templates import RiggedTemplate, load_manifest, save_template
from splat_avatar.scripts.utils import UsageError, ensure_directory_exists, write_json, write_normal_png, write_png

logger = logging.getLogger("splat_avatar.synth_scene")

CAPSULE_RADIUS = 0.15
CAPSULE_CYLINDER = 0.7
ROOT_JOINT = (0.0, 0.15, 0.0)
CHILD_JOINT = (0.0, 0.5, 0.0)
BLEND_START, BLEND_END = 0.4, 0.6

CAMERA_DISTANCE = 2.0
CAMERA_TARGET = (0.0, 0.5, 0.0)
CAMERA_FOV = 40.0


@dataclass
class SynthResult:
    manifest_path: Path
    manifest: object
    ground_truth: RiggedTemplate
    template: RiggedTemplate
    baseline_v2v_mm: float


def capsule_mesh(segments=32, cap_rings=8, body_rings=15, radius=CAPSULE_RADIUS, cylinder=CAPSULE_CYLINDER):
    """
    UV capsule along +y with outward-facing triangles.

    Returns:
        TemplateMesh: Two pole vertices plus rings of `segments` vertices
    """
    profile = []
    for k in range(1, cap_rings + 1):
        phi = -math.pi / 2 + k * (math.pi / 2) / cap_rings
        profile.append((radius + radius * math.sin(phi), radius * math.cos(phi)))
    for k in range(1, body_rings + 1):
        profile.append((radius + k * cylinder / body_rings, radius))
    for k in range(1, cap_rings):
        phi = k * (math.pi / 2) / cap_rings
        profile.append((radius + cylinder + radius * math.sin(phi), radius * math.cos(phi)))

    theta = 2.0 * np.pi * np.arange(segments) / segments
    rings = [
        np.stack([r * np.cos(theta), np.full(segments, y), r * np.sin(theta)], axis=1) for y, r in profile
    ]
    top = 2.0 * radius + cylinder
    vertices = np.concatenate([[[0.0, 0.0, 0.0]], *rings, [[0.0, top, 0.0]]])

    def ring(i, j):
        return 1 + i * segments + (j % segments)

    faces = []
    for j in range(segments):
        faces.append((0, ring(0, j), ring(0, j + 1)))
    for i in range(len(profile) - 1):
        for j in range(segments):
            faces.append((ring(i, j), ring(i + 1, j), ring(i, j + 1)))
            faces.append((ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)))
    pole = len(vertices) - 1
    last = len(profile) - 1
    for j in range(segments):
        faces.append((ring(last, j), pole, ring(last, j + 1)))
    return TemplateMesh(vertices, np.asarray(faces, dtype=np.int64))


def capsule_projection(points, radius=CAPSULE_RADIUS, cylinder=CAPSULE_CYLINDER):
    """Closest capsule-surface points and outward normals of arbitrary points."""
    points = np.asarray(points, dtype=np.float64)
    axis = np.zeros_like(points)
    axis[:, 1] = np.clip(points[:, 1], radius, radius + cylinder)
    offset = points - axis
    length = np.linalg.norm(offset, axis=1, keepdims=True)
    normals = offset / np.maximum(length, 1e-12)
    return axis + radius * normals, normals


def bump_height(points, amplitude):
    """Smooth bump pattern over the capsule, in meters."""
    theta = np.arctan2(points[:, 2], points[:, 0])
    return amplitude * np.sin(4.0 * theta) * np.sin(4.0 * np.pi * points[:, 1])


def texture(points):
    """Procedural RGB in [0.1, 0.9] of canonical positions."""
    theta = np.arctan2(points[:, 2], points[:, 0])
    y = points[:, 1]
    rgb = np.stack(
        [
            0.5 + 0.4 * np.sin(3.0 * theta),
            0.5 + 0.4 * np.cos(2.0 * np.pi * y),
            0.5 + 0.4 * np.sin(2.0 * theta + 3.0 * y),
        ],
        axis=1,
    )
    return np.clip(rgb, 0.0, 1.0)


def capsule_weights(vertices):
    """Two-bone weights: the child's share ramps with a smoothstep in y."""
    t = np.clip((vertices[:, 1] - BLEND_START) / (BLEND_END - BLEND_START), 0.0, 1.0)
    child = t * t * (3.0 - 2.0 * t)
    return SkinWeights(np.stack([1.0 - child, child], axis=1))


def capsule_skeleton():
    return Skeleton([-1, 0], np.asarray([ROOT_JOINT, CHILD_JOINT], dtype=np.float64))


def ground_truth_mesh(template, subdivisions=1, amplitude=0.012):
    """Subdivided, re-projected and bumped capsule."""
    vertices, faces = template.vertices, template.faces
    for _ in range(subdivisions):
        vertices, faces = trimesh.remesh.subdivide(vertices, faces)
    surface, normals = capsule_projection(vertices)
    bumped = surface + bump_height(surface, amplitude)[:, None] * normals
    return TemplateMesh(bumped, faces)


def build_ground_truth(config):
    """Coarse template and ground-truth rigged meshes for a config."""
    coarse = capsule_mesh(config["synth_segments"], config["synth_cap_rings"], config["synth_body_rings"])
    skeleton = capsule_skeleton()
    template = RiggedTemplate(coarse, skeleton, capsule_weights(coarse.vertices))

    fine = ground_truth_mesh(coarse, config["synth_subdivisions"], config["synth_bump_amplitude"])
    colors = texture(face_centroids(fine.vertex_tensor(), fine.faces).numpy())
    truth = RiggedTemplate(fine, skeleton, capsule_weights(fine.vertices), colors)
    return template, truth


def render_ground_truth(truth, camera, pose, config):
    """
    Render a ground-truth rig with per-face colors.

    Returns:
        ImagePlane: color, alpha and normal; normals are renormalized on
            pixels with alpha above one half
    """
    transforms = bone_transforms(truth.skeleton, pose.joint_rotations, pose.translation)
    posed = skin_vertices(truth.mesh.vertex_tensor(), truth.weights, transforms)
    frames, valid = build_face_frames(posed, truth.mesh.faces)
    splats = SplatGeometry.fitted(
        truth.mesh.vertex_tensor(), truth.mesh.faces, config["scale_init_factor"], config["epsilon"]
    )
    covariance = build_covariance(lift_rotation(frames, splats.rot2d), splats.full_scale())
    image, _ = rasterize(
        frames.centroid,
        covariance,
        torch.as_tensor(truth.face_colors, dtype=DTYPE),
        frames.R0,
        camera,
        background=config["background"],
        valid=valid,
        tile_size=config["tile_size"],
    )
    inside = image.alpha > 0.5
    length = torch.linalg.vector_norm(image.normal, dim=-1, keepdim=True).clamp_min(1e-12)
    image.normal = torch.where(inside.unsqueeze(-1), image.normal / length, image.normal)
    return image


def turntable_camera(azimuth, resolution):
    eye = np.array(CAMERA_TARGET) + CAMERA_DISTANCE * np.array([math.sin(azimuth), 0.0, math.cos(azimuth)])
    return Camera.look_at(eye, CAMERA_TARGET, (0.0, 1.0, 0.0), CAMERA_FOV, resolution, resolution)


def bend_pose(phase, bend_degrees):
    rotations = np.zeros((2, 3))
    rotations[1, 2] = math.radians(bend_degrees) * math.sin(phase)
    return PoseFrame(rotations, np.zeros(3))


def view_schedule(views, holdout_views):
    """(split, azimuth) pairs: training views on a full turn, held-out ones in between."""
    schedule = [("train", 2.0 * math.pi * k / views) for k in range(views)]
    for i in range(holdout_views):
        k = (i * views) // max(holdout_views, 1)
        schedule.append(("test", 2.0 * math.pi * (k + 0.5) / views))
    return schedule


def synth_scene(out_dir, config=None, seed=0):
    """
    Generate the synthetic dataset.

    Args:
        out_dir (str or Path): Output directory (manifest.json is written here)
        config (dict, optional): Pipeline configuration; synth_* keys size the scene
        seed (int): Seed of the baseline v2v surface sampling

    Returns:
        SynthResult: Manifest, ground truth and the template-to-truth baseline v2v
    """
    config = dict(DEFAULT_CONFIG if config is None else config)
    views = int(config["synth_views"])
    if views < 1:
        raise UsageError("synth_views must be at least 1")
    out_dir = ensure_directory_exists(out_dir)
    frame_dir = ensure_directory_exists(out_dir / "frames")
    resolution = int(config["synth_resolution"])

    template, truth = build_ground_truth(config)
    save_template(out_dir / "template.json", template.mesh, template.skeleton, template.weights)
    save_template(out_dir / "ground_truth.json", truth.mesh, truth.skeleton, truth.weights, truth.face_colors)
    logger.info(f"Template: {template.mesh.face_count} faces, ground truth: {truth.mesh.face_count} faces")

    entries = []
    schedule = view_schedule(views, int(config["synth_holdout_views"]))
    for index, (split, azimuth) in enumerate(schedule):
        camera = turntable_camera(azimuth, resolution)
        pose = bend_pose(azimuth, config["synth_bend_degrees"])
        image = render_ground_truth(truth, camera, pose, config)

        stem = f"{index:03d}"
        write_png(frame_dir / f"color_{stem}.png", image.color, bits=8)
        write_normal_png(frame_dir / f"normal_{stem}.png", image.normal)
        write_png(frame_dir / f"mask_{stem}.png", (image.alpha > 0.5).to(DTYPE), bits=8)
        write_json(frame_dir / f"camera_{stem}.json", camera.to_dict())
        write_json(frame_dir / f"pose_{stem}.json", pose.to_dict())
        entries.append(
            {
                "color": f"frames/color_{stem}.png",
                "normal": f"frames/normal_{stem}.png",
                "mask": f"frames/mask_{stem}.png",
                "camera": f"frames/camera_{stem}.json",
                "pose": f"frames/pose_{stem}.json",
                "split": split,
            }
        )
        if (index + 1) % config["log_every"] == 0 or (index + 1) == len(schedule):
            logger.info(f"Rendered {index + 1}/{len(schedule)} views")

    baseline = metric_v2v(template.mesh, truth.mesh, samples=config["v2v_samples"], seed=seed)
    logger.info(f"Baseline v2v (template vs ground truth): {baseline:.3f} mm")

    manifest_path = write_json(
        out_dir / "manifest.json",
        {
            "version": MANIFEST_VERSION,
            "template": "template.json",
            "ground_truth": "ground_truth.json",
            "units_scale": 1.0,
            "baseline_v2v_mm": baseline,
            "frames": entries,
        },
    )
    return SynthResult(manifest_path, load_manifest(manifest_path), truth, template, baseline)
