#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
File formats of the avatar pipeline.

Template (single JSON document):
    {"format": "splat-avatar-template", "version": 1,
     "vertices": [[x, y, z], ...], "faces": [[i, j, k], ...],
     "parents": [-1, 0, ...], "joints": [[x, y, z], ...],
     "weights": [[w_0, ..., w_nb-1], ...],
     "face_colors": [[r, g, b], ...]            # optional
    }
A geometry-only OBJ is accepted too, with the rig read from a JSON file
holding the same parents/joints/weights keys (default: `<name>.rig.json`).

Dataset manifest (JSON):
    {"version": 1, "template": "template.json", "units_scale": 1.0,
     "frames": [{"color": ..., "normal": ..., "mask": ..., "camera": ...,
                 "pose": ..., "split": "train" | "test"}, ...]}
Paths are relative to the manifest. Camera and pose files hold Camera.to_dict()
and PoseFrame.to_dict().

Usage:
    Import: from splat_avatar.scripts.templates import load_template, load_manifest
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import trimesh
import trimesh.exchange.obj

from splat_avatar.config import DTYPE, MANIFEST_VERSION, TEMPLATE_FORMAT, TEMPLATE_VERSION
from splat_avatar.scripts.geometry import TemplateMesh
from splat_avatar.scripts.skinning import PoseFrame, Skeleton, SkinWeights
from splat_avatar.scripts.splatting import Camera
from splat_avatar.scripts.training import TrainingFrame
from splat_avatar.scripts.utils import DataError, atomic_write_bytes, read_json, read_normal_png, read_png, write_json

logger = logging.getLogger("splat_avatar.templates")

TEMPLATE_KEYS = ("vertices", "faces", "parents", "joints", "weights")


@dataclass
class RiggedTemplate:
    """Template mesh with its rig and optional per-face colors."""

    mesh: TemplateMesh
    skeleton: Skeleton
    weights: SkinWeights
    face_colors: np.ndarray = None


def _field(document, key, source):
    if key not in document:
        raise DataError(f"{source}: missing field '{key}'")
    return document[key]


def _array(document, key, source, dtype):
    try:
        return np.asarray(_field(document, key, source), dtype=dtype)
    except (TypeError, ValueError) as e:
        raise DataError(f"{source}: field '{key}' is malformed: {e}") from e


def _build_rig(mesh, document, source):
    parents = _array(document, "parents", source, np.int64).reshape(-1)
    joints = _array(document, "joints", source, np.float64)
    skeleton = Skeleton(parents.tolist(), joints)
    weights = SkinWeights.from_dense(_array(document, "weights", source, np.float64))
    if weights.vertex_count != mesh.vertex_count:
        raise DataError(f"{source}: field 'weights' has {weights.vertex_count} rows for {mesh.vertex_count} vertices")
    if weights.joint_count != skeleton.joint_count:
        raise DataError(f"{source}: field 'weights' has {weights.joint_count} columns for {skeleton.joint_count} joints")
    return skeleton, weights


def _face_colors(mesh, document, source):
    if "face_colors" not in document:
        return None
    face_colors = _array(document, "face_colors", source, np.float64)
    if face_colors.shape != (mesh.face_count, 3):
        raise DataError(f"{source}: field 'face_colors' must have shape ({mesh.face_count}, 3)")
    return face_colors


def template_document(mesh, skeleton, weights, face_colors=None):
    document = {
        "format": TEMPLATE_FORMAT,
        "version": TEMPLATE_VERSION,
        "vertices": mesh.vertices.tolist(),
        "faces": mesh.faces.tolist(),
        "parents": list(skeleton.parents),
        "joints": np.asarray(skeleton.rest_joints).tolist(),
        "weights": weights.weights.tolist(),
    }
    if face_colors is not None:
        document["face_colors"] = np.asarray(face_colors, dtype=np.float64).tolist()
    return document


def save_template(path, mesh, skeleton, weights, face_colors=None):
    """
    Write a rigged template JSON.

    Args:
        path (str or Path): Destination .json file
        mesh (TemplateMesh): Geometry
        skeleton (Skeleton): Rig joints and parents
        weights (SkinWeights): Skin weights
        face_colors (array-like, optional): (F, 3) RGB per face

    Returns:
        Path: Destination path
    """
    return write_json(path, template_document(mesh, skeleton, weights, face_colors))


def _load_obj(path):
    try:
        loaded = trimesh.load(str(path), file_type="obj", process=False, force="mesh")
    except Exception as e:
        raise DataError(f"{path}: could not parse OBJ: {e}") from e
    return TemplateMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def _scaled(template, units_scale):
    if units_scale == 1.0:
        return template
    mesh = TemplateMesh(template.mesh.vertices * units_scale, template.mesh.faces)
    skeleton = Skeleton(template.skeleton.parents, template.skeleton.rest_joints * units_scale)
    return RiggedTemplate(mesh, skeleton, template.weights, template.face_colors)


def load_template(path, rig_path=None, units_scale=1.0):
    """
    Load a rigged template from JSON, or from OBJ plus a rig JSON.

    Args:
        path (str or Path): .json template or .obj geometry
        rig_path (str or Path, optional): Rig JSON for OBJ input
        units_scale (float): Meters per file unit, applied to vertices and joints

    Returns:
        RiggedTemplate: Validated mesh, skeleton, weights and optional colors

    Raises:
        DataError: On missing files or schema violations (the message names the field)
        SkeletonError: If the parents do not form a tree rooted at joint 0
        InvalidSkinWeightsError: If a weight row does not sum to one
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Template not found: {path}")

    if path.suffix.lower() == ".obj":
        mesh = _load_obj(path)
        rig_path = Path(rig_path) if rig_path else path.with_suffix(".rig.json")
        document = read_json(rig_path)
        skeleton, weights = _build_rig(mesh, document, str(rig_path))
        face_colors = _face_colors(mesh, document, str(rig_path))
        logger.info(f"Loaded OBJ template {path.name}: {mesh.vertex_count} vertices, {mesh.face_count} faces")
        return _scaled(RiggedTemplate(mesh, skeleton, weights, face_colors), units_scale)

    document = read_json(path)
    source = str(path)
    if document.get("format", TEMPLATE_FORMAT) != TEMPLATE_FORMAT:
        raise DataError(f"{source}: field 'format' is '{document.get('format')}', expected '{TEMPLATE_FORMAT}'")
    if int(document.get("version", TEMPLATE_VERSION)) > TEMPLATE_VERSION:
        raise DataError(f"{source}: field 'version' {document['version']} is newer than supported")
    for key in TEMPLATE_KEYS:
        _field(document, key, source)

    mesh = TemplateMesh(_array(document, "vertices", source, np.float64), _array(document, "faces", source, np.int64))
    skeleton, weights = _build_rig(mesh, document, source)
    face_colors = _face_colors(mesh, document, source)
    logger.info(f"Loaded template {path.name}: {mesh.vertex_count} vertices, {mesh.face_count} faces, "
                f"{skeleton.joint_count} joints")
    return _scaled(RiggedTemplate(mesh, skeleton, weights, face_colors), units_scale)


def save_obj(path, mesh):
    """Write geometry only as OBJ."""
    exported = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    text = trimesh.exchange.obj.export_obj(exported, include_normals=False, include_texture=False)
    return atomic_write_bytes(path, text.encode("utf-8"))


def load_mesh(path):
    """Geometry of a template JSON or a plain OBJ (no rig needed)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Mesh not found: {path}")
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    document = read_json(path)
    source = str(path)
    return TemplateMesh(_array(document, "vertices", source, np.float64), _array(document, "faces", source, np.int64))


def load_camera(path):
    return Camera.from_dict(read_json(path))


def load_pose(path):
    return PoseFrame.from_dict(read_json(path))


def load_poses(path):
    """Pose sequence: a JSON list of PoseFrame documents, or {"poses": [...]}."""
    document = read_json(path)
    if isinstance(document, dict):
        document = _field(document, "poses", str(path))
    if not isinstance(document, list) or not document:
        raise DataError(f"{path}: expected a nonempty list of poses")
    return [PoseFrame.from_dict(entry) for entry in document]


@dataclass
class FrameEntry:
    """Resolved file paths of one manifest frame."""

    color: Path
    camera: Path
    pose: Path
    normal: Path = None
    mask: Path = None
    split: str = "train"


@dataclass
class DatasetManifest:
    """
    Validated dataset description.

    Attributes:
        root (Path): Directory the relative paths are resolved against
        template (Path): Rigged template file
        frames (list of FrameEntry): Frames in optimization order
        units_scale (float): Meters per template file unit (cameras and poses are in meters)
        baseline_v2v_mm (float, optional): Template-to-truth v2v recorded at generation
        ground_truth (Path, optional): Ground-truth canonical mesh
    """

    root: Path
    template: Path
    frames: list = field(default_factory=list)
    units_scale: float = 1.0
    baseline_v2v_mm: float = None
    ground_truth: Path = None

    def split(self, name):
        return [frame for frame in self.frames if frame.split == name]


def _resolve(root, value, key, index):
    if value is None:
        return None
    path = root / value
    if not path.exists():
        raise DataError(f"frame {index}: {key} file not found: {path}")
    return path


def load_manifest(path):
    """
    Load and validate a dataset manifest before any compute.

    Every referenced file must exist, and the optional normal and mask streams
    must be present for all frames or for none.

    Raises:
        DataError: On schema violations, missing files or inconsistent streams
    """
    path = Path(path)
    document = read_json(path)
    source = str(path)
    if int(document.get("version", MANIFEST_VERSION)) > MANIFEST_VERSION:
        raise DataError(f"{source}: field 'version' {document['version']} is newer than supported")
    root = path.parent
    frames_doc = _field(document, "frames", source)
    if not isinstance(frames_doc, list) or not frames_doc:
        raise DataError(f"{source}: field 'frames' must be a nonempty list")

    frames = []
    for index, entry in enumerate(frames_doc):
        for key in ("color", "camera", "pose"):
            if key not in entry:
                raise DataError(f"{source}: frame {index} is missing field '{key}'")
        frames.append(
            FrameEntry(
                color=_resolve(root, entry["color"], "color", index),
                camera=_resolve(root, entry["camera"], "camera", index),
                pose=_resolve(root, entry["pose"], "pose", index),
                normal=_resolve(root, entry.get("normal"), "normal", index),
                mask=_resolve(root, entry.get("mask"), "mask", index),
                split=entry.get("split", "train"),
            )
        )

    for key in ("normal", "mask"):
        present = sum(getattr(frame, key) is not None for frame in frames)
        if 0 < present < len(frames):
            raise DataError(f"{source}: {key} stream has {present} files for {len(frames)} frames")

    template = root / _field(document, "template", source)
    if not template.exists():
        raise DataError(f"{source}: template file not found: {template}")
    ground_truth = document.get("ground_truth")
    manifest = DatasetManifest(
        root=root,
        template=template,
        frames=frames,
        units_scale=float(document.get("units_scale", 1.0)),
        baseline_v2v_mm=document.get("baseline_v2v_mm"),
        ground_truth=None if ground_truth is None else root / ground_truth,
    )
    logger.info(f"Loaded manifest {path.name}: {len(frames)} frames "
                f"({len(manifest.split('train'))} train, {len(manifest.split('test'))} test)")
    return manifest


def load_frames(manifest, split="train"):
    """
    Read the images, cameras and poses of one split into TrainingFrames.

    Frame indices count the frames of the split in manifest order.
    """
    frames = []
    for index, entry in enumerate(manifest.split(split)):
        image = read_png(entry.color)
        if image.ndim != 3:
            raise DataError(f"{entry.color}: expected an RGB image")
        camera = load_camera(entry.camera)
        if image.shape[:2] != (camera.height, camera.width):
            raise DataError(f"{entry.color}: image is {image.shape[1]}x{image.shape[0]}, "
                            f"camera expects {camera.width}x{camera.height}")
        pose = load_pose(entry.pose)
        normal = None if entry.normal is None else torch.as_tensor(read_normal_png(entry.normal), dtype=DTYPE)
        mask = None
        if entry.mask is not None:
            mask_image = read_png(entry.mask)
            if mask_image.ndim == 3:
                mask_image = mask_image[..., 0]
            mask = torch.as_tensor(mask_image > 0.5)
        frames.append(
            TrainingFrame(
                index=index,
                image=torch.as_tensor(image, dtype=DTYPE),
                camera=camera,
                pose=pose,
                normal=normal,
                mask=mask,
            )
        )
    return frames
