#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Mesh-bound splat avatar.

BoundSplatModel owns every trainable and frozen quantity of the avatar and
runs the per-frame pipeline:

    canonical vertices -> + displacement field -> LBS with the frame pose
    -> face frames, centroids, normals -> covariances -> one 6-channel render

Trainable: log-scales (s2, s3) per face, displacement field, color field,
joint positions and optional per-frame pose offsets. Frozen buffers: the
in-plane rotation of every splat and its opacity (always 1). Skin weights
are plain data.

Usage:
    Import: from splat_avatar.scripts.avatar_model import BoundSplatModel, render_avatar
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from splat_avatar.config import DEFAULT_CONFIG, DTYPE
from splat_avatar.scripts.fields import ColorField, DisplacementField, FreeDisplacement, HashGridConfig
from splat_avatar.scripts.geometry import (
    SplatGeometry,
    build_covariance,
    build_face_frames,
    face_centroids,
    lift_rotation,
)
from splat_avatar.scripts.skinning import PoseFrame, bone_transforms, skin_vertices
from splat_avatar.scripts.splatting import ImagePlane, RasterCache, rasterize
from splat_avatar.scripts.utils import DataError

logger = logging.getLogger("splat_avatar.avatar_model")


@dataclass
class RenderResult:
    """Output of one render: images, the posed mesh and the raster cache."""

    image: ImagePlane
    posed_vertices: torch.Tensor
    cache: RasterCache


class BoundSplatModel(nn.Module):
    """
    One flat Gaussian per template face, driven by the skeleton.

    Args:
        mesh (TemplateMesh): Canonical template
        skeleton (Skeleton): Rig with rest joints
        weights (SkinWeights): Per-vertex skin weights
        config (dict): Pipeline configuration (see config.DEFAULT_CONFIG)
        seed (int): Initialization seed of the fields
        frame_count (int): Number of training frames with refinable poses
        grid (HashGridConfig, optional): Field layout; derived from the mesh
            bounds when omitted
    """

    def __init__(self, mesh, skeleton, weights, config=None, seed=0, frame_count=0, grid=None):
        super().__init__()
        self.config = dict(DEFAULT_CONFIG if config is None else config)
        if weights.vertex_count != mesh.vertex_count:
            raise DataError(f"{weights.vertex_count} weight rows for {mesh.vertex_count} vertices")
        if weights.joint_count != skeleton.joint_count:
            raise DataError(f"{weights.joint_count} weight columns for {skeleton.joint_count} joints")

        self.mesh = mesh
        self.skeleton = skeleton
        self.weights = weights
        self.epsilon = float(self.config["epsilon"])
        self.seed = int(seed)

        self._register_canonical()
        self._register_splats()
        self._register_fields(grid)
        self._register_poses(frame_count)

    def _register_canonical(self):
        self.register_buffer("template_vertices", self.mesh.vertex_tensor())
        self.register_buffer("template_faces", self.mesh.face_tensor())
        self.register_buffer("template_centroids", face_centroids(self.template_vertices, self.template_faces))
        self.joints = nn.Parameter(torch.as_tensor(self.skeleton.rest_joints, dtype=DTYPE).clone())

    def _register_splats(self):
        splats = SplatGeometry.fitted(
            self.template_vertices, self.template_faces, self.config["scale_init_factor"], self.epsilon
        )
        self.log_scale = nn.Parameter(torch.log(splats.scale).clone())
        self.register_buffer("rot2d", splats.rot2d.clone())
        self.register_buffer("opacity", torch.ones(self.mesh.face_count, dtype=DTYPE))

    def _register_fields(self, grid):
        if grid is None:
            grid = HashGridConfig.enclosing(
                self.mesh.vertices,
                padding=self.config["hash_aabb_padding"],
                levels=self.config["hash_levels"],
                log2_table_size=self.config["hash_log2_table_size"],
                features_per_entry=self.config["hash_features"],
                base_resolution=self.config["hash_base_resolution"],
                growth=self.config["hash_growth"],
            )
        self.grid = grid
        hidden = self.config["head_hidden"]
        if self.config["displacement_mode"] == "free":
            self.displacement_field = FreeDisplacement(self.mesh.vertex_count)
        else:
            self.displacement_field = DisplacementField(grid, hidden, 3, seed=self.seed)
        self.color_field = ColorField(grid, hidden, 3, seed=self.seed + 1)

    def _register_poses(self, frame_count):
        joint_count = self.skeleton.joint_count
        self.frame_count = int(frame_count)
        self.pose_rotations = nn.Parameter(torch.zeros(self.frame_count, joint_count, 3, dtype=DTYPE))
        self.pose_translations = nn.Parameter(torch.zeros(self.frame_count, 3, dtype=DTYPE))

    def scales(self):
        """(F, 2) in-plane scales s2, s3."""
        return torch.exp(self.log_scale)

    def displacements(self):
        return self.displacement_field(self.template_vertices)

    def canonical_vertices(self):
        """Template vertices plus the displacement field."""
        return self.template_vertices + self.displacements()

    def face_colors(self):
        """(F, 3) RGB of the color field at canonical face centroids."""
        return self.color_field(self.template_centroids)

    def frame_pose(self, pose, frame_index=None):
        """Joint rotations and translation of `pose` plus the frame's refinement offset."""
        rotations = torch.as_tensor(pose.joint_rotations, dtype=DTYPE)
        translation = torch.as_tensor(pose.translation, dtype=DTYPE)
        if frame_index is not None and 0 <= frame_index < self.frame_count:
            rotations = rotations + self.pose_rotations[frame_index]
            translation = translation + self.pose_translations[frame_index]
        return rotations, translation

    def refined_pose(self, pose, frame_index):
        """PoseFrame with the refinement offset of `frame_index` folded in."""
        rotations, translation = self.frame_pose(pose, frame_index)
        return PoseFrame(rotations.detach().numpy().copy(), translation.detach().numpy().copy())

    def posed_vertices(self, pose, frame_index=None, canonical=None):
        rotations, translation = self.frame_pose(pose, frame_index)
        transforms = bone_transforms(self.skeleton, rotations, translation, rest_joints=self.joints)
        if canonical is None:
            canonical = self.canonical_vertices()
        return skin_vertices(canonical, self.weights, transforms)

    def splat_parameters(self, posed_vertices):
        """Centers, covariances, normals and validity of every face splat."""
        frames, valid = build_face_frames(posed_vertices, self.template_faces)
        rotation = lift_rotation(frames, self.rot2d)
        scale = torch.cat([torch.full_like(self.log_scale[:, :1], self.epsilon), self.scales()], dim=-1)
        covariance = build_covariance(rotation, scale)
        return frames.centroid, covariance, frames.R0, valid

    def render(self, camera, pose, background=None, frame_index=None):
        """
        Render color, alpha and normal images of the avatar.

        Args:
            camera (Camera): Target camera
            pose (PoseFrame): Skeletal pose
            background (sequence, optional): RGB background, config default otherwise
            frame_index (int, optional): Training frame whose pose offset applies

        Returns:
            RenderResult: Images, posed vertices and the raster cache
        """
        if background is None:
            background = self.config["background"]
        posed = self.posed_vertices(pose, frame_index)
        centers, covariance, normals, valid = self.splat_parameters(posed)
        image, cache = rasterize(
            centers,
            covariance,
            self.face_colors(),
            normals,
            camera,
            background=background,
            valid=valid,
            opacity=self.opacity,
            tile_size=self.config["tile_size"],
        )
        return RenderResult(image=image, posed_vertices=posed, cache=cache)

    def param_groups(self):
        """Trainable parameters by optimizer group."""
        return {
            "scale": {"log_scale": self.log_scale},
            "displacement": {f"displacement_field.{k}": v for k, v in self.displacement_field.named_parameters()},
            "color": {f"color_field.{k}": v for k, v in self.color_field.named_parameters()},
            "joints": {"joints": self.joints},
            "pose": {"pose_rotations": self.pose_rotations, "pose_translations": self.pose_translations},
        }

    def metadata(self):
        """Non-tensor settings needed to rebuild the model."""
        return {
            "epsilon": self.epsilon,
            "seed": self.seed,
            "frame_count": self.frame_count,
            "grid": self.grid.to_dict(),
            "displacement_mode": self.config["displacement_mode"],
            "head_hidden": self.config["head_hidden"],
        }


def render_avatar(model, camera, pose, background=None, frame_index=None):
    """Render `model` in `pose` from `camera`; see BoundSplatModel.render."""
    return model.render(camera, pose, background, frame_index)
