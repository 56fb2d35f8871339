#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Mesh bookkeeping and the face-local splat frame.

One flat Gaussian is bound to every triangle of the template. This module
computes what the rasterizer needs from a (posed) triangle soup:
- face centroids (splat centers)
- unit face normals (splat thickness axis, also rendered as normal maps)
- orthonormal face frames [R0 = normal, R1 = first edge, R2 = R0 x R1]
- the 3D rotation obtained by turning R1/R2 by a 2D complex rotation
- the covariance R diag(s)^2 R^T

Every batch function works on torch tensors so gradients flow back to the
vertices. The single-face variants validate their inputs and raise.

Usage:
    Import: from splat_avatar.scripts.geometry import build_face_frames, build_covariance
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch
import torch.nn.functional as F
import trimesh

from splat_avatar.config import DTYPE, EPSILON_NORMAL_SCALE
from splat_avatar.scripts.utils import DataError, SplatAvatarError

logger = logging.getLogger("splat_avatar.geometry")

# Faces with a smaller area (m^2) are skipped for the frame they collapse in
DEGENERATE_AREA = 1e-12


class GeometryError(SplatAvatarError):
    """Invalid geometric input."""


class DegenerateFaceError(GeometryError):
    """Triangle area is below DEGENERATE_AREA."""


def as_tensor(values):
    """Convert array-likes to float64 tensors, leaving tensors untouched."""
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


@dataclass
class TemplateMesh:
    """
    Canonical triangle mesh (vertices in meters, faces as vertex index triples).

    Attributes:
        vertices (numpy.ndarray): (V, 3) float64 positions
        faces (numpy.ndarray): (F, 3) int64 vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)

        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError(f"vertices must have shape (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataError(f"faces must have shape (F, 3), got {self.faces.shape}")
        if len(self.faces) == 0:
            raise DataError("mesh has no faces")
        if not np.all(np.isfinite(self.vertices)):
            raise DataError("vertices contain non-finite values")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise DataError("face index out of range")

        f = self.faces
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if np.any(repeated):
            raise DataError(f"{int(repeated.sum())} faces repeat a vertex index")

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def face_count(self):
        return len(self.faces)

    def vertex_tensor(self):
        return torch.as_tensor(self.vertices, dtype=DTYPE)

    def face_tensor(self):
        return torch.as_tensor(self.faces, dtype=torch.long)

    @cached_property
    def face_adjacency(self):
        """(P, 2) int64 pairs of faces sharing an edge."""
        mesh = trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False, validate=False)
        return np.asarray(mesh.face_adjacency, dtype=np.int64).reshape(-1, 2)

    def face_areas(self, vertices=None):
        vertices = self.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
        tri = vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass
class FaceFrame:
    """
    Orthonormal splat frame per face (batched over leading dimensions).

    Columns of matrix() are (R0, R1, R2): face normal, normalized first edge
    and their cross product.
    """

    R0: torch.Tensor
    R1: torch.Tensor
    R2: torch.Tensor
    centroid: torch.Tensor

    def matrix(self):
        return torch.stack([self.R0, self.R1, self.R2], dim=-1)

    def select(self, index):
        return FaceFrame(self.R0[index], self.R1[index], self.R2[index], self.centroid[index])


@dataclass
class SplatGeometry:
    """
    Per-face splat shape: in-plane scales (s2, s3), 2D complex rotation and
    the fixed thickness s1 = epsilon. Opacity is always 1.
    """

    scale: torch.Tensor
    rot2d: torch.Tensor
    epsilon: float = EPSILON_NORMAL_SCALE
    opacity: float = field(default=1.0, init=False)

    def __post_init__(self):
        if torch.any(self.scale <= 0):
            raise GeometryError("splat scales must be positive")
        if torch.any(torch.linalg.vector_norm(self.rot2d, dim=-1) == 0):
            raise GeometryError("undefined in-plane rotation")

    @classmethod
    def fitted(cls, vertices, faces, factor, epsilon=EPSILON_NORMAL_SCALE):
        """
        Splats shaped like their faces.

        The in-plane axes follow the principal directions of each face's
        second moment and the scales are `factor` standard deviations along
        them. Axes a degenerate face does not span get epsilon.

        Args:
            vertices (torch.Tensor): (V, 3) canonical vertices
            faces (torch.Tensor): (F, 3) vertex indices
            factor (float): Standard deviations per scale
            epsilon (float): Thickness s1 and lower bound of s2, s3

        Returns:
            SplatGeometry: (F, 2) scales and (F, 2) unit rotations
        """
        moments, _ = face_second_moments(vertices, faces)
        variances, axes = torch.linalg.eigh(moments)
        scale = factor * variances.flip(-1).clamp_min(0.0).sqrt()
        return cls(scale.clamp_min(epsilon), axes[..., :, 1].contiguous(), epsilon)

    def full_scale(self):
        """(F, 3) scales ordered along (R0, R1', R2')."""
        eps = torch.full_like(self.scale[..., :1], self.epsilon)
        return torch.cat([eps, self.scale], dim=-1)


def _check_face_index(faces, face):
    if not 0 <= face < len(faces):
        raise IndexError(f"face index {face} out of range for {len(faces)} faces")


def face_centroids(posed_vertices, faces):
    """
    Centroids of all faces.

    Args:
        posed_vertices (torch.Tensor): (V, 3) vertex positions
        faces (torch.Tensor): (F, 3) vertex indices

    Returns:
        torch.Tensor: (F, 3) arithmetic means of the three corners
    """
    tri = as_tensor(posed_vertices)[torch.as_tensor(faces, dtype=torch.long)]
    return (tri[:, 0] + tri[:, 1] + tri[:, 2]) / 3.0


def face_centroid(mesh, posed_vertices, face):
    """
    Centroid of a single face of `mesh` evaluated on `posed_vertices`.

    Raises:
        IndexError: If `face` is out of range
        GeometryError: If posed_vertices does not match the mesh
    """
    _check_face_index(mesh.faces, face)
    posed_vertices = as_tensor(posed_vertices)
    if len(posed_vertices) != mesh.vertex_count:
        raise GeometryError(f"expected {mesh.vertex_count} posed vertices, got {len(posed_vertices)}")
    return face_centroids(posed_vertices, mesh.faces[face:face + 1])[0]


def face_normals(posed_vertices, faces):
    """
    Unit normals (v1 - v0) x (v2 - v0) of all faces.

    Args:
        posed_vertices (torch.Tensor): (V, 3) vertex positions
        faces (torch.Tensor): (F, 3) vertex indices

    Returns:
        tuple: (normals (F, 3), valid (F,) bool mask of non-degenerate faces)
    """
    tri = as_tensor(posed_vertices)[torch.as_tensor(faces, dtype=torch.long)]
    cross = torch.linalg.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)
    length = torch.linalg.vector_norm(cross, dim=-1)
    valid = (0.5 * length.detach()) > DEGENERATE_AREA
    normals = cross / length.clamp_min(1e-30).unsqueeze(-1)
    return normals, valid


def face_normal(posed_vertices, face, faces=None):
    """
    Unit normal of a single face.

    Args:
        posed_vertices: (V, 3) positions, or the three corners when `faces` is None
        face (int): Face index into `faces`
        faces (array-like, optional): (F, 3) vertex indices

    Returns:
        torch.Tensor: (3,) unit normal

    Raises:
        DegenerateFaceError: If the triangle area is below DEGENERATE_AREA
    """
    faces = np.arange(3).reshape(1, 3) if faces is None else np.asarray(faces)
    _check_face_index(faces, face)
    normals, valid = face_normals(posed_vertices, faces[face:face + 1])
    if not bool(valid[0]):
        raise DegenerateFaceError(f"degenerate face {face}")
    return normals[0]


def build_face_frames(posed_vertices, faces):
    """
    Orthonormal frames of all faces.

    R0 is the face normal, R1 the normalized edge v1 - v0 and R2 = R0 x R1.

    Returns:
        tuple: (FaceFrame with (F, 3) columns, valid (F,) bool mask)
    """
    posed_vertices = as_tensor(posed_vertices)
    faces = torch.as_tensor(faces, dtype=torch.long)
    tri = posed_vertices[faces]

    R0, valid = face_normals(posed_vertices, faces)
    R1 = F.normalize(tri[:, 1] - tri[:, 0], dim=-1, eps=1e-30)
    R2 = F.normalize(torch.linalg.cross(R0, R1, dim=-1), dim=-1, eps=1e-30)
    centroid = (tri[:, 0] + tri[:, 1] + tri[:, 2]) / 3.0
    return FaceFrame(R0, R1, R2, centroid), valid


def build_face_frame(posed_vertices, face, faces=None):
    """
    Frame of a single face.

    Raises:
        DegenerateFaceError: If the triangle area is below DEGENERATE_AREA
    """
    faces = np.arange(3).reshape(1, 3) if faces is None else np.asarray(faces)
    _check_face_index(faces, face)
    frames, valid = build_face_frames(posed_vertices, faces[face:face + 1])
    if not bool(valid[0]):
        raise DegenerateFaceError(f"degenerate face {face}")
    return frames.select(0)


def face_second_moments(vertices, faces):
    """
    In-plane second moment of every face in its (R1, R2) frame.

    A uniform distribution over a triangle with corners d_i relative to the
    centroid has covariance sum_i d_i d_i^T / 12.

    Returns:
        tuple: ((F, 2, 2) moments, valid (F,) bool mask)
    """
    vertices = as_tensor(vertices).detach()
    frames, valid = build_face_frames(vertices, faces)
    corners = vertices[torch.as_tensor(faces, dtype=torch.long)] - frames.centroid.unsqueeze(1)
    planar = torch.stack(
        [(corners * frames.R1.unsqueeze(1)).sum(-1), (corners * frames.R2.unsqueeze(1)).sum(-1)], dim=-1
    )
    return planar.transpose(-1, -2) @ planar / 12.0, valid


def lift_rotation(frame, rot2d):
    """
    Turn the in-plane axes of a face frame by a complex number x + iy.

    Args:
        frame (FaceFrame): Face frame(s)
        rot2d (torch.Tensor): (..., 2) complex rotation, any nonzero magnitude

    Returns:
        torch.Tensor: (..., 3, 3) rotation with columns
            [R0, cos R1 + sin R2, -sin R1 + cos R2]

    Raises:
        GeometryError: If any rotation is (0, 0)
    """
    rot2d = as_tensor(rot2d)
    magnitude = torch.linalg.vector_norm(rot2d, dim=-1, keepdim=True)
    if torch.any(magnitude == 0):
        raise GeometryError("undefined in-plane rotation")
    c = rot2d / magnitude
    cos, sin = c[..., 0:1], c[..., 1:2]
    axis1 = cos * frame.R1 + sin * frame.R2
    axis2 = -sin * frame.R1 + cos * frame.R2
    return torch.stack([frame.R0, axis1, axis2], dim=-1)


def build_covariance(R, S):
    """
    Covariance R diag(S)^2 R^T.

    Args:
        R (torch.Tensor): (..., 3, 3) rotation
        S (torch.Tensor): (..., 3) positive scales, S[..., k] along column k

    Returns:
        torch.Tensor: (..., 3, 3) symmetric positive-definite matrix

    Raises:
        GeometryError: If any scale is not positive
    """
    R = as_tensor(R)
    S = as_tensor(S)
    if torch.any(S <= 0):
        raise GeometryError("covariance scales must be positive")
    RS = R * S.unsqueeze(-2)
    return RS @ RS.transpose(-1, -2)
