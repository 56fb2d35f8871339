#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Evaluation metrics.

- v2v: bidirectional mean point-to-surface distance in millimeters between
  uniformly sampled surfaces, after aligning the area-weighted centers
  (scales are left untouched)
- NC: bidirectional mean |cos| between the normal at a surface sample and
  the normal of the closest face on the other mesh
- PSNR / SSIM on [0, 1] images (SSIM shared with the training loss)

LPIPS needs a pretrained network and is not computed; reports mark it absent.

Usage:
    Import: from splat_avatar.scripts.metrics import metric_v2v, metric_images, MetricsReport
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import trimesh
import trimesh.proximity
import trimesh.sample

from splat_avatar.scripts.geometry import as_tensor
from splat_avatar.scripts.losses import ssim
from splat_avatar.scripts.utils import DataError

logger = logging.getLogger("splat_avatar.metrics")

QUERY_CHUNK = 8192


@dataclass
class MetricsReport:
    """Evaluation summary. psnr is +inf for identical images."""

    psnr: float = None
    ssim: float = None
    v2v_mm: float = None
    nc: float = None

    def to_dict(self):
        def encode(value):
            if value is None:
                return None
            if math.isinf(value):
                return "inf" if value > 0 else "-inf"
            return float(value)

        return {
            "psnr": encode(self.psnr),
            "ssim": encode(self.ssim),
            "v2v_mm": encode(self.v2v_mm),
            "nc": encode(self.nc),
            "lpips": None,
            "notes": ["lpips not computed: requires a pretrained network"],
        }


def _as_trimesh(mesh):
    if mesh.face_count == 0 or mesh.vertex_count == 0:
        raise DataError("mesh is empty")
    return trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False, validate=False)


def _centered(mesh):
    """Copy translated so that its area-weighted surface centroid is at the origin."""
    areas = mesh.area_faces
    if areas.sum() <= 0:
        raise DataError("mesh has zero surface area")
    center = (mesh.triangles_center * areas[:, None]).sum(axis=0) / areas.sum()
    return trimesh.Trimesh(vertices=mesh.vertices - center, faces=mesh.faces, process=False, validate=False)


def closest_faces(points, mesh):
    """
    Exact closest points on `mesh`.

    Candidate faces are every face whose bounding box reaches within the
    nearest-vertex distance of the query, so large faces with distant
    centroids are never missed.

    Returns:
        tuple: (distances (N,), face indices (N,))
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    distances = np.empty(len(points))
    faces = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), QUERY_CHUNK):
        chunk = points[start:start + QUERY_CHUNK]
        _, gaps, triangle_ids = trimesh.proximity.closest_point(mesh, chunk)
        distances[start:start + len(chunk)] = gaps
        faces[start:start + len(chunk)] = triangle_ids
    return distances, faces


def _sample(mesh, samples, seed):
    points, face_index = trimesh.sample.sample_surface(mesh, samples, seed=seed)
    return np.asarray(points), np.asarray(face_index)


def _ordered(mesh_a, mesh_b):
    """Put the pair in a content-defined order so swapping arguments changes nothing."""
    key_a = (mesh_a.vertex_count, mesh_a.face_count, mesh_a.vertices.tobytes(), mesh_a.faces.tobytes())
    key_b = (mesh_b.vertex_count, mesh_b.face_count, mesh_b.vertices.tobytes(), mesh_b.faces.tobytes())
    return (mesh_a, mesh_b) if key_a <= key_b else (mesh_b, mesh_a)


def surface_distances(mesh_a, mesh_b, samples=100000, seed=0):
    """
    Per-direction sample distances and normal agreement between two meshes.

    Returns:
        dict: distances_ab, distances_ba (meters) and cos_ab, cos_ba (|cos| per sample)
    """
    first, second = _ordered(mesh_a, mesh_b)
    tri_first, tri_second = _centered(_as_trimesh(first)), _centered(_as_trimesh(second))

    points_first, faces_first = _sample(tri_first, samples, seed)
    points_second, faces_second = _sample(tri_second, samples, seed + 1)
    dist_fs, near_fs = closest_faces(points_first, tri_second)
    dist_sf, near_sf = closest_faces(points_second, tri_first)

    normals_first, normals_second = tri_first.face_normals, tri_second.face_normals
    cos_fs = np.abs((normals_first[faces_first] * normals_second[near_fs]).sum(axis=1))
    cos_sf = np.abs((normals_second[faces_second] * normals_first[near_sf]).sum(axis=1))
    return {"distances_ab": dist_fs, "distances_ba": dist_sf, "cos_ab": cos_fs, "cos_ba": cos_sf}


def metric_v2v(mesh_a, mesh_b, samples=100000, seed=0):
    """
    Bidirectional v2v distance in millimeters.

    Args:
        mesh_a, mesh_b (TemplateMesh): Meshes in meters
        samples (int): Surface samples per mesh
        seed (int): Sampling seed

    Returns:
        float: Mean of the two directional mean distances, in mm

    Raises:
        DataError: If either mesh is empty
    """
    return metric_meshes(mesh_a, mesh_b, samples, seed)[0]


def metric_nc(mesh_a, mesh_b, samples=100000, seed=0):
    """Bidirectional mean |cos| of corresponding normals, 1 for identical meshes."""
    return metric_meshes(mesh_a, mesh_b, samples, seed)[1]


def metric_meshes(mesh_a, mesh_b, samples=100000, seed=0):
    """v2v (mm) and NC from one set of samples."""
    result = surface_distances(mesh_a, mesh_b, samples, seed)
    v2v = 1000.0 * 0.5 * (result["distances_ab"].mean() + result["distances_ba"].mean())
    nc = 0.5 * (result["cos_ab"].mean() + result["cos_ba"].mean())
    return float(v2v), float(nc)


def psnr(pred, gt, mask=None):
    """10 log10(1 / MSE); +inf when the images are identical."""
    pred, gt = as_tensor(pred), as_tensor(gt)
    if pred.shape != gt.shape:
        raise DataError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    squared = (pred - gt) ** 2
    if mask is not None:
        keep = torch.as_tensor(mask).bool()
        squared = squared[keep]
    mse = float(squared.mean()) if squared.numel() else 0.0
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def metric_images(pred, gt, mask=None):
    """
    PSNR and SSIM of two (H, W, 3) images in [0, 1].

    Raises:
        DataError: If the shapes differ
    """
    pred, gt = as_tensor(pred).detach(), as_tensor(gt).detach()
    if pred.shape != gt.shape:
        raise DataError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return psnr(pred, gt, mask), float(ssim(pred, gt, mask))
