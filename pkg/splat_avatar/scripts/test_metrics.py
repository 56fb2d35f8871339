#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the image and mesh metrics.

Usage:
    Run directly: python -m splat_avatar.scripts.test_metrics
"""

import math
import sys

import numpy as np
import pytest
import trimesh

from splat_avatar.scripts.conftest import as_double
from splat_avatar.scripts.geometry import TemplateMesh
from splat_avatar.scripts.losses import ssim
from splat_avatar.scripts.metrics import (
    MetricsReport,
    closest_faces,
    metric_images,
    metric_meshes,
    metric_nc,
    metric_v2v,
    psnr,
)
from splat_avatar.scripts.utils import DataError

SAMPLES = 20000


def sphere(radius=1.0, subdivisions=3):
    mesh = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return TemplateMesh(np.asarray(mesh.vertices), np.asarray(mesh.faces))


def test_identical_meshes():
    mesh = sphere()
    v2v, nc = metric_meshes(mesh, mesh, SAMPLES)
    assert v2v < 1e-6
    assert abs(nc - 1.0) < 1e-9


def test_concentric_spheres_are_one_millimeter_apart():
    v2v = metric_v2v(sphere(1.0), sphere(1.001), SAMPLES)
    assert 0.9 < v2v < 1.1
    assert metric_nc(sphere(1.0), sphere(1.001), SAMPLES) > 0.999


def test_mesh_metrics_are_symmetric():
    a = sphere(1.0, 2)
    b = TemplateMesh(a.vertices * np.array([1.0, 1.02, 0.98]), a.faces)
    assert metric_meshes(a, b, SAMPLES, seed=4) == metric_meshes(b, a, SAMPLES, seed=4)


def test_mesh_metrics_ignore_translation():
    a = sphere(1.0, 2)
    shifted = TemplateMesh(a.vertices + np.array([0.3, -0.1, 2.0]), a.faces)
    assert metric_v2v(a, shifted, SAMPLES) < 1e-6


def test_closest_face_finds_large_faces_with_distant_centroids():
    # one large triangle on z = 0 under a cloud of small triangles at z = 0.5
    vertices = [[-100.0, -100.0, 0.0], [100.0, -100.0, 0.0], [0.0, 100.0, 0.0]]
    faces = [[0, 1, 2]]
    for i in range(20):
        for j in range(10):
            x, y = 49.0 + 0.1 * i, -90.5 + 0.1 * j
            base = len(vertices)
            vertices += [[x, y, 0.5], [x + 0.05, y, 0.5], [x, y + 0.05, 0.5]]
            faces.append([base, base + 1, base + 2])
    mesh = trimesh.Trimesh(vertices=vertices, faces=faces, process=False)
    assert len(mesh.faces) == 201

    distances, nearest = closest_faces(np.array([[50.05, -90.0, 0.1]]), mesh)
    assert distances[0] == pytest.approx(0.1, abs=1e-12)
    assert nearest[0] == 0


def test_empty_mesh_is_rejected():
    with pytest.raises(DataError):
        metric_v2v(sphere(), TemplateMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)))


def test_psnr_examples():
    zeros = as_double(np.zeros((4, 4, 3)))
    assert abs(psnr(zeros, zeros + 0.1) - 20.0) < 1e-9
    assert psnr(zeros, zeros) == math.inf
    with pytest.raises(DataError):
        psnr(zeros, as_double(np.zeros((4, 5, 3))))


def test_image_metrics_match_the_loss_ssim(rng):
    pred = as_double(rng.uniform(size=(16, 16, 3)))
    gt = as_double(rng.uniform(size=(16, 16, 3)))
    value_psnr, value_ssim = metric_images(pred, gt)
    assert math.isfinite(value_psnr)
    assert abs(value_ssim - float(ssim(pred, gt))) < 1e-12

    same_psnr, same_ssim = metric_images(pred, pred)
    assert same_psnr == math.inf
    assert abs(same_ssim - 1.0) < 1e-12


def test_report_encodes_infinity():
    document = MetricsReport(psnr=math.inf, ssim=1.0).to_dict()
    assert document["psnr"] == "inf"
    assert document["ssim"] == 1.0
    assert document["v2v_mm"] is None
    assert document["lpips"] is None


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
