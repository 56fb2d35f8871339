#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the photometric, normal-map and normal-consistency losses.

Usage:
    Run directly: python -m splat_avatar.scripts.test_losses
"""

import math
import sys

import numpy as np
import pytest
import torch
import trimesh

from splat_avatar.scripts.conftest import as_double, random_rotation
from splat_avatar.scripts.geometry import TemplateMesh
from splat_avatar.scripts.losses import (
    LossWeights,
    l1_dssim,
    normal_consistency,
    normal_loss,
    ssim,
    total_loss,
)
from splat_avatar.scripts.utils import DataError, UsageError


def random_image(rng, height=8, width=8):
    return as_double(rng.uniform(0.05, 0.95, size=(height, width, 3)))


def numeric_gradient(fn, tensor, indices, h=1e-6):
    values = []
    flat = tensor.reshape(-1)
    for k in indices:
        original = float(flat[k])
        flat[k] = original + h
        plus = fn(tensor)
        flat[k] = original - h
        minus = fn(tensor)
        flat[k] = original
        values.append((plus - minus) / (2.0 * h))
    return values


def test_identical_images_have_zero_loss(rng):
    image = random_image(rng)
    term = l1_dssim(image, image)
    assert abs(term.value) < 1e-12
    assert abs(float(ssim(image, image)) - 1.0) < 1e-12


def test_constant_offset_pure_l1(rng):
    target = random_image(rng)
    term = l1_dssim(target + 0.1, target, ssim_lambda=0.0)
    assert abs(term.value - 0.1) < 1e-12


def test_shape_mismatch_raises(rng):
    with pytest.raises(DataError):
        l1_dssim(random_image(rng, 8, 8), random_image(rng, 8, 9))


def test_ssim_is_symmetric_and_bounded(rng):
    a, b = random_image(rng), random_image(rng)
    assert abs(float(ssim(a, b)) - float(ssim(b, a))) < 1e-12
    assert float(ssim(a, b)) < 1.0


def test_masked_loss_ignores_background(rng):
    target = random_image(rng)
    pred = target.clone()
    mask = torch.zeros(8, 8, dtype=torch.bool)
    mask[2:6, 2:6] = True
    pred[~mask] = 0.0
    assert abs(l1_dssim(pred, target, ssim_lambda=0.0, mask=mask).value) < 1e-12


@pytest.mark.parametrize("ssim_lambda", [0.0, 0.2, 1.0])
def test_l1_dssim_gradient(rng, ssim_lambda):
    pred, target = random_image(rng), random_image(rng)
    term = l1_dssim(pred, target, ssim_lambda)
    indices = rng.choice(pred.numel(), size=20, replace=False)
    numeric = numeric_gradient(lambda p: l1_dssim(p, target, ssim_lambda).value, pred.clone(), indices)
    analytic = term.gradient.reshape(-1)[indices]
    for got, expected in zip(analytic.tolist(), numeric):
        assert abs(got - expected) <= 1e-4 * abs(expected) + 1e-8


def test_normal_loss_gradient(rng):
    pred = torch.nn.functional.normalize(as_double(rng.normal(size=(8, 8, 3))), dim=-1)
    target = torch.nn.functional.normalize(as_double(rng.normal(size=(8, 8, 3))), dim=-1)
    term = normal_loss(pred, target)
    assert abs(normal_loss(target, target).value) < 1e-12
    indices = rng.choice(pred.numel(), size=20, replace=False)
    numeric = numeric_gradient(lambda p: normal_loss(p, target).value, pred.clone(), indices)
    for got, expected in zip(term.gradient.reshape(-1)[indices].tolist(), numeric):
        assert abs(got - expected) <= 1e-4 * abs(expected) + 1e-8


def test_normal_consistency_examples():
    flat = TemplateMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    assert abs(normal_consistency(flat.vertices, flat).value) < 1e-12

    # neighbors with opposite winding have opposite normals
    folded = TemplateMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]], [[0, 1, 2], [1, 2, 3]])
    assert abs(normal_consistency(folded.vertices, folded).value - 2.0) < 1e-12


def test_normal_consistency_matches_brute_force_on_icosphere(rng):
    sphere = trimesh.creation.icosphere(subdivisions=2)
    vertices = np.asarray(sphere.vertices) + 0.01 * rng.normal(size=sphere.vertices.shape)
    mesh = TemplateMesh(vertices, np.asarray(sphere.faces))
    value = normal_consistency(vertices, mesh).value

    tri = vertices[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    edges = {}
    for f, face in enumerate(mesh.faces):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            edges.setdefault(tuple(sorted((face[a], face[b]))), []).append(f)
    pairs = [faces for faces in edges.values() if len(faces) == 2]
    expected = np.mean([1.0 - normals[i] @ normals[j] for i, j in pairs])
    assert abs(value - expected) < 1e-12


def test_normal_consistency_gradient_and_rotation_invariance(rng):
    sphere = trimesh.creation.icosphere(subdivisions=1)
    vertices = as_double(np.asarray(sphere.vertices) + 0.05 * rng.normal(size=sphere.vertices.shape))
    mesh = TemplateMesh(vertices.numpy(), np.asarray(sphere.faces))
    term = normal_consistency(vertices, mesh)

    indices = rng.choice(vertices.numel(), size=15, replace=False)
    numeric = numeric_gradient(lambda v: normal_consistency(v, mesh).value, vertices.clone(), indices)
    for got, expected in zip(term.gradient.reshape(-1)[indices].tolist(), numeric):
        assert abs(got - expected) <= 1e-4 * abs(expected) + 1e-8

    Q = as_double(random_rotation(rng))
    rotated = normal_consistency(vertices @ Q.T + as_double([1.0, -2.0, 0.5]), mesh)
    assert abs(rotated.value - term.value) < 1e-12


def test_total_loss_components_and_superposition(rng):
    sphere = trimesh.creation.icosphere(subdivisions=1)
    vertices = as_double(np.asarray(sphere.vertices) + 0.05 * rng.normal(size=sphere.vertices.shape))
    mesh = TemplateMesh(vertices.numpy(), np.asarray(sphere.faces))
    pred, target = random_image(rng), random_image(rng)
    pred_n = torch.nn.functional.normalize(as_double(rng.normal(size=(8, 8, 3))), dim=-1)
    target_n = torch.nn.functional.normalize(as_double(rng.normal(size=(8, 8, 3))), dim=-1)

    weights = LossWeights(ssim_lambda=0.2, w_photo=1.0, w_normal=0.5, w_nc=0.01)
    term = total_loss(pred, target, pred_n, target_n, vertices, mesh, weights)

    rgb = l1_dssim(pred, target, 0.2)
    nrm = normal_loss(pred_n, target_n, 0.2)
    nc = normal_consistency(vertices, mesh)
    assert abs(term.value - (rgb.value + 0.5 * nrm.value + 0.01 * nc.value)) < 1e-12
    assert abs(term.components["l_rgb"] - rgb.value) < 1e-12
    assert torch.allclose(term.gradient["pred_color"], rgb.gradient, atol=1e-14)
    assert torch.allclose(term.gradient["pred_normal"], 0.5 * nrm.gradient, atol=1e-14)
    assert torch.allclose(term.gradient["posed_vertices"], 0.01 * nc.gradient, atol=1e-14)


def test_missing_normal_target_drops_term(rng):
    sphere = trimesh.creation.icosphere(subdivisions=1)
    mesh = TemplateMesh(np.asarray(sphere.vertices), np.asarray(sphere.faces))
    pred, target = random_image(rng), random_image(rng)
    term = total_loss(pred, target, pred, None, mesh.vertices, mesh, LossWeights())
    assert term.components["l_normal"] == 0.0
    assert float(term.gradient["pred_normal"].abs().max()) == 0.0

    ablated = LossWeights(w_normal=0.0)
    term = total_loss(pred, target, pred, target, mesh.vertices, mesh, ablated)
    assert term.components["l_normal"] == 0.0


def test_loss_weights_validation():
    with pytest.raises(UsageError):
        LossWeights(ssim_lambda=1.5)
    with pytest.raises(UsageError):
        LossWeights(w_nc=-1.0)
    assert math.isclose(LossWeights.from_config({"ssim_lambda": 0.3, "w_photo": 1.0, "w_normal": 0.0,
                                                 "w_nc": 0.01}).ssim_lambda, 0.3)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
