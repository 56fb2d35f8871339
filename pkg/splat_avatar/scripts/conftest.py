#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Shared pytest fixtures for the Splat Avatar test scripts.

Models built here use a small hash grid so that every test runs on CPU in
seconds; the algorithms are the same as with the default grid.
"""

import logging
import sys

import numpy as np
import pytest
import torch

from splat_avatar.config import DEFAULT_CONFIG, DTYPE
from splat_avatar.scripts.avatar_model import BoundSplatModel
from splat_avatar.scripts.splatting import Camera
from splat_avatar.scripts.synth_scene import capsule_mesh, capsule_skeleton, capsule_weights

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)

SMALL_GRID = {
    "hash_levels": 4,
    "hash_log2_table_size": 10,
    "hash_features": 2,
    "hash_base_resolution": 4,
    "head_hidden": 16,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full synth/train/eval runs (deselect with -m 'not slow')")


def small_config(**overrides):
    """DEFAULT_CONFIG with a small hash grid and a coarse capsule."""
    config = dict(DEFAULT_CONFIG)
    config.update(SMALL_GRID)
    config.update(
        {
            "synth_segments": 12,
            "synth_cap_rings": 3,
            "synth_body_rings": 5,
            "synth_resolution": 32,
            "synth_views": 4,
            "synth_holdout_views": 1,
            "v2v_samples": 4000,
        }
    )
    config.update(overrides)
    return config


def random_triangles(rng, count, min_area=1e-3):
    """(count, 3, 3) random triangles with area above min_area."""
    triangles = []
    while len(triangles) < count:
        tri = rng.normal(size=(3, 3))
        area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
        if area > min_area:
            triangles.append(tri)
    return np.stack(triangles)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def front_camera(width=8, height=8, focal=10.0):
    """Identity-pose camera looking down +z."""
    return Camera(np.eye(4), focal, focal, width / 2.0, height / 2.0, width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def capsule_rig():
    mesh = capsule_mesh(12, 3, 5)
    return mesh, capsule_skeleton(), capsule_weights(mesh.vertices)


@pytest.fixture
def capsule_model(capsule_rig, config):
    mesh, skeleton, weights = capsule_rig
    return BoundSplatModel(mesh, skeleton, weights, config, seed=0, frame_count=2)


@pytest.fixture
def capsule_camera():
    return Camera.look_at((0.0, 0.5, 2.0), (0.0, 0.5, 0.0), (0.0, 1.0, 0.0), 40.0, 24, 24)


def as_double(values):
    return torch.as_tensor(np.asarray(values), dtype=DTYPE)
