#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Export of a trained avatar as a rigged, colored mesh.

The mesh keeps the template topology: canonical vertices plus the learned
displacement, the optimized joint positions, the original skin weights and
one RGB per face from the color field at the face centroid.

Usage:
    Import: from splat_avatar.scripts.export_mesh import export_colored_mesh
"""

import logging
from pathlib import Path

import numpy as np
import torch

from splat_avatar.scripts.geometry import TemplateMesh
from splat_avatar.scripts.skinning import Skeleton
from splat_avatar.scripts.templates import RiggedTemplate, save_obj, save_template, template_document
from splat_avatar.scripts.utils import write_json

logger = logging.getLogger("splat_avatar.export_mesh")


def colored_template(model):
    """RiggedTemplate of the model's current canonical state."""
    with torch.no_grad():
        vertices = model.canonical_vertices().numpy().copy()
        colors = model.face_colors().numpy().copy()
        joints = model.joints.detach().numpy().copy()
    mesh = TemplateMesh(vertices, model.mesh.faces)
    skeleton = Skeleton(model.skeleton.parents, joints)
    return RiggedTemplate(mesh, skeleton, model.weights, colors)


def export_colored_mesh(model, path):
    """
    Write the displaced canonical mesh with per-face colors and the rig.

    A .json path gets one template document. An .obj path gets the geometry
    plus a `<name>.rig.json` sidecar with joints, parents, weights and face
    colors, readable by load_template.

    Args:
        model (BoundSplatModel): Trained or fresh model
        path (str or Path): Destination file

    Returns:
        Path: Destination path
    """
    path = Path(path)
    exported = colored_template(model)
    if path.suffix.lower() == ".obj":
        save_obj(path, exported.mesh)
        document = template_document(exported.mesh, exported.skeleton, exported.weights, exported.face_colors)
        sidecar = {key: document[key] for key in ("parents", "joints", "weights", "face_colors")}
        write_json(path.with_suffix(".rig.json"), sidecar)
    else:
        save_template(path, exported.mesh, exported.skeleton, exported.weights, exported.face_colors)

    displacement = np.linalg.norm(exported.mesh.vertices - model.mesh.vertices, axis=1)
    logger.info(f"Exported {exported.mesh.face_count} colored faces to {path.name} "
                f"(max displacement {1000.0 * displacement.max():.2f} mm)")
    return path
