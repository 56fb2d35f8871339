#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Skeleton, per-frame bone transforms and forward linear blend skinning.

Conventions:
- Joint rotations are intrinsic XYZ Euler angles in radians,
  R = Rx(a) @ Ry(b) @ Rz(c). Joint 0 carries the world rotation, every other
  joint the rotation relative to its parent.
- Each joint rotates about its rest position. Bone transforms map canonical
  points straight to posed space, so the identity pose gives identity bones.
- Skin weights keep at most MAX_INFLUENCES nonzeros per vertex.

Usage:
    Import: from splat_avatar.scripts.skinning import bone_transforms, skin_vertices
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from splat_avatar.config import DTYPE
from splat_avatar.scripts.geometry import as_tensor
from splat_avatar.scripts.utils import DataError

logger = logging.getLogger("splat_avatar.skinning")

MAX_INFLUENCES = 4
WEIGHT_TOLERANCE = 1e-4


class SkeletonError(DataError):
    """Parent graph is not a tree rooted at joint 0."""


class InvalidSkinWeightsError(DataError):
    """Weight rows are negative or do not sum to one."""


def topological_order(parents):
    """
    Order joints so that every parent precedes its children.

    Args:
        parents (sequence of int): Parent index per joint, -1 for the root

    Returns:
        list: Joint indices in processing order

    Raises:
        SkeletonError: If the graph is not a tree rooted at joint 0
    """
    parents = [int(p) for p in parents]
    if not parents:
        raise SkeletonError("skeleton has no joints")
    if parents[0] != -1:
        raise SkeletonError("joint 0 must be the root (parent -1)")

    children = {i: [] for i in range(len(parents))}
    for joint, parent in enumerate(parents[1:], start=1):
        if parent == -1:
            raise SkeletonError(f"joint {joint} is a second root")
        if not 0 <= parent < len(parents):
            raise SkeletonError(f"joint {joint} has out-of-range parent {parent}")
        children[parent].append(joint)

    order, stack = [], [0]
    while stack:
        joint = stack.pop()
        order.append(joint)
        stack.extend(reversed(children[joint]))

    if len(order) != len(parents):
        missing = sorted(set(range(len(parents))) - set(order))
        raise SkeletonError(f"joints {missing} are not reachable from the root (cycle in parent graph)")
    return order


@dataclass
class Skeleton:
    """
    Kinematic tree with rest joint positions in canonical space.

    Attributes:
        parents (list): Parent index per joint, -1 for the root at index 0
        rest_joints (numpy.ndarray): (n_b, 3) rest positions in meters
    """

    parents: list
    rest_joints: np.ndarray

    def __post_init__(self):
        self.parents = [int(p) for p in self.parents]
        self.rest_joints = np.ascontiguousarray(self.rest_joints, dtype=np.float64)
        if self.rest_joints.shape != (len(self.parents), 3):
            raise SkeletonError(
                f"rest_joints must have shape ({len(self.parents)}, 3), got {self.rest_joints.shape}"
            )
        self.order = topological_order(self.parents)

    @property
    def joint_count(self):
        return len(self.parents)


@dataclass
class PoseFrame:
    """
    Per-frame skeletal pose.

    Attributes:
        joint_rotations (numpy.ndarray): (n_b, 3) Euler XYZ angles in radians
        translation (numpy.ndarray): (3,) world translation in meters
    """

    joint_rotations: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.joint_rotations = np.ascontiguousarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.joint_rotations)) and np.all(np.isfinite(self.translation))):
            raise DataError("pose contains non-finite values")

    @classmethod
    def identity(cls, joint_count):
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    def to_dict(self):
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, document):
        try:
            return cls(document["joint_rotations"], document["translation"])
        except KeyError as e:
            raise DataError(f"pose is missing field {e}") from e


@dataclass
class SkinWeights:
    """
    Per-vertex skinning weights stored densely as (V, n_b) with at most
    MAX_INFLUENCES nonzeros per row.
    """

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise InvalidSkinWeightsError(f"weights must be (V, n_b), got {self.weights.shape}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise InvalidSkinWeightsError("invalid skinning weights: negative or non-finite entries")
        row_sums = self.weights.sum(axis=1)
        bad = np.abs(row_sums - 1.0) > WEIGHT_TOLERANCE
        if np.any(bad):
            first = int(np.argmax(bad))
            raise InvalidSkinWeightsError(
                f"invalid skinning weights: row {first} sums to {row_sums[first]:.6f}"
            )
        if np.any((self.weights > 0).sum(axis=1) > MAX_INFLUENCES):
            raise InvalidSkinWeightsError(f"invalid skinning weights: more than {MAX_INFLUENCES} influences")

    @classmethod
    def from_dense(cls, weights, top_k=MAX_INFLUENCES):
        """
        Keep the top_k largest weights per row and renormalize.

        Rows are checked for normalization before truncation, so a rig whose
        rows do not sum to one is still rejected.
        """
        weights = np.asarray(weights, dtype=np.float64)
        row_sums = weights.sum(axis=1)
        if weights.ndim != 2 or np.any(np.abs(row_sums - 1.0) > WEIGHT_TOLERANCE):
            raise InvalidSkinWeightsError("invalid skinning weights: rows must sum to 1")
        if weights.shape[1] > top_k:
            cutoff = np.argsort(-weights, axis=1, kind="stable")[:, top_k:]
            weights = weights.copy()
            np.put_along_axis(weights, cutoff, 0.0, axis=1)
        return cls(weights / weights.sum(axis=1, keepdims=True))

    @property
    def vertex_count(self):
        return self.weights.shape[0]

    @property
    def joint_count(self):
        return self.weights.shape[1]

    def sparse(self):
        """(indices, values) of shape (V, K) with K = min(MAX_INFLUENCES, n_b)."""
        k = min(MAX_INFLUENCES, self.joint_count)
        indices = np.argsort(-self.weights, axis=1, kind="stable")[:, :k]
        values = np.take_along_axis(self.weights, indices, axis=1)
        return (
            torch.as_tensor(indices, dtype=torch.long),
            torch.as_tensor(values, dtype=DTYPE),
        )


def euler_xyz_to_matrix(angles):
    """
    Rotation matrices for intrinsic XYZ Euler angles.

    Args:
        angles (torch.Tensor): (..., 3) angles in radians

    Returns:
        torch.Tensor: (..., 3, 3) Rx @ Ry @ Rz
    """
    angles = as_tensor(angles)
    cos, sin = torch.cos(angles), torch.sin(angles)
    one, zero = torch.ones_like(cos[..., 0]), torch.zeros_like(cos[..., 0])

    def rows(*entries):
        return torch.stack([torch.stack(r, dim=-1) for r in entries], dim=-2)

    rx = rows((one, zero, zero), (zero, cos[..., 0], -sin[..., 0]), (zero, sin[..., 0], cos[..., 0]))
    ry = rows((cos[..., 1], zero, sin[..., 1]), (zero, one, zero), (-sin[..., 1], zero, cos[..., 1]))
    rz = rows((cos[..., 2], -sin[..., 2], zero), (sin[..., 2], cos[..., 2], zero), (zero, zero, one))
    return rx @ ry @ rz


def _rigid(rotation, translation):
    top = torch.cat([rotation, translation.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def bone_transforms(skeleton, joint_rotations, translation, rest_joints=None):
    """
    World transforms B_i mapping canonical points to posed space.

    Each joint applies its rotation about its rest position and inherits its
    parent's transform: B_i = B_parent @ T(J_i) @ R_i @ T(-J_i). The root is
    additionally translated by `translation`.

    Args:
        skeleton (Skeleton): Kinematic tree
        joint_rotations (torch.Tensor): (n_b, 3) Euler XYZ angles
        translation (torch.Tensor): (3,) world translation
        rest_joints (torch.Tensor, optional): (n_b, 3) joint positions; defaults to
            skeleton.rest_joints (pass the trainable tensor to optimize joints)

    Returns:
        torch.Tensor: (n_b, 4, 4) rigid transforms
    """
    joints = as_tensor(skeleton.rest_joints if rest_joints is None else rest_joints)
    rotations = euler_xyz_to_matrix(as_tensor(joint_rotations).reshape(-1, 3))
    translation = as_tensor(translation).reshape(3)
    if rotations.shape[0] != skeleton.joint_count:
        raise DataError(f"pose has {rotations.shape[0]} joints, skeleton has {skeleton.joint_count}")

    world = [None] * skeleton.joint_count
    for joint in skeleton.order:
        pivot = joints[joint]
        local = _rigid(rotations[joint], pivot - rotations[joint] @ pivot)
        parent = skeleton.parents[joint]
        if parent < 0:
            shift = _rigid(torch.eye(3, dtype=local.dtype), translation)
            world[joint] = shift @ local
        else:
            world[joint] = world[parent] @ local
    return torch.stack(world, dim=0)


def skin_vertices(displaced_vertices, weights, transforms):
    """
    Linear blend skinning v_p = sum_i w_i B_i v'.

    Args:
        displaced_vertices (torch.Tensor): (V, 3) canonical vertices after displacement
        weights (SkinWeights): Per-vertex weights
        transforms (torch.Tensor): (n_b, 4, 4) bone transforms

    Returns:
        torch.Tensor: (V, 3) posed vertices

    Raises:
        InvalidSkinWeightsError: If shapes disagree
    """
    vertices = as_tensor(displaced_vertices)
    transforms = as_tensor(transforms)
    if weights.vertex_count != len(vertices):
        raise InvalidSkinWeightsError(
            f"invalid skinning weights: {weights.vertex_count} rows for {len(vertices)} vertices"
        )
    if weights.joint_count != transforms.shape[0]:
        raise InvalidSkinWeightsError(
            f"invalid skinning weights: {weights.joint_count} columns for {transforms.shape[0]} bones"
        )

    indices, values = weights.sparse()
    blended = torch.einsum("vk,vkij->vij", values, transforms[indices])
    return torch.einsum("vij,vj->vi", blended[:, :3, :3], vertices) + blended[:, :3, 3]
