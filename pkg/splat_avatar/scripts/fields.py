#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Multiresolution hash-grid fields over canonical space.

Two fields share one architecture: a hash encoder h(p) with L levels of
trainable feature tables followed by a small ReLU MLP head.
- DisplacementField: per-vertex offsets delta_v = f(h(v)), unbounded
- ColorField: per-splat degree-0 RGB, squashed with a sigmoid

The head's last layer starts at zero, so a fresh model has zero displacement
and neutral gray color. field_backward() runs reverse mode on the most
recent forward pass of a field.

Usage:
    Import: from splat_avatar.scripts.fields import HashGridConfig, DisplacementField, ColorField
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from splat_avatar.config import DTYPE
from splat_avatar.scripts.geometry import as_tensor
from splat_avatar.scripts.utils import CacheError

logger = logging.getLogger("splat_avatar.fields")

HASH_PRIMES = (1, 2654435761, 805459861)
TABLE_INIT_RANGE = 1e-4

# Corner offsets of a voxel, ordered (0,0,0), (0,0,1), ..., (1,1,1)
CORNER_OFFSETS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long
)


@dataclass(frozen=True)
class HashGridConfig:
    """
    Hash-grid layout. Level l has resolution floor(N0 * b^l) voxels per axis
    over the axis-aligned box [aabb_min, aabb_max].
    """

    levels: int = 16
    log2_table_size: int = 17
    features_per_entry: int = 4
    base_resolution: int = 4
    growth: float = 1.5
    aabb_min: tuple = (-1.0, -1.0, -1.0)
    aabb_max: tuple = (1.0, 1.0, 1.0)

    @property
    def table_size(self):
        return 2 ** self.log2_table_size

    @property
    def output_dim(self):
        return self.levels * self.features_per_entry

    @property
    def resolutions(self):
        return [int(math.floor(self.base_resolution * self.growth ** level)) for level in range(self.levels)]

    def is_dense(self, level):
        """Levels whose (N+1)^3 corners fit in the table are indexed without hashing."""
        return (self.resolutions[level] + 1) ** 3 <= self.table_size

    @classmethod
    def enclosing(cls, points, padding=0.1, **kwargs):
        """Config whose box encloses `points`, grown by `padding` of its extent."""
        points = np.asarray(points, dtype=np.float64)
        low, high = points.min(axis=0), points.max(axis=0)
        margin = padding * np.maximum(high - low, 1e-6)
        return cls(aabb_min=tuple((low - margin).tolist()), aabb_max=tuple((high + margin).tolist()), **kwargs)

    def to_dict(self):
        return {
            "levels": self.levels,
            "log2_table_size": self.log2_table_size,
            "features_per_entry": self.features_per_entry,
            "base_resolution": self.base_resolution,
            "growth": self.growth,
            "aabb_min": list(self.aabb_min),
            "aabb_max": list(self.aabb_max),
        }

    @classmethod
    def from_dict(cls, document):
        document = dict(document)
        document["aabb_min"] = tuple(document["aabb_min"])
        document["aabb_max"] = tuple(document["aabb_max"])
        return cls(**document)


def corner_indices(corners, level, config):
    """
    Table rows of integer grid corners at one level.

    Args:
        corners (torch.Tensor): (..., 3) int64 grid coordinates in [0, N_l]
        level (int): Level index
        config (HashGridConfig): Grid layout

    Returns:
        torch.Tensor: (...) int64 indices in [0, table_size)
    """
    if config.is_dense(level):
        side = config.resolutions[level] + 1
        return corners[..., 0] + side * (corners[..., 1] + side * corners[..., 2])
    hashed = corners[..., 0] * HASH_PRIMES[0]
    hashed = hashed ^ (corners[..., 1] * HASH_PRIMES[1])
    hashed = hashed ^ (corners[..., 2] * HASH_PRIMES[2])
    return hashed % config.table_size


def hash_encode(points, config, tables):
    """
    Encode canonical points with trilinear lookups into every level.

    Args:
        points (torch.Tensor): (N, 3) canonical positions (clamped to the box)
        config (HashGridConfig): Grid layout
        tables (torch.Tensor): (L, T, F) feature tables

    Returns:
        torch.Tensor: (N, L * F) concatenated level features
    """
    points = as_tensor(points).reshape(-1, 3)
    low = torch.as_tensor(config.aabb_min, dtype=points.dtype)
    high = torch.as_tensor(config.aabb_max, dtype=points.dtype)
    unit = ((points - low) / (high - low)).clamp(0.0, 1.0)

    offsets = CORNER_OFFSETS.to(points.device)
    features = []
    for level, resolution in enumerate(config.resolutions):
        scaled = unit * resolution
        base = torch.floor(scaled).clamp(max=resolution - 1)
        frac = scaled - base
        corners = base.long().unsqueeze(1) + offsets.unsqueeze(0)
        rows = corner_indices(corners, level, config)

        # weight of a corner is the product over axes of frac or (1 - frac)
        picked = torch.where(offsets.unsqueeze(0).bool(), frac.unsqueeze(1), 1.0 - frac.unsqueeze(1))
        weights = picked.prod(dim=-1)

        features.append((weights.unsqueeze(-1) * tables[level][rows]).sum(dim=1))
    return torch.cat(features, dim=-1)


class FieldHead(nn.Module):
    """Two hidden ReLU layers and a zero-initialized linear output."""

    def __init__(self, in_dim=64, hidden=64, out_dim=3):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(in_dim, hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden, hidden, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden, out_dim, dtype=DTYPE),
        )
        for layer in self.layers[:-1]:
            if isinstance(layer, nn.Linear):
                nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
                nn.init.zeros_(layer.bias)
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, encoded):
        return self.layers(encoded)


class HashField(nn.Module):
    """
    Hash encoder + head. Subclasses choose the output activation.

    Args:
        config (HashGridConfig): Grid layout
        hidden (int): Hidden width of the head
        out_dim (int): Output width
        seed (int): Seed for table and head initialization
    """

    def __init__(self, config, hidden=64, out_dim=3, seed=0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            tables = torch.empty(
                config.levels, config.table_size, config.features_per_entry, dtype=DTYPE
            ).uniform_(-TABLE_INIT_RANGE, TABLE_INIT_RANGE)
            self.tables = nn.Parameter(tables)
            self.head = FieldHead(config.output_dim, hidden, out_dim)
        self._cached_output = None

    def activation(self, raw):
        return raw

    def forward(self, points):
        out = self.activation(self.head(hash_encode(points, self.config, self.tables)))
        self._cached_output = out
        return out

    def clear_cache(self):
        self._cached_output = None


class DisplacementField(HashField):
    """delta_v = f(h(v)) in meters."""


class ColorField(HashField):
    """Degree-0 view-independent RGB in (0, 1)."""

    def activation(self, raw):
        return torch.sigmoid(raw)


class FreeDisplacement(nn.Module):
    """Per-vertex displacement tensor used when the hash field is ablated."""

    def __init__(self, vertex_count):
        super().__init__()
        self.offsets = nn.Parameter(torch.zeros(vertex_count, 3, dtype=DTYPE))
        self._cached_output = None

    def forward(self, points):
        if len(points) != len(self.offsets):
            raise ValueError(f"expected {len(self.offsets)} vertices, got {len(points)}")
        self._cached_output = self.offsets
        return self.offsets

    def clear_cache(self):
        self._cached_output = None


def displacement(points, state):
    """Displacement of canonical vertices, (N, 3) meters."""
    return state(as_tensor(points).reshape(-1, 3))


def color(points, state):
    """RGB of canonical splat centers, (N, 3) in (0, 1)."""
    return state(as_tensor(points).reshape(-1, 3))


def field_backward(grad_out, state):
    """
    Accumulate parameter gradients for the field's most recent forward pass.

    Hash collisions accumulate additively into the shared table rows.

    Args:
        grad_out (torch.Tensor): Gradient of the loss w.r.t. the field output
        state (HashField): Field that produced the cached output

    Returns:
        dict: Parameter name -> accumulated gradient

    Raises:
        CacheError: If the field has no cached forward pass
    """
    cached = getattr(state, "_cached_output", None)
    if cached is None or not cached.requires_grad:
        raise CacheError("no cached activations")
    torch.autograd.backward(cached, grad_tensors=as_tensor(grad_out).reshape(cached.shape))
    state.clear_cache()
    return {
        name: (param.grad.clone() if param.grad is not None else torch.zeros_like(param))
        for name, param in state.named_parameters()
    }
