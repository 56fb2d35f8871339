#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Utility functions for the Splat Avatar pipeline.

This module contains shared helpers for:
- Package exceptions
- Runtime seeding and threading
- File operations (directories, atomic writes, JSON)
- PNG image I/O for color, normal and mask images

Usage:
    Import: from splat_avatar.scripts.utils import read_png, write_json, etc.
"""

import json
import logging
import os
import tempfile
from pathlib import Path

import cv2
import numpy as np
import torch

logger = logging.getLogger("splat_avatar.utils")


class SplatAvatarError(Exception):
    """Base class for every error raised by the pipeline."""


class UsageError(SplatAvatarError):
    """Bad command line or configuration."""


class DataError(SplatAvatarError):
    """Missing files, schema violations and inconsistent datasets."""


class DivergenceError(SplatAvatarError):
    """Non-finite loss or gradient during optimization."""

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


class CacheError(SplatAvatarError):
    """A backward pass was requested without a cached forward pass."""


def configure_runtime(seed=0, threads=None):
    """
    Seed torch and pin the thread count so that runs are reproducible.

    Args:
        seed (int): Seed for the global torch generator
        threads (int, optional): Number of intra-op threads

    Returns:
        numpy.random.Generator: Generator derived from the same seed
    """
    torch.manual_seed(seed)
    if threads:
        torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug(f"Runtime configured with seed={seed}, threads={torch.get_num_threads()}")
    return np.random.default_rng(seed)


def ensure_directory_exists(path):
    """
    Create a run output, dataset frame or log directory with its parents.

    Raises:
        UsageError: If `path` already exists as something other than a directory
    """
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    path.mkdir(parents=True, exist_ok=True)
    return path


def atomic_write_bytes(path, payload):
    """
    Write bytes to a temporary file next to `path` and rename it into place.

    Args:
        path (str or Path): Destination file
        payload (bytes): Content to write

    Returns:
        Path: Destination path
    """
    path = Path(path)
    ensure_directory_exists(path.parent)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def read_json(path):
    """
    Load a JSON document, converting failures into DataError.

    Args:
        path (str or Path): File to read

    Returns:
        Parsed JSON value
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"Invalid JSON in {path}: {e}") from e


def write_json(path, document):
    """
    Write a JSON document atomically with stable key order.

    Args:
        path (str or Path): Destination file
        document: JSON-serializable value

    Returns:
        Path: Destination path
    """
    text = json.dumps(document, indent=2, sort_keys=True)
    return atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def write_png(path, image, bits=8):
    """
    Write an H×W or H×W×3 image with values in [0, 1] as PNG.

    Args:
        path (str or Path): Destination file
        image (numpy.ndarray or torch.Tensor): Image data in [0, 1]
        bits (int): 8 or 16 bits per channel

    Returns:
        Path: Destination path
    """
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(image * 65535.0).astype(np.uint16)
    elif bits == 8:
        data = np.round(image * 255.0).astype(np.uint8)
    else:
        raise ValueError(f"Unsupported bit depth: {bits}")
    if data.ndim == 3:
        data = cv2.cvtColor(data, cv2.COLOR_RGB2BGR)
    ok, encoded = cv2.imencode(".png", data)
    if not ok:
        raise DataError(f"Failed to encode PNG for {path}")
    return atomic_write_bytes(path, encoded.tobytes())


def read_png(path):
    """
    Read an 8- or 16-bit PNG into float64 values in [0, 1].

    Args:
        path (str or Path): PNG file

    Returns:
        numpy.ndarray: H×W (grayscale) or H×W×3 (RGB) array
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image not found: {path}")
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise DataError(f"Could not decode image: {path}")
    if data.ndim == 3:
        data = cv2.cvtColor(data[..., :3], cv2.COLOR_BGR2RGB)
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    return data.astype(np.float64) / scale


def write_normal_png(path, normals):
    """Store signed normals as (n + 1) / 2 in 16-bit channels."""
    if isinstance(normals, torch.Tensor):
        normals = normals.detach().cpu().numpy()
    return write_png(path, (np.asarray(normals) + 1.0) * 0.5, bits=16)


def read_normal_png(path):
    """Inverse of write_normal_png: returns signed normals in [-1, 1]."""
    return read_png(path) * 2.0 - 1.0
