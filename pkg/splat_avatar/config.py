#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Configuration settings for the Splat Avatar pipeline.

Module constants describe paths and fixed numeric conventions. Every tunable
lives in DEFAULT_CONFIG and can be overridden with a `key = value` file passed
through `--config`.
"""

import os
from pathlib import Path

import torch

# Project version
__version__ = "0.1.0"

# Base directory - use absolute path for reliability
BASE_DIR = Path(os.path.dirname(os.path.abspath(__file__)))

# Directory paths
DATA_DIR = BASE_DIR / "data"
OUTPUT_DIR = BASE_DIR / "output"
LOG_DIR = BASE_DIR / "logs"

# Every tensor in the pipeline is float64
DTYPE = torch.float64

# Thickness of a surface-aligned splat along its face normal (meters)
EPSILON_NORMAL_SCALE = 1e-3

# Rasterizer constants
NEAR_PLANE = 0.01
DILATION_PX2 = 0.3
RADIUS_SIGMA = 3.0
ALPHA_CAP = 0.99
TRANSMITTANCE_EPS = 1e-4
TILE_SIZE = 16

# Checkpoint container
CHECKPOINT_MAGIC = b"SPLATCKP"
CHECKPOINT_VERSION = 1
TEMPLATE_FORMAT = "splat-avatar-template"
TEMPLATE_VERSION = 1
MANIFEST_VERSION = 1

DEFAULT_CONFIG = {
    # schedule (epochs are 1-based and inclusive)
    "epochs": 20,
    "stage1_end": 4,
    "stage2_end": 10,
    # learning rates
    "lr_scale": 5e-3,
    "lr_color": 5e-4,
    "lr_joints": 5e-4,
    "lr_displacement": 1e-4,
    "lr_displacement_stage2": 8e-4,
    "lr_pose": 1e-4,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "grad_clip": 10.0,
    # losses
    "ssim_lambda": 0.2,
    "w_photo": 1.0,
    "w_normal": 1.0,
    "w_nc": 0.01,
    # ablation toggles
    "displacement_mode": "hash",
    "optimize_joints": True,
    "refine_pose": False,
    # model
    "epsilon": EPSILON_NORMAL_SCALE,
    # initial splat scales in standard deviations of each face's own extent
    "scale_init_factor": 1.9,
    "hash_levels": 16,
    "hash_log2_table_size": 17,
    "hash_features": 4,
    "hash_base_resolution": 4,
    "hash_growth": 1.5,
    "hash_aabb_padding": 0.1,
    "head_hidden": 64,
    # rendering
    "background": (0.0, 0.0, 0.0),
    "near": NEAR_PLANE,
    "tile_size": TILE_SIZE,
    # synthetic scene
    "synth_views": 20,
    "synth_holdout_views": 4,
    "synth_resolution": 64,
    "synth_subdivisions": 1,
    "synth_segments": 32,
    "synth_cap_rings": 8,
    "synth_body_rings": 15,
    "synth_bend_degrees": 30.0,
    "synth_bump_amplitude": 0.012,
    # evaluation
    "v2v_samples": 100000,
    "log_every": 10,
}


def _coerce(key, raw, default):
    """
    Convert a raw string from a config file to the type of its default.

    Args:
        key (str): Config key (used in error messages)
        raw (str): Raw value text
        default: Default value whose type drives the conversion

    Returns:
        Converted value

    Raises:
        ValueError: If the text cannot be converted
    """
    raw = raw.strip().strip('"').strip("'")
    if isinstance(default, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got '{raw}'")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        values = tuple(float(part) for part in raw.strip("()[]").split(",") if part.strip())
        if len(values) != len(default):
            raise ValueError(f"{key}: expected {len(default)} values, got {len(values)}")
        return values
    return raw


def load_config(path=None, overrides=None):
    """
    Build the run configuration from defaults, an optional file and overrides.

    The file format is a flat `key = value` list. Blank lines, `#` comments and
    `[section]` headers are ignored.

    Args:
        path (str or Path, optional): Config file to read
        overrides (dict, optional): Values applied last (e.g. from CLI flags)

    Returns:
        dict: Complete configuration

    Raises:
        UsageError: On unknown keys, malformed lines or bad values
    """
    from splat_avatar.scripts.utils import UsageError

    settings = dict(DEFAULT_CONFIG)

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line or (line.startswith("[") and line.endswith("]")):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{line_no}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in DEFAULT_CONFIG:
                    raise UsageError(f"{path}:{line_no}: unknown config key '{key}'")
                try:
                    settings[key] = _coerce(key, raw, DEFAULT_CONFIG[key])
                except ValueError as e:
                    raise UsageError(f"{path}:{line_no}: {e}") from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in DEFAULT_CONFIG:
            raise UsageError(f"Unknown config key '{key}'")
        settings[key] = value

    if settings["displacement_mode"] not in ("hash", "free"):
        raise UsageError(f"displacement_mode must be 'hash' or 'free', got '{settings['displacement_mode']}'")
    if not 0.0 <= settings["ssim_lambda"] <= 1.0:
        raise UsageError("ssim_lambda must lie in [0, 1]")
    for key in ("w_photo", "w_normal", "w_nc"):
        if settings[key] < 0:
            raise UsageError(f"{key} must be nonnegative")

    return settings
