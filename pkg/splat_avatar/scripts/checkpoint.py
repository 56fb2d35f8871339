#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Binary checkpoint container.

Layout (all integers little-endian):
    8 bytes   magic b"SPLATCKP"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON, sorted keys, no whitespace
    payload   raw tensors back to back (<f8 or <i8), offsets given in the header

The header carries the config echo, schedule position, seed and model
settings; the payload carries every model tensor plus the template and rig,
so a checkpoint alone is enough to render, animate and export. Writes are
atomic. Saving a loaded checkpoint reproduces the original bytes.

Usage:
    Import: from splat_avatar.scripts.checkpoint import save_checkpoint, load_checkpoint
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from splat_avatar.config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from splat_avatar.scripts.avatar_model import BoundSplatModel
from splat_avatar.scripts.fields import HashGridConfig
from splat_avatar.scripts.geometry import TemplateMesh
from splat_avatar.scripts.skinning import Skeleton, SkinWeights
from splat_avatar.scripts.templates import RiggedTemplate
from splat_avatar.scripts.utils import DataError, atomic_write_bytes

logger = logging.getLogger("splat_avatar.checkpoint")

PREAMBLE = struct.Struct("<8sIQ")
DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


@dataclass
class Checkpoint:
    """
    Decoded checkpoint.

    Attributes:
        tensors (dict): name -> numpy array; model tensors are prefixed "model."
        metadata (dict): Model settings (see BoundSplatModel.metadata)
        config (dict): Configuration echo
        schedule (dict): StageSchedule.to_dict()
        epoch (int): Last completed epoch (0 before training)
        seed (int): Run seed
    """

    tensors: dict
    metadata: dict
    config: dict
    schedule: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0

    def template(self):
        """RiggedTemplate stored with the model."""
        mesh = TemplateMesh(self.tensors["template.vertices"], self.tensors["template.faces"])
        skeleton = Skeleton(self.tensors["rig.parents"].tolist(), self.tensors["rig.rest_joints"])
        return RiggedTemplate(mesh, skeleton, SkinWeights(self.tensors["rig.weights"]))

    def model_state(self):
        return {
            name[len("model."):]: torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=True))
            for name, array in self.tensors.items()
            if name.startswith("model.")
        }


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def encode_checkpoint(checkpoint):
    """Serialize a Checkpoint to bytes."""
    entries, blobs, offset = [], [], 0
    for name in sorted(checkpoint.tensors):
        array = np.asarray(checkpoint.tensors[name])
        code = "<i8" if np.issubdtype(array.dtype, np.integer) else "<f8"
        data = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)

    header = {
        "config": _jsonable(checkpoint.config),
        "epoch": int(checkpoint.epoch),
        "metadata": _jsonable(checkpoint.metadata),
        "schedule": _jsonable(checkpoint.schedule),
        "seed": int(checkpoint.seed),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)


def decode_checkpoint(payload, source="checkpoint"):
    """
    Parse checkpoint bytes.

    Raises:
        DataError: On a bad magic number, unsupported version or truncated data
    """
    if len(payload) < PREAMBLE.size:
        raise DataError(f"{source}: file too short for a checkpoint")
    magic, version, header_length = PREAMBLE.unpack_from(payload)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    start = PREAMBLE.size
    try:
        header = json.loads(payload[start:start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: corrupt checkpoint header: {e}") from e

    body = start + header_length
    tensors = {}
    for entry in header["tensors"]:
        begin = body + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(payload):
            raise DataError(f"{source}: tensor '{entry['name']}' is truncated")
        array = np.frombuffer(payload[begin:end], dtype=DTYPES[entry["dtype"]])
        tensors[entry["name"]] = array.reshape(entry["shape"]).copy()

    return Checkpoint(
        tensors=tensors,
        metadata=header["metadata"],
        config=header["config"],
        schedule=header.get("schedule", {}),
        epoch=header.get("epoch", 0),
        seed=header.get("seed", 0),
    )


def checkpoint_from_model(model, epoch=0, seed=0, schedule=None):
    """Snapshot a model (tensors are copied)."""
    tensors = {f"model.{name}": value.detach().cpu().numpy().copy() for name, value in model.state_dict().items()}
    tensors["template.vertices"] = model.mesh.vertices.copy()
    tensors["template.faces"] = model.mesh.faces.copy()
    tensors["rig.parents"] = np.asarray(model.skeleton.parents, dtype=np.int64)
    tensors["rig.rest_joints"] = np.asarray(model.skeleton.rest_joints).copy()
    tensors["rig.weights"] = model.weights.weights.copy()
    config = {key: (list(value) if isinstance(value, tuple) else value) for key, value in model.config.items()}
    return Checkpoint(tensors, model.metadata(), config, dict(schedule or {}), epoch, seed)


def save_checkpoint(path, model_or_checkpoint, epoch=0, seed=0, schedule=None):
    """
    Write a checkpoint atomically.

    Args:
        path (str or Path): Destination file
        model_or_checkpoint (BoundSplatModel or Checkpoint): What to store
        epoch (int): Last completed epoch
        seed (int): Run seed
        schedule (dict, optional): StageSchedule.to_dict()

    Returns:
        Path: Destination path
    """
    checkpoint = model_or_checkpoint
    if isinstance(model_or_checkpoint, BoundSplatModel):
        checkpoint = checkpoint_from_model(model_or_checkpoint, epoch, seed, schedule)
    path = atomic_write_bytes(path, encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint {Path(path).name} (epoch {checkpoint.epoch})")
    return path


def load_checkpoint(path):
    """Read a checkpoint file; see decode_checkpoint for errors."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))


def model_from_checkpoint(checkpoint):
    """Rebuild the BoundSplatModel stored in a checkpoint."""
    template = checkpoint.template()
    config = {key: (tuple(value) if isinstance(value, list) else value) for key, value in checkpoint.config.items()}
    metadata = checkpoint.metadata
    config["displacement_mode"] = metadata["displacement_mode"]
    config["head_hidden"] = metadata["head_hidden"]
    config["epsilon"] = metadata["epsilon"]
    model = BoundSplatModel(
        template.mesh,
        template.skeleton,
        template.weights,
        config,
        seed=metadata["seed"],
        frame_count=metadata["frame_count"],
        grid=HashGridConfig.from_dict(metadata["grid"]),
    )
    model.load_state_dict(checkpoint.model_state(), strict=True)
    return model
