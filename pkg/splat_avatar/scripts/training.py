#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Optimization of a BoundSplatModel against posed multi-view frames.

Schedule (epochs are 1-based):
- stage 1, epochs 1..stage1_end: all groups, displacement at its base rate
- stage 2, up to stage2_end: displacement at the raised stage-2 rate
- stage 3, the rest: joints frozen, displacement back at the base rate
Scales and color keep their rates throughout; the pose group joins every
stage when pose refinement is enabled. Splat rotations, opacities and skin
weights are never optimized.

One Adam step per frame, frames in dataset order.

Usage:
    Import: from splat_avatar.scripts.training import StageSchedule, train_epoch
"""

import logging
import math
from dataclasses import dataclass, field

import torch

from splat_avatar.config import DEFAULT_CONFIG
from splat_avatar.scripts.losses import LossWeights, objective
from splat_avatar.scripts.utils import DataError, DivergenceError, UsageError

logger = logging.getLogger("splat_avatar.training")


@dataclass
class TrainingFrame:
    """
    One posed view.

    Attributes:
        index (int): Frame index (selects the pose offset under refinement)
        image (torch.Tensor): (H, W, 3) target colors in [0, 1]
        camera (Camera): Camera of the view
        pose (PoseFrame): Skeletal pose
        normal (torch.Tensor, optional): (H, W, 3) signed target normals
        mask (torch.Tensor, optional): (H, W) bool foreground mask
    """

    index: int
    image: torch.Tensor
    camera: object
    pose: object
    normal: torch.Tensor = None
    mask: torch.Tensor = None


@dataclass
class StageSchedule:
    """Stage boundaries and per-group learning rates."""

    epochs: int = 20
    stage1_end: int = 4
    stage2_end: int = 10
    lr_scale: float = 5e-3
    lr_color: float = 5e-4
    lr_joints: float = 5e-4
    lr_displacement: float = 1e-4
    lr_displacement_stage2: float = 8e-4
    lr_pose: float = 1e-4
    optimize_joints: bool = True
    refine_pose: bool = False

    def __post_init__(self):
        if not 1 <= self.stage1_end < self.stage2_end:
            raise UsageError("stage boundaries must satisfy 1 <= stage1_end < stage2_end")
        if self.epochs < 1:
            raise UsageError("epochs must be at least 1")
        rates = (self.lr_scale, self.lr_color, self.lr_joints, self.lr_displacement,
                 self.lr_displacement_stage2, self.lr_pose)
        if any(rate <= 0 for rate in rates):
            raise UsageError("learning rates must be positive")

    @classmethod
    def from_config(cls, config):
        return cls(**{name: config[name] for name in cls.__dataclass_fields__})

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class StageInfo:
    stage: int
    learning_rates: dict


def stage_of(epoch, schedule=None):
    """
    Stage id and active learning-rate table of a 1-based epoch.

    Args:
        epoch (int): Epoch number
        schedule (StageSchedule, optional): Defaults to the standard schedule

    Returns:
        StageInfo: Stage 1, 2 or 3 and group -> learning rate; frozen groups are absent

    Raises:
        UsageError: If epoch is below 1 or above schedule.epochs
    """
    schedule = schedule or StageSchedule()
    if epoch < 1 or epoch > schedule.epochs:
        raise UsageError(f"epoch {epoch} outside 1..{schedule.epochs}")

    if epoch <= schedule.stage1_end:
        stage = 1
    elif epoch <= schedule.stage2_end:
        stage = 2
    else:
        stage = 3

    rates = {
        "scale": schedule.lr_scale,
        "color": schedule.lr_color,
        "displacement": schedule.lr_displacement_stage2 if stage == 2 else schedule.lr_displacement,
    }
    if schedule.optimize_joints and stage < 3:
        rates["joints"] = schedule.lr_joints
    if schedule.refine_pose:
        rates["pose"] = schedule.lr_pose
    return StageInfo(stage, rates)


@dataclass
class AdamState:
    """First and second moments of one tensor."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, tensor):
        return cls(torch.zeros_like(tensor), torch.zeros_like(tensor))


@dataclass
class Optimizer:
    """Adam hyperparameters plus moment state keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 10.0
    states: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, config):
        return cls(config["adam_beta1"], config["adam_beta2"], config["adam_eps"], config["grad_clip"])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, group=None):
    """
    Bias-corrected Adam update, applied in place.

    Args:
        params (dict): name -> tensor to update
        grads (dict): name -> gradient (missing or None counts as zero)
        state (dict): name -> AdamState, created on first use
        lr (float): Learning rate
        group (str, optional): Group name for error messages

    Returns:
        dict: The updated params

    Raises:
        DivergenceError: If any gradient is not finite
    """
    for name, grad in grads.items():
        if grad is not None and not bool(torch.isfinite(grad).all()):
            raise DivergenceError(f"diverged: non-finite gradient in group '{group or name}'", group=group or name)

    with torch.no_grad():
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                grad = torch.zeros_like(param)
            if grad.shape != param.shape:
                raise DataError(f"gradient shape {tuple(grad.shape)} does not match {name} {tuple(param.shape)}")
            slot = state.get(name)
            if slot is None:
                slot = state[name] = AdamState.zeros_like(param)
            slot.step += 1
            slot.m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            slot.v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            m_hat = slot.m / (1.0 - beta1 ** slot.step)
            v_hat = slot.v / (1.0 - beta2 ** slot.step)
            param.sub_(lr * m_hat / (torch.sqrt(v_hat) + eps))
    return params


def _apply_group(group, tensors, lr, optimizer):
    """Clip and step one parameter group. Returns the pre-clip gradient norm."""
    params = [p for p in tensors.values() if p.grad is not None]
    norm = 0.0
    if params:
        norm = float(torch.nn.utils.clip_grad_norm_(params, optimizer.grad_clip))
    grads = {name: p.grad for name, p in tensors.items()}
    adam_step(
        {name: p.data for name, p in tensors.items()},
        grads,
        optimizer.states,
        lr,
        optimizer.beta1,
        optimizer.beta2,
        optimizer.eps,
        group=group,
    )
    return norm


def _step_pose(model, frame_index, lr, optimizer):
    """Adam on the pose rows of one frame; other frames' rows are untouched."""
    rows = {
        f"pose_rotations[{frame_index}]": (model.pose_rotations, frame_index),
        f"pose_translations[{frame_index}]": (model.pose_translations, frame_index),
    }
    tensors, grads = {}, {}
    for name, (param, index) in rows.items():
        tensors[name] = param.data[index]
        grads[name] = None if param.grad is None else param.grad[index]
    present = [g for g in grads.values() if g is not None]
    if present:
        norm = torch.linalg.vector_norm(torch.cat([g.reshape(-1) for g in present]))
        if bool(torch.isfinite(norm)) and float(norm) > optimizer.grad_clip:
            grads = {k: (None if g is None else g * (optimizer.grad_clip / float(norm))) for k, g in grads.items()}
    adam_step(tensors, grads, optimizer.states, lr, optimizer.beta1, optimizer.beta2, optimizer.eps, group="pose")


def _frame_objective(model, frame, weights):
    result = model.render(frame.camera, frame.pose, frame_index=frame.index)
    total, components = objective(
        result.image.color,
        frame.image,
        result.image.normal,
        frame.normal,
        result.posed_vertices,
        model.mesh,
        weights,
        frame.mask,
    )
    if not math.isfinite(float(total.detach())):
        raise DivergenceError(f"diverged: non-finite loss at frame {frame.index}", group="loss")
    return total, components


@dataclass
class EpochResult:
    """Mean losses of one epoch and the per-iteration rows."""

    epoch: int
    stage: int
    means: dict
    rows: list


def train_epoch(dataset, model, schedule, epoch, optimizer=None, weights=None):
    """
    One pass over the dataset with one Adam step per frame.

    Args:
        dataset (list of TrainingFrame): Frames in optimization order
        model (BoundSplatModel): Model, updated in place
        schedule (StageSchedule): Learning-rate schedule
        epoch (int): 1-based epoch number
        optimizer (Optimizer, optional): Adam state, carried across epochs by the caller
        weights (LossWeights, optional): Loss weights

    Returns:
        EpochResult: Mean l_rgb, l_normal, l_nc and total plus one row per frame

    Raises:
        DataError: If the dataset is empty
        DivergenceError: On a non-finite loss or gradient
    """
    if not dataset:
        raise DataError("training dataset is empty")
    optimizer = optimizer or Optimizer.from_config(DEFAULT_CONFIG)
    weights = weights or LossWeights()
    info = stage_of(epoch, schedule)
    groups = model.param_groups()
    log_every = int(model.config.get("log_every", 10))

    rows = []
    for i, frame in enumerate(dataset):
        model.zero_grad(set_to_none=True)
        total, components = _frame_objective(model, frame, weights)
        total.backward()

        for group, lr in info.learning_rates.items():
            if group == "pose":
                if 0 <= frame.index < model.frame_count:
                    _step_pose(model, frame.index, lr, optimizer)
                continue
            _apply_group(group, groups[group], lr, optimizer)

        row = {"epoch": epoch, "iter": i, "total": float(total.detach())}
        row.update({name: float(value.detach()) for name, value in components.items()})
        rows.append(row)

        if (i + 1) % log_every == 0 or (i + 1) == len(dataset):
            logger.info(f"Epoch {epoch} (stage {info.stage}): {i + 1}/{len(dataset)} frames, loss {row['total']:.6f}")

    model.zero_grad(set_to_none=True)
    means = {
        name: sum(row[name] for row in rows) / len(rows)
        for name in ("l_rgb", "l_normal", "l_nc", "total")
    }
    return EpochResult(epoch=epoch, stage=info.stage, means=means, rows=rows)


def refine_pose(frame, model, lr=1e-4, optimizer=None, weights=None, steps=1):
    """
    Adam steps on the pose offset of one frame only.

    Args:
        frame (TrainingFrame): Frame whose pose is refined
        model (BoundSplatModel): Model with pose offsets for frame.index
        lr (float): Shared learning rate of rotations and translation
        steps (int): Number of update steps

    Returns:
        PoseFrame: The refined pose (input pose plus learned offset)

    Raises:
        DataError: If the model holds no pose offset for the frame
        DivergenceError: As adam_step
    """
    if not 0 <= frame.index < model.frame_count:
        raise DataError(f"model has no pose offsets for frame {frame.index}")
    optimizer = optimizer or Optimizer.from_config(DEFAULT_CONFIG)
    weights = weights or LossWeights()

    for _ in range(steps):
        model.zero_grad(set_to_none=True)
        total, _ = _frame_objective(model, frame, weights)
        pose_params = [model.pose_rotations, model.pose_translations]
        grads = torch.autograd.grad(total, pose_params, allow_unused=True)
        model.pose_rotations.grad, model.pose_translations.grad = grads
        _step_pose(model, frame.index, lr, optimizer)
    model.zero_grad(set_to_none=True)
    return model.refined_pose(frame.pose, frame.index)
