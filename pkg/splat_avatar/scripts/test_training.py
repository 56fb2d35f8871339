#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Tests for the stage schedule, the Adam update and the training loop.

Usage:
    Run directly: python -m splat_avatar.scripts.test_training
"""

import math
import sys

import numpy as np
import pytest
import torch

from splat_avatar.scripts.avatar_model import BoundSplatModel
from splat_avatar.scripts.conftest import small_config
from splat_avatar.scripts.losses import LossWeights
from splat_avatar.scripts.skinning import PoseFrame
from splat_avatar.scripts.splatting import Camera
from splat_avatar.scripts.synth_scene import bend_pose, build_ground_truth, render_ground_truth, turntable_camera
from splat_avatar.scripts.training import (
    AdamState,
    Optimizer,
    StageSchedule,
    TrainingFrame,
    adam_step,
    refine_pose,
    stage_of,
    train_epoch,
)
from splat_avatar.scripts.utils import DataError, DivergenceError, UsageError

NO_REGULARIZER = LossWeights(w_nc=0.0)


def expected_stage(epoch):
    if epoch <= 4:
        return 1, 1e-4, True
    if epoch <= 10:
        return 2, 8e-4, True
    return 3, 1e-4, False


@pytest.mark.parametrize("epoch", range(1, 21))
def test_stage_table(epoch):
    stage, displacement_lr, joints = expected_stage(epoch)
    info = stage_of(epoch)
    assert info.stage == stage
    assert info.learning_rates["displacement"] == displacement_lr
    assert info.learning_rates["scale"] == 5e-3
    assert info.learning_rates["color"] == 5e-4
    assert ("joints" in info.learning_rates) == joints
    if joints:
        assert info.learning_rates["joints"] == 5e-4
    # rotations, opacities and skin weights never get a group
    assert set(info.learning_rates) <= {"scale", "color", "displacement", "joints"}


def test_stage_table_with_pose_refinement():
    schedule = StageSchedule(refine_pose=True)
    assert stage_of(15, schedule).learning_rates["pose"] == 1e-4
    assert "joints" not in stage_of(3, StageSchedule(optimize_joints=False)).learning_rates


def test_stage_of_rejects_out_of_range_epochs():
    with pytest.raises(UsageError):
        stage_of(0)
    with pytest.raises(UsageError):
        stage_of(21)


def test_schedule_validation():
    with pytest.raises(UsageError):
        StageSchedule(stage1_end=10, stage2_end=4)
    with pytest.raises(UsageError):
        StageSchedule(lr_color=0.0)
    schedule = StageSchedule.from_config(small_config(epochs=7))
    assert schedule.epochs == 7
    assert StageSchedule(**schedule.to_dict()) == schedule


def test_adam_zero_gradient_keeps_params():
    params = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    adam_step(params, {"w": torch.zeros(2, dtype=torch.float64)}, {}, lr=0.1)
    assert params["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_by_hand():
    params = {"w": torch.tensor([0.0], dtype=torch.float64)}
    adam_step(params, {"w": torch.tensor([1.0], dtype=torch.float64)}, {}, lr=0.1)
    assert abs(float(params["w"][0]) - (-0.1 / (1.0 + 1e-8))) < 1e-15


def scalar_adam(p, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_adam_matches_scalar_replay():
    rng = np.random.default_rng(4)
    grads = rng.normal(size=6).tolist()
    grads = [grads[0], grads[0]] + grads[1:]
    params, state = {"w": torch.tensor([0.5], dtype=torch.float64)}, {}
    for g in grads:
        adam_step(params, {"w": torch.tensor([g], dtype=torch.float64)}, state, lr=0.01)
    assert abs(float(params["w"][0]) - scalar_adam(0.5, grads, 0.01)) < 1e-12
    assert state["w"].step == len(grads)


def test_adam_matches_torch_optimizer():
    rng = np.random.default_rng(5)
    start = rng.normal(size=(3, 2))
    reference = torch.nn.Parameter(torch.tensor(start))
    torch_adam = torch.optim.Adam([reference], lr=0.05, betas=(0.9, 0.999), eps=1e-8)
    params, state = {"w": torch.tensor(start)}, {}
    for _ in range(5):
        grad = torch.tensor(rng.normal(size=(3, 2)))
        reference.grad = grad.clone()
        torch_adam.step()
        adam_step(params, {"w": grad}, state, lr=0.05)
    assert torch.allclose(params["w"], reference.detach(), atol=1e-12)


def test_adam_non_finite_gradient_names_group():
    params = {"w": torch.tensor([1.0], dtype=torch.float64)}
    with pytest.raises(DivergenceError, match="diverged") as info:
        adam_step(params, {"w": torch.tensor([float("nan")], dtype=torch.float64)}, {}, lr=0.1, group="scale")
    assert info.value.group == "scale"
    assert params["w"].tolist() == [1.0]


def test_adam_shape_mismatch():
    with pytest.raises(DataError):
        adam_step({"w": torch.zeros(2, dtype=torch.float64)}, {"w": torch.zeros(3, dtype=torch.float64)}, {}, lr=0.1)
    assert AdamState.zeros_like(torch.zeros(2)).step == 0


def synthetic_frames(config, count=2, resolution=24):
    """Ground-truth renders of the capsule for a few turntable views."""
    template, truth = build_ground_truth(config)
    frames = []
    for index in range(count):
        azimuth = 2.0 * math.pi * index / count
        camera = turntable_camera(azimuth, resolution)
        pose = bend_pose(azimuth, config["synth_bend_degrees"])
        image = render_ground_truth(truth, camera, pose, config)
        frames.append(TrainingFrame(index, image.color, camera, pose, image.normal, image.alpha > 0.5))
    return template, frames


def fresh_model(template, config, frame_count=2, seed=0):
    return BoundSplatModel(template.mesh, template.skeleton, template.weights, config, seed=seed,
                           frame_count=frame_count)


def self_rendered_frames(model, count=2, resolution=24):
    frames = []
    for index in range(count):
        camera = turntable_camera(2.0 * math.pi * index / count, resolution)
        pose = bend_pose(0.5 * index, 20.0)
        with torch.no_grad():
            image = model.render(camera, pose).image
        frames.append(TrainingFrame(index, image.color.clone(), camera, pose, image.normal.clone()))
    return frames


def snapshot(model):
    return {name: value.detach().clone() for name, value in model.state_dict().items()}


def test_fixed_point_leaves_parameters_unchanged():
    config = small_config()
    template, _ = build_ground_truth(config)
    model = fresh_model(template, config)
    frames = self_rendered_frames(model)
    before = snapshot(model)

    result = train_epoch(frames, model, StageSchedule(), 1, Optimizer(), NO_REGULARIZER)
    assert result.means["total"] < 1e-9
    for name, value in model.state_dict().items():
        assert float((value - before[name]).abs().max()) < 1e-9, name


def test_epoch_rows_and_frozen_groups():
    config = small_config()
    template, frames = synthetic_frames(config)
    model = fresh_model(template, config)
    weights_before = model.weights.weights.copy()
    before = snapshot(model)
    schedule = StageSchedule(epochs=12)

    result = train_epoch(frames, model, schedule, 11, Optimizer(), LossWeights())
    assert result.stage == 3
    assert [row["iter"] for row in result.rows] == [0, 1]
    assert set(result.rows[0]) == {"epoch", "iter", "l_rgb", "l_normal", "l_nc", "total"}
    assert all(math.isfinite(value) for value in result.means.values())

    after = model.state_dict()
    assert torch.equal(after["joints"], before["joints"])
    assert torch.equal(after["rot2d"], before["rot2d"])
    assert torch.equal(after["opacity"], torch.ones_like(after["opacity"]))
    assert torch.equal(after["pose_rotations"], before["pose_rotations"])
    assert torch.equal(after["pose_translations"], before["pose_translations"])
    assert np.array_equal(model.weights.weights, weights_before)
    assert not torch.equal(after["log_scale"], before["log_scale"])

    train_epoch(frames, model, schedule, 2, Optimizer(), LossWeights())
    assert not torch.equal(model.state_dict()["joints"], before["joints"])


def test_training_is_deterministic():
    config = small_config()
    template, frames = synthetic_frames(config)
    states = []
    for _ in range(2):
        model = fresh_model(template, config, seed=7)
        optimizer = Optimizer()
        for epoch in (1, 2):
            train_epoch(frames, model, StageSchedule(epochs=2, stage1_end=1, stage2_end=2), epoch, optimizer)
        states.append(snapshot(model))
    for name in states[0]:
        assert torch.equal(states[0][name], states[1][name]), name


def test_empty_dataset_and_nan_targets():
    config = small_config()
    template, frames = synthetic_frames(config, count=1)
    model = fresh_model(template, config)
    with pytest.raises(DataError):
        train_epoch([], model, StageSchedule(), 1)

    broken = frames[0]
    broken.image = torch.full_like(broken.image, float("nan"))
    with pytest.raises(DivergenceError) as info:
        train_epoch([broken], model, StageSchedule(), 1)
    assert info.value.group == "loss"


def pose_frame(model, translation, resolution=48):
    camera = Camera.look_at((0.0, 0.5, 2.0), (0.0, 0.5, 0.0), (0.0, 1.0, 0.0), 40.0, resolution, resolution)
    target_pose = PoseFrame(np.zeros((2, 3)), np.zeros(3))
    with torch.no_grad():
        image = model.render(camera, target_pose).image
    given = PoseFrame(np.zeros((2, 3)), np.asarray(translation, dtype=np.float64))
    return TrainingFrame(0, image.color.clone(), camera, given, image.normal.clone())


def textured_model(config):
    template, _ = build_ground_truth(config)
    model = fresh_model(template, config, frame_count=1)
    with torch.no_grad():
        last = model.color_field.head.layers[-1]
        last.weight.normal_(0.0, 0.5, generator=torch.Generator().manual_seed(0))
    return model


def test_refine_pose_fixed_point():
    config = small_config()
    model = textured_model(config)
    frame = pose_frame(model, [0.0, 0.0, 0.0], resolution=24)
    refined = refine_pose(frame, model, lr=1e-4, weights=NO_REGULARIZER)
    assert np.linalg.norm(refined.translation) < 1e-6
    assert np.linalg.norm(refined.joint_rotations) < 1e-6


def test_refine_pose_recovers_translation():
    config = small_config()
    model = textured_model(config)
    frame = pose_frame(model, [0.02, 0.0, 0.0])
    refined = refine_pose(frame, model, lr=5e-4, weights=NO_REGULARIZER, steps=50)
    assert np.linalg.norm(refined.translation) <= 0.5 * 0.02


def test_refine_pose_needs_offsets():
    config = small_config()
    model = textured_model(config)
    frame = pose_frame(model, [0.0, 0.0, 0.0], resolution=16)
    frame.index = 3
    with pytest.raises(DataError):
        refine_pose(frame, model)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
