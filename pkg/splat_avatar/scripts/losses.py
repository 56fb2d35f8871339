#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Training objectives.

- photometric term: (1 - lambda) L1 + lambda (1 - SSIM) / 2 on color images
- normal term: the same form on normal maps mapped from [-1, 1] to [0, 1]
- regularizer: mean (1 - n_i . n_j) over faces sharing an edge

Each public operation returns a LossTerm holding the value and the gradient
w.r.t. its primary input. The *_value helpers stay on the autograd graph and
are what the trainer calls.

Usage:
    Import: from splat_avatar.scripts.losses import LossWeights, total_loss, ssim
"""

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from splat_avatar.config import DTYPE
from splat_avatar.scripts.geometry import as_tensor, face_normals
from splat_avatar.scripts.utils import DataError, UsageError

logger = logging.getLogger("splat_avatar.losses")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    """Mixing weights of the total objective."""

    ssim_lambda: float = 0.2
    w_photo: float = 1.0
    w_normal: float = 1.0
    w_nc: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.ssim_lambda <= 1.0:
            raise UsageError(f"ssim_lambda must be in [0, 1], got {self.ssim_lambda}")
        for name in ("w_photo", "w_normal", "w_nc"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be nonnegative")

    @classmethod
    def from_config(cls, config):
        return cls(config["ssim_lambda"], config["w_photo"], config["w_normal"], config["w_nc"])


@dataclass
class LossTerm:
    """
    Loss value with gradients.

    Attributes:
        value (float): Scalar loss
        gradient (torch.Tensor or dict): Gradient w.r.t. the primary input, or
            a name -> gradient dict for total_loss
        components (dict): Named sub-terms (total_loss only)
    """

    value: float
    gradient: object = None
    components: dict = field(default_factory=dict)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2D Gaussian window as an outer product of 1D taps."""
    coords = torch.arange(size, dtype=DTYPE) - (size - 1) / 2.0
    taps = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    taps = taps / taps.sum()
    return taps.unsqueeze(1) @ taps.unsqueeze(0)


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise DataError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim != 3:
        raise DataError(f"expected (H, W, C) images, got shape {tuple(pred.shape)}")


def _masked_mean(values, mask):
    """Mean of (H, W, C) values over pixels where mask is set."""
    if mask is None:
        return values.mean()
    weights = mask.unsqueeze(-1).expand_as(values).to(values.dtype)
    count = weights.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * weights).sum() / count


def ssim_map(a, b):
    """
    Per-pixel, per-channel SSIM of two (H, W, C) images in [0, 1].

    Statistics use an 11x11 Gaussian window (sigma 1.5) with zero padding so
    the map keeps the image size.
    """
    channels = a.shape[-1]
    window = gaussian_window().expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    pad = SSIM_WINDOW // 2

    def blur(img):
        return F.conv2d(img, window, padding=pad, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_xx = blur(x * x) - mu_xx
    sigma_yy = blur(y * y) - mu_yy
    sigma_xy = blur(x * y) - mu_xy

    luminance = (2.0 * mu_xy + SSIM_C1) / (mu_xx + mu_yy + SSIM_C1)
    contrast = (2.0 * sigma_xy + SSIM_C2) / (sigma_xx + sigma_yy + SSIM_C2)
    return (luminance * contrast).squeeze(0).permute(1, 2, 0)


def ssim(a, b, mask=None):
    """
    Mean SSIM of two (H, W, C) images, averaged per channel then over channels.

    Args:
        a, b (torch.Tensor): Images in [0, 1]
        mask (torch.Tensor, optional): (H, W) bool; statistics only over set pixels

    Returns:
        torch.Tensor: Scalar SSIM (1 for identical images)
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b)
    return _masked_mean(ssim_map(a, b), None if mask is None else torch.as_tensor(mask).bool())


def l1_dssim_value(pred, target, ssim_lambda=0.2, mask=None):
    """Differentiable (1 - lambda) L1 + lambda (1 - SSIM) / 2."""
    pred, target = as_tensor(pred), as_tensor(target)
    _check_pair(pred, target)
    mask = None if mask is None else torch.as_tensor(mask).bool()
    l1 = _masked_mean((pred - target).abs(), mask)
    dssim = (1.0 - _masked_mean(ssim_map(pred, target), mask)) / 2.0
    return (1.0 - ssim_lambda) * l1 + ssim_lambda * dssim


def normal_loss_value(pred_normal, target_normal, ssim_lambda=0.2, mask=None):
    """l1_dssim_value on normals mapped from [-1, 1] to [0, 1]."""
    return l1_dssim_value(
        (as_tensor(pred_normal) + 1.0) * 0.5, (as_tensor(target_normal) + 1.0) * 0.5, ssim_lambda, mask
    )


def normal_consistency_value(posed_vertices, mesh):
    """
    Mean (1 - n_i . n_j) over edge-adjacent face pairs.

    Pairs touching a degenerate face are skipped; without valid pairs the
    value is zero.
    """
    posed_vertices = as_tensor(posed_vertices)
    pairs = torch.as_tensor(mesh.face_adjacency, dtype=torch.long)
    if len(pairs) == 0:
        return posed_vertices.sum() * 0.0
    normals, valid = face_normals(posed_vertices, mesh.faces)
    keep = valid[pairs[:, 0]] & valid[pairs[:, 1]]
    if not bool(keep.any()):
        return posed_vertices.sum() * 0.0
    skipped = int((~keep).sum())
    if skipped:
        logger.debug(f"Skipping {skipped} face pairs with degenerate faces")
    pairs = pairs[keep]
    cosine = (normals[pairs[:, 0]] * normals[pairs[:, 1]]).sum(dim=-1)
    return (1.0 - cosine).mean()


def _with_gradient(fn, primary, *args, **kwargs):
    leaf = as_tensor(primary).detach().clone().requires_grad_(True)
    value = fn(leaf, *args, **kwargs)
    (gradient,) = torch.autograd.grad(value, leaf)
    return LossTerm(value=float(value.detach()), gradient=gradient)


def l1_dssim(pred, target, ssim_lambda=0.2, mask=None):
    """
    Photometric loss and its gradient w.r.t. `pred`.

    Args:
        pred, target (torch.Tensor): (H, W, 3) images in [0, 1]
        ssim_lambda (float): D-SSIM mix weight
        mask (torch.Tensor, optional): (H, W) foreground mask of the target

    Returns:
        LossTerm: value and (H, W, 3) gradient

    Raises:
        DataError: If the shapes differ
    """
    return _with_gradient(l1_dssim_value, pred, as_tensor(target).detach(), ssim_lambda, mask)


def normal_loss(pred_normal, target_normal, ssim_lambda=0.2, mask=None):
    """Normal-map loss and its gradient w.r.t. the signed `pred_normal`."""
    return _with_gradient(normal_loss_value, pred_normal, as_tensor(target_normal).detach(), ssim_lambda, mask)


def normal_consistency(posed_vertices, mesh):
    """Normal-consistency regularizer and its gradient w.r.t. the vertices."""
    return _with_gradient(normal_consistency_value, posed_vertices, mesh)


def objective(pred_color, gt_color, pred_normal, gt_normal, posed_vertices, mesh, weights, mask=None):
    """
    Differentiable weighted sum of all terms.

    A missing normal target (None) or a zero weight drops that term.

    Returns:
        tuple: (total tensor, dict of component tensors l_rgb, l_normal, l_nc)
    """
    zero = as_tensor(pred_color).sum() * 0.0
    l_rgb = l1_dssim_value(pred_color, gt_color, weights.ssim_lambda, mask) if weights.w_photo > 0 else zero
    if gt_normal is not None and weights.w_normal > 0:
        l_normal = normal_loss_value(pred_normal, gt_normal, weights.ssim_lambda, mask)
    else:
        l_normal = zero
    l_nc = normal_consistency_value(posed_vertices, mesh) if weights.w_nc > 0 else zero
    total = weights.w_photo * l_rgb + weights.w_normal * l_normal + weights.w_nc * l_nc
    if not math.isfinite(float(total.detach())):
        logger.warning("Objective is not finite")
    return total, {"l_rgb": l_rgb, "l_normal": l_normal, "l_nc": l_nc}


def total_loss(pred_color, gt_color, pred_normal, gt_normal, posed_vertices, mesh, weights, mask=None):
    """
    Total loss with gradients routed to each input.

    Returns:
        LossTerm: value, gradient dict with keys pred_color, pred_normal and
            posed_vertices, and float components
    """
    leaves = {
        "pred_color": as_tensor(pred_color).detach().clone().requires_grad_(True),
        "pred_normal": as_tensor(pred_normal).detach().clone().requires_grad_(True),
        "posed_vertices": as_tensor(posed_vertices).detach().clone().requires_grad_(True),
    }
    total, components = objective(
        leaves["pred_color"], as_tensor(gt_color).detach(),
        leaves["pred_normal"], None if gt_normal is None else as_tensor(gt_normal).detach(),
        leaves["posed_vertices"], mesh, weights, mask,
    )
    grads = torch.autograd.grad(total, list(leaves.values()), allow_unused=True)
    gradient = {
        name: (grad if grad is not None else torch.zeros_like(leaf))
        for (name, leaf), grad in zip(leaves.items(), grads)
    }
    return LossTerm(
        value=float(total.detach()),
        gradient=gradient,
        components={name: float(term.detach()) for name, term in components.items()},
    )
