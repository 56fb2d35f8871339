#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
Differentiable splat rasterizer.

Pipeline per render:
1. project_splats(): perspective mean, EWA covariance J W Sigma W^T J^T + 0.3 I,
   3-sigma radius, near-plane culling
2. one global depth sort (ties broken by splat index)
3. composite_channels(): front-to-back alpha blending in 16x16 tiles,
   alpha = min(opacity * G, 0.99), stop once transmittance would drop
   below 1e-4, background weighted by the final transmittance

The color and normal passes share steps 1-3; normals travel through the
blend as degree-0 SH coefficients n / sqrt(4 pi) and are decoded after.
Gradients come from torch autograd; rasterize_backward() exposes them for a
cached render.

Usage:
    Import: from splat_avatar.scripts.splatting import Camera, rasterize, rasterize_backward
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from splat_avatar.config import (
    ALPHA_CAP,
    DILATION_PX2,
    DTYPE,
    NEAR_PLANE,
    RADIUS_SIGMA,
    TILE_SIZE,
    TRANSMITTANCE_EPS,
)
from splat_avatar.scripts.geometry import as_tensor
from splat_avatar.scripts.utils import CacheError, DataError

logger = logging.getLogger("splat_avatar.splatting")

# Degree-0 spherical harmonic Y_0^0 = 1 / sqrt(4 pi)
SH_C0 = 0.28209479177387814

SINGULAR_DET = 1e-12

# depths closer than this count as tied and keep splat index order
DEPTH_TIE_TOLERANCE = 1e-9


@dataclass
class Camera:
    """
    Pinhole camera with OpenCV axes (x right, y down, z forward).

    Attributes:
        world_to_camera (numpy.ndarray): (4, 4) rigid transform
        fx, fy (float): Focal lengths in pixels
        cx, cy (float): Principal point in pixels
        width, height (int): Resolution
    """

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.fx, self.fy, self.cx, self.cy = (float(v) for v in (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise DataError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise DataError("camera resolution must be positive")
        rotation = self.world_to_camera[:3, :3]
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > 1e-6:
            raise DataError("camera rotation block is not orthonormal")

    def rotation(self):
        return torch.as_tensor(self.world_to_camera[:3, :3], dtype=DTYPE)

    def translation(self):
        return torch.as_tensor(self.world_to_camera[:3, 3], dtype=DTYPE)

    @classmethod
    def look_at(cls, eye, target, up, fov_degrees, width, height):
        """Camera at `eye` looking at `target`, image y pointing against `up`."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        world_to_camera = np.eye(4)
        world_to_camera[:3, :3] = rotation
        world_to_camera[:3, 3] = -rotation @ eye
        focal = 0.5 * width / math.tan(math.radians(fov_degrees) / 2.0)
        return cls(world_to_camera, focal, focal, width / 2.0, height / 2.0, width, height)

    def to_dict(self):
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, document):
        try:
            return cls(**{key: document[key] for key in ("world_to_camera", "fx", "fy", "cx", "cy", "width", "height")})
        except KeyError as e:
            raise DataError(f"camera is missing field {e}") from e


@dataclass
class SplatScreen:
    """Projected splats (batched over N)."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    radius: torch.Tensor
    visible: torch.Tensor
    color: torch.Tensor = None
    opacity: torch.Tensor = None


@dataclass
class ImagePlane:
    """
    Rendered or loaded image. Colors are in [0, 1], normals are signed.

    Attributes:
        color (torch.Tensor): (H, W, 3) or None
        alpha (torch.Tensor): (H, W) accumulated opacity, or a mask
        normal (torch.Tensor): (H, W, 3) or None
    """

    color: torch.Tensor = None
    alpha: torch.Tensor = None
    normal: torch.Tensor = None

    @property
    def shape(self):
        return tuple(self.alpha.shape)


@dataclass
class RasterCache:
    """Graph handles kept from a forward render for rasterize_backward()."""

    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


def normal_to_sh(normals):
    """Degree-0 SH coefficient of a normal: n * Y_0^0."""
    return as_tensor(normals) * SH_C0


def sh_to_normal(coefficients):
    """Inverse of normal_to_sh: coefficient * sqrt(4 pi)."""
    return as_tensor(coefficients) / SH_C0


def conic_from_cov2d(cov2d):
    """
    Inverse of 2x2 covariances as (a, b, c) with inverse [[a, b], [b, c]].

    Covariances with determinant below SINGULAR_DET are dilated by 0.3 px^2 first.
    """
    cov2d = as_tensor(cov2d)
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    singular = (a * c - b * b).detach() <= SINGULAR_DET
    a = torch.where(singular, a + DILATION_PX2, a)
    c = torch.where(singular, c + DILATION_PX2, c)
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def eval_gaussian2d(mean2d, cov2d, pixel):
    """
    Unnormalized 2D Gaussian exp(-1/2 d^T cov^-1 d) with d = pixel - mean.

    Args:
        mean2d (torch.Tensor): (..., 2) means in pixels
        cov2d (torch.Tensor): (..., 2, 2) covariances in px^2
        pixel (torch.Tensor): (..., 2) query positions

    Returns:
        torch.Tensor: (...) weights in (0, 1]
    """
    conic = conic_from_cov2d(cov2d)
    d = as_tensor(pixel) - as_tensor(mean2d)
    power = -0.5 * (conic[..., 0] * d[..., 0] ** 2 + 2.0 * conic[..., 1] * d[..., 0] * d[..., 1] + conic[..., 2] * d[..., 1] ** 2)
    return torch.exp(power)


def projection_jacobian(camera_points, camera):
    """(N, 2, 3) Jacobian of the pinhole projection at camera-space points."""
    x, y, z = camera_points.unbind(-1)
    zero = torch.zeros_like(z)
    row_u = torch.stack([camera.fx / z, zero, -camera.fx * x / (z * z)], dim=-1)
    row_v = torch.stack([zero, camera.fy / z, -camera.fy * y / (z * z)], dim=-1)
    return torch.stack([row_u, row_v], dim=-2)


def project_splats(centers, covariances, camera, near=NEAR_PLANE, valid=None, radius_sigma=RADIUS_SIGMA):
    """
    Project 3D splats to the image plane.

    Args:
        centers (torch.Tensor): (N, 3) world-space centers
        covariances (torch.Tensor): (N, 3, 3) world-space covariances
        camera (Camera): Target camera
        near (float): Splats with camera z <= near are culled
        valid (torch.Tensor, optional): (N,) bool mask, False culls a splat
        radius_sigma (float or None): Cutoff radius in standard deviations;
            None disables the cutoff (infinite radius)

    Returns:
        SplatScreen: Projected splats
    """
    centers = as_tensor(centers).reshape(-1, 3)
    covariances = as_tensor(covariances).reshape(-1, 3, 3)
    rotation, translation = camera.rotation(), camera.translation()

    cam_points = centers @ rotation.T + translation
    depth = cam_points[:, 2]
    visible = depth.detach() > near
    if valid is not None:
        visible = visible & torch.as_tensor(valid, dtype=torch.bool)

    # culled splats still need finite values downstream
    safe = torch.where(visible.unsqueeze(-1), cam_points, torch.ones_like(cam_points))
    mean2d = torch.stack(
        [camera.fx * safe[:, 0] / safe[:, 2] + camera.cx, camera.fy * safe[:, 1] / safe[:, 2] + camera.cy],
        dim=-1,
    )

    jacobian = projection_jacobian(safe, camera)
    cov_cam = rotation @ covariances @ rotation.T
    cov2d = jacobian @ cov_cam @ jacobian.transpose(-1, -2)
    cov2d = cov2d + DILATION_PX2 * torch.eye(2, dtype=cov2d.dtype)

    with torch.no_grad():
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        mid = 0.5 * (a + c)
        lambda_max = mid + torch.sqrt(torch.clamp(mid * mid - (a * c - b * b), min=0.0))
        if radius_sigma is None:
            radius = torch.full_like(a, math.inf)
        else:
            radius = radius_sigma * torch.sqrt(lambda_max)

    return SplatScreen(mean2d=mean2d, cov2d=cov2d, depth=depth, radius=radius, visible=visible)


def depth_order(splats):
    """
    Indices of visible splats sorted by depth, ties broken by index.

    Depths are quantized to DEPTH_TIE_TOLERANCE first, so splats at equal depth
    keep their order under roundoff-level parameter changes.
    """
    candidates = torch.nonzero(splats.visible, as_tuple=False).reshape(-1)
    keys = torch.round(splats.depth.detach()[candidates] / DEPTH_TIE_TOLERANCE)
    return candidates[torch.sort(keys, stable=True).indices]


def _blend_tile(pixels, mean2d, conic, radius, opacity, colors, background):
    """
    Front-to-back blend of depth-sorted splats over a block of pixels.

    Returns:
        tuple: (channels (P, C), alpha (P,))
    """
    if mean2d.shape[0] == 0:
        channels = background.unsqueeze(0).expand(pixels.shape[0], -1)
        return channels, torch.zeros(pixels.shape[0], dtype=background.dtype)

    d = pixels.unsqueeze(1) - mean2d.unsqueeze(0)
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy)
    alpha = (opacity.unsqueeze(0) * torch.exp(power)).clamp(0.0, ALPHA_CAP)
    inside = (dx * dx + dy * dy).detach() <= radius.unsqueeze(0) ** 2
    alpha = torch.where(inside, alpha, torch.zeros_like(alpha))

    # a splat is dropped once it would push transmittance below the threshold;
    # since transmittance only decreases, the kept splats form a prefix
    with torch.no_grad():
        keep = torch.cumprod(1.0 - alpha, dim=1) >= TRANSMITTANCE_EPS
    alpha = torch.where(keep, alpha, torch.zeros_like(alpha))

    transmittance = torch.cumprod(1.0 - alpha, dim=1)
    before = torch.cat([torch.ones_like(transmittance[:, :1]), transmittance[:, :-1]], dim=1)
    weights = alpha * before
    final = transmittance[:, -1]
    channels = weights @ colors + final.unsqueeze(-1) * background.unsqueeze(0)
    return channels, 1.0 - final


def composite_channels(splats, camera, background, tile_size=TILE_SIZE):
    """
    Depth-sorted front-to-back compositing of arbitrary per-splat channels.

    Args:
        splats (SplatScreen): Projected splats with color (N, C) and opacity (N,)
        camera (Camera): Camera the splats were projected with
        background (sequence or torch.Tensor): (C,) background value
        tile_size (int): Traversal tile edge in pixels (does not change output)

    Returns:
        tuple: (channels (H, W, C), alpha (H, W))
    """
    colors = as_tensor(splats.color)
    channel_count = colors.shape[-1]
    background = as_tensor(background).reshape(channel_count).to(colors.dtype)
    opacity = splats.opacity
    if opacity is None:
        opacity = torch.ones(colors.shape[0], dtype=colors.dtype)

    order = depth_order(splats)
    mean2d = splats.mean2d[order]
    conic = conic_from_cov2d(splats.cov2d[order])
    radius = splats.radius[order]
    opacity = as_tensor(opacity)[order]
    colors = colors[order]

    with torch.no_grad():
        reach = torch.where(torch.isfinite(radius), radius, torch.full_like(radius, 1e30))
        low = mean2d.detach() - reach.unsqueeze(-1)
        high = mean2d.detach() + reach.unsqueeze(-1)

    rows, alphas = [], []
    for top in range(0, camera.height, tile_size):
        bottom = min(top + tile_size, camera.height)
        row_tiles, row_alpha = [], []
        for left in range(0, camera.width, tile_size):
            right = min(left + tile_size, camera.width)
            ys, xs = torch.meshgrid(
                torch.arange(top, bottom, dtype=DTYPE) + 0.5,
                torch.arange(left, right, dtype=DTYPE) + 0.5,
                indexing="ij",
            )
            pixels = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)

            touches = (
                (high[:, 0] >= left + 0.5) & (low[:, 0] <= right - 0.5)
                & (high[:, 1] >= top + 0.5) & (low[:, 1] <= bottom - 0.5)
            )
            idx = torch.nonzero(touches, as_tuple=False).reshape(-1)
            channels, alpha = _blend_tile(
                pixels, mean2d[idx], conic[idx], radius[idx], opacity[idx], colors[idx], background
            )
            row_tiles.append(channels.reshape(bottom - top, right - left, channel_count))
            row_alpha.append(alpha.reshape(bottom - top, right - left))
        rows.append(torch.cat(row_tiles, dim=1))
        alphas.append(torch.cat(row_alpha, dim=1))
    return torch.cat(rows, dim=0), torch.cat(alphas, dim=0)


def composite(splats, camera, background=(0.0, 0.0, 0.0), tile_size=TILE_SIZE):
    """Color pass: composite splat colors over `background`."""
    color, alpha = composite_channels(splats, camera, background, tile_size)
    return ImagePlane(color=color, alpha=alpha)


def render_normals(centers, covariances, normals, camera, valid=None, opacity=None, tile_size=TILE_SIZE):
    """
    Normal pass: composite SH-encoded normals over a zero background and decode.

    Args:
        centers (torch.Tensor): (N, 3) splat centers
        covariances (torch.Tensor): (N, 3, 3) splat covariances
        normals (torch.Tensor): (N, 3) unit face normals
        camera (Camera): Target camera
        valid (torch.Tensor, optional): (N,) mask of renderable splats

    Returns:
        ImagePlane: normal (H, W, 3) signed, alpha (H, W)
    """
    splats = project_splats(centers, covariances, camera, valid=valid)
    splats.color = normal_to_sh(normals)
    splats.opacity = opacity
    coefficients, alpha = composite_channels(splats, camera, torch.zeros(3, dtype=DTYPE), tile_size)
    return ImagePlane(normal=sh_to_normal(coefficients), alpha=alpha)


def rasterize(centers, covariances, colors, normals, camera, background=(0.0, 0.0, 0.0), valid=None,
              opacity=None, tile_size=TILE_SIZE, radius_sigma=RADIUS_SIGMA):
    """
    Color and normal passes in one sweep over six channels.

    Both passes share projection, depth order and per-pixel weights; the
    normal half blends SH coefficients over a zero background.

    Returns:
        tuple: (ImagePlane with color, alpha and normal, RasterCache)
    """
    centers = as_tensor(centers)
    covariances = as_tensor(covariances)
    colors = as_tensor(colors)
    normals = as_tensor(normals)
    if opacity is None:
        opacity = torch.ones(centers.shape[0], dtype=DTYPE)

    splats = project_splats(centers, covariances, camera, valid=valid, radius_sigma=radius_sigma)
    splats.color = torch.cat([colors, normal_to_sh(normals)], dim=-1)
    splats.opacity = opacity
    full_background = torch.cat([as_tensor(background).reshape(3), torch.zeros(3, dtype=DTYPE)])
    channels, alpha = composite_channels(splats, camera, full_background, tile_size)

    image = ImagePlane(color=channels[..., :3], alpha=alpha, normal=sh_to_normal(channels[..., 3:]))
    cache = RasterCache(
        inputs={
            "center3d": centers,
            "cov3d": covariances,
            "color": colors,
            "normal": normals,
            "opacity": opacity,
            "mean2d": splats.mean2d,
            "cov2d": splats.cov2d,
        },
        outputs={"color": image.color, "alpha": image.alpha, "normal": image.normal},
    )
    return image, cache


def rasterize_backward(grad_image, cache):
    """
    Reverse-mode pass of a cached rasterize() call.

    Args:
        grad_image (ImagePlane): Gradients w.r.t. the rendered color, alpha
            and normal images; missing planes count as zero
        cache (RasterCache): Cache returned by rasterize()

    Returns:
        dict: Gradient per cached input (center3d, cov3d, color, normal,
            opacity, mean2d, cov2d); zeros for inputs that did not require grad

    Raises:
        CacheError: If the cache is missing or holds no differentiable outputs
    """
    if cache is None or not cache.outputs:
        raise CacheError("no cached forward state for rasterize_backward")

    outputs, grads = [], []
    for name in ("color", "alpha", "normal"):
        out = cache.outputs.get(name)
        grad = getattr(grad_image, name, None)
        if out is None or grad is None or not out.requires_grad:
            continue
        outputs.append(out)
        grads.append(as_tensor(grad).reshape(out.shape))
    names = [name for name, value in cache.inputs.items() if value.requires_grad]
    if not names:
        raise CacheError("cached render has no differentiable inputs")

    result = {name: torch.zeros_like(value) for name, value in cache.inputs.items()}
    if not outputs:
        return result

    computed = torch.autograd.grad(
        outputs, [cache.inputs[name] for name in names], grads, retain_graph=True, allow_unused=True
    )
    for name, grad in zip(names, computed):
        if grad is not None:
            result[name] = grad
    return result
