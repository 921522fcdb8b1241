"""Per-view tower encoder and pose featurization."""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .scene_forge import PoseSpec

POSE_VEC_DIM = 7


def pose_to_vector(pose: PoseSpec) -> np.ndarray:
    x, y, z = pose.position
    return np.array(
        [x, y, z, math.cos(pose.yaw), math.sin(pose.yaw), math.cos(pose.pitch), math.sin(pose.pitch)]
    )


def pose_vectors(poses: torch.Tensor) -> torch.Tensor:
    """Batched ``pose_to_vector``: ``[..., 5] -> [..., 7]``."""
    yaw, pitch = poses[..., 3], poses[..., 4]
    return torch.cat(
        [poses[..., :3], torch.stack([yaw.cos(), yaw.sin(), pitch.cos(), pitch.sin()], -1)], -1
    )


def tile(vec: torch.Tensor, size: int) -> torch.Tensor:
    """Broadcast ``[B, C]`` over a ``size x size`` grid."""
    return vec[:, :, None, None].expand(-1, -1, size, size)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm gains."""
    g = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters()):
        with torch.no_grad():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:
                p.fill_(1.0)
            else:
                # transposed convs store (in, out, ...): fan-in is dim 0 there
                fan_in = p[0].numel() if "upsample" not in name else p.shape[0] * p[0, 0].numel()
                bound = math.sqrt(3.0 / fan_in)
                p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64).mul(2).sub(1).mul(bound))


class Tower(nn.Module):
    """Six conv stages pooled to one ``d``-vector per view."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.tower_channels
        self.image_size = cfg.image_size
        self.conv1 = nn.Conv2d(3, c, 2, stride=2)
        self.conv2 = nn.Conv2d(c + POSE_VEC_DIM, c, 3, padding=1)
        self.conv3 = nn.Conv2d(c, c, 2, stride=2)
        self.conv4 = nn.Conv2d(c, c, 3, padding=1)
        self.conv5 = nn.Conv2d(c, c, 3, padding=1)
        self.conv6 = nn.Conv2d(c, cfg.d, 1)

    def forward(self, frames: torch.Tensor, pose_vec: torch.Tensor) -> torch.Tensor:
        if frames.shape[-3:] != (3, self.image_size, self.image_size):
            raise ConfigError(
                f"expected frames of shape [B, 3, {self.image_size}, {self.image_size}], got {tuple(frames.shape)}"
            )
        x = F.relu(self.conv1(frames))
        x = F.relu(self.conv2(torch.cat([x, tile(pose_vec, x.shape[-1])], 1))) + x
        x = F.relu(self.conv3(x))
        x = F.relu(self.conv4(x)) + x
        x = F.relu(self.conv5(x))
        return self.conv6(x).mean(dim=(2, 3))


def encode_observation(tower: Tower, frames: torch.Tensor, poses: torch.Tensor) -> torch.Tensor:
    """Encode ``[..., 3, H, W]`` frames with ``[..., 5]`` poses to ``[..., d]``."""
    lead = frames.shape[:-3]
    r = tower(frames.reshape(-1, *frames.shape[-3:]), pose_vectors(poses.reshape(-1, poses.shape[-1])))
    return r.reshape(*lead, -1)


def aggregate_sum(reps) -> torch.Tensor:
    """Element-wise sum over views (a list, or dim -2 of a tensor).

    Float32 inputs are accumulated in float64, where a handful of partial sums
    is exact, so the result does not depend on view order.
    """
    if isinstance(reps, (list, tuple)):
        if not reps:
            raise ValueError("aggregate_sum needs at least one representation")
        reps = torch.stack(list(reps), dim=-2)
    if reps.shape[-2] == 0:
        raise ValueError("aggregate_sum needs at least one representation")
    if reps.dtype == torch.float32:
        return reps.double().sum(dim=-2).float()
    return reps.sum(dim=-2)
