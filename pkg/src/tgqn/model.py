"""Observation ordering and the three model variants (tgqn, seqgqn, gqn)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import AttendedSequence, MultiViewAttention
from .config import ModelConfig, RunConfig
from .decoder import GENERATION, TRAINING, SequentialDecoder, StepOutput
from .encoder import Tower, aggregate_sum, encode_observation, init_parameters, pose_vectors
from .objectives import LossBreakdown, gqn_loss, tgqn_loss


@dataclass
class OrderedContext:
    """A batch of context sequences plus one query each.

    ``frames`` ``[B, N, 3, H, W]`` and ``poses`` ``[B, N, 5]`` are the
    observations in rendering order; ``query_frame`` may be None when the
    target view is unknown.
    """

    frames: torch.Tensor
    poses: torch.Tensor
    query_pose: torch.Tensor
    query_frame: torch.Tensor | None = None

    @property
    def n_views(self) -> int:
        return self.frames.shape[1]

    @property
    def step_queries(self) -> torch.Tensor:
        """Pose vectors ``(v_2, ..., v_N, v_q)``."""
        poses = torch.cat([self.poses[:, 1:], self.query_pose[:, None]], dim=1)
        return pose_vectors(poses)

    @property
    def step_targets(self) -> torch.Tensor:
        """Frames ``(I_2, ..., I_N, I_q)``."""
        if self.query_frame is None:
            raise ValueError("query frame unknown")
        return torch.cat([self.frames[:, 1:], self.query_frame[:, None]], dim=1)

    def to(self, dtype) -> "OrderedContext":
        qf = None if self.query_frame is None else self.query_frame.to(dtype)
        return OrderedContext(self.frames.to(dtype), self.poses.to(dtype), self.query_pose.to(dtype), qf)


def distance_order(positions: np.ndarray, query_position: np.ndarray) -> np.ndarray:
    """Indices sorting ``positions`` by distance to the query; ties keep input order."""
    d = np.linalg.norm(np.asarray(positions, dtype=np.float64) - np.asarray(query_position, dtype=np.float64), axis=-1)
    return np.argsort(d, kind="stable")


def order_observations(observations, query_pose, query_frame=None) -> OrderedContext:
    """Sort ``(frame, PoseSpec)`` observations by distance to ``query_pose``.

    Frames are ``[H, W, 3]`` arrays in ``[0, 1]``. Returns a batch of one.
    """
    if len(observations) == 0:
        raise ValueError("at least one observation is required")
    poses = np.stack([p.as_array() for _, p in observations])
    order = distance_order(poses[:, :3], query_pose.as_array()[:3])
    frames = np.stack([np.asarray(observations[i][0], dtype=np.float64) for i in order])
    frames_t = torch.from_numpy(frames).permute(0, 3, 1, 2)[None].float()
    qf = None
    if query_frame is not None:
        qf = torch.from_numpy(np.asarray(query_frame, dtype=np.float64)).permute(2, 0, 1)[None].float()
    return OrderedContext(
        frames_t,
        torch.from_numpy(poses[order])[None].float(),
        torch.from_numpy(query_pose.as_array())[None].float(),
        qf,
    )


class TGQN(nn.Module):
    """Encoder, optional multi-view attention, and sequential decoder."""

    def __init__(self, cfg: ModelConfig, variant: str = "tgqn", masked: bool = True, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg, self.variant, self.masked = cfg, variant, masked
        self.encoder = Tower(cfg)
        self.attention = MultiViewAttention(cfg) if variant == "tgqn" else None
        self.decoder = SequentialDecoder(cfg)
        init_parameters(self, seed)

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "TGQN":
        return cls(run.model_config(), run.variant, run.masked, run.seed)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, ctx: OrderedContext) -> torch.Tensor:
        return encode_observation(self.encoder, ctx.frames, ctx.poses)

    def _targets(self, ctx, mode):
        if mode == TRAINING:
            return ctx.step_targets
        return None

    def forward_tgqn(self, ctx: OrderedContext, mode: str, generator=None, on_step=None):
        if self.attention is None:
            raise ValueError(f"variant {self.variant!r} has no attention stack")
        reps = self.encode(ctx)
        attended = self.attention(reps, self.masked)
        outs = self.decoder.decode_sequence(
            attended.reps, ctx.step_queries, self._targets(ctx, mode), mode, generator, on_step
        )
        return outs, attended

    def forward_seqgqn(self, ctx: OrderedContext, mode: str, generator=None, on_step=None):
        reps = self.encode(ctx)
        summed = aggregate_sum(reps)
        conditioning = summed[:, None].expand(-1, ctx.n_views, -1)
        return self.decoder.decode_sequence(
            conditioning, ctx.step_queries, self._targets(ctx, mode), mode, generator, on_step
        )

    def forward_gqn(self, ctx: OrderedContext, mode: str, generator=None, on_step=None) -> StepOutput:
        if ctx.n_views < 1:
            raise ValueError("at least one observation is required")
        summed = aggregate_sum(self.encode(ctx))
        target = ctx.query_frame[:, None] if mode == TRAINING else None
        if mode == TRAINING and ctx.query_frame is None:
            raise ValueError("training mode needs the query frame")
        (out,) = self.decoder.decode_sequence(
            summed[:, None], pose_vectors(ctx.query_pose)[:, None], target, mode, generator, on_step
        )
        return out

    def run(self, ctx: OrderedContext, mode: str, generator=None, on_step=None):
        """Variant dispatch: ``(step_outputs, attended_or_None)``."""
        if self.variant == "tgqn":
            return self.forward_tgqn(ctx, mode, generator, on_step)
        if self.variant == "seqgqn":
            return self.forward_seqgqn(ctx, mode, generator, on_step), None
        if self.variant == "gqn":
            return [self.forward_gqn(ctx, mode, generator, on_step)], None
        raise ValueError(f"unknown variant {self.variant!r}")

    def loss(self, ctx: OrderedContext, beta: float, sigma: float, generator=None) -> tuple[LossBreakdown, list]:
        outs, _ = self.run(ctx, TRAINING, generator)
        if self.variant == "gqn":
            return gqn_loss(outs[0], ctx.query_frame, sigma), outs
        return tgqn_loss(outs, ctx.step_targets, beta, sigma), outs

    @torch.no_grad()
    def predict(self, ctx: OrderedContext, generator=None) -> torch.Tensor:
        """Generation-mode prediction of the query view, ``[B, 3, H, W]``."""
        outs, _ = self.run(ctx, GENERATION, generator)
        return outs[-1].predicted


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
