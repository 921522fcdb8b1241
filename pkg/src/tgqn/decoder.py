"""Sequential DRAW-style rendering decoder with state threading.

A rendering step runs ``M`` micro-steps; micro-step ``m`` advances the
``m``-th generation core (and, in training mode, the ``m``-th inference core)
and adds its upsampled hidden state to a shared canvas. The final states of
one rendering step are the initial states of the next.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig
from .encoder import POSE_VEC_DIM, tile

LOGVAR_CLAMP = 10.0
TRAINING, GENERATION = "training", "generation"


@dataclass
class CoreState:
    cell: torch.Tensor
    hidden: torch.Tensor


@dataclass
class DecoderState:
    gen: list
    inf: list
    canvas: torch.Tensor

    def tensors(self) -> list:
        out = []
        for core in self.gen + self.inf:
            out += [core.cell, core.hidden]
        return out + [self.canvas]


@dataclass
class LatentGaussian:
    mean: torch.Tensor
    log_variance: torch.Tensor

    @classmethod
    def from_stats(cls, stats: torch.Tensor) -> "LatentGaussian":
        mean, logvar = stats.chunk(2, dim=1)
        return cls(mean, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mean + torch.exp(0.5 * self.log_variance) * eps


@dataclass
class StepOutput:
    predicted: torch.Tensor  # [B, 3, H, W]
    priors: list
    posteriors: list
    state_out: DecoderState
    z: list = field(default_factory=list)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def forward(self, x, state: CoreState) -> CoreState:
        i, f, o, g = self.gates(torch.cat([x, state.hidden], 1)).chunk(4, 1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
        return CoreState(cell, torch.sigmoid(o) * torch.tanh(cell))


def _check_mode(mode: str, target):
    if mode not in (TRAINING, GENERATION):
        raise ValueError(f"unknown mode {mode!r}")
    if (target is None) == (mode == TRAINING):
        raise ValueError("a target is required in training mode and forbidden in generation mode")


class SequentialDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c, cu, z, k = cfg.core_channels, cfg.canvas_channels, cfg.latent, cfg.kernel
        cond = POSE_VEC_DIM + cfg.d + cu
        self.canvas_down = nn.Conv2d(cu, cu, 4, stride=4)
        self.target_down = nn.Conv2d(3, cu, 4, stride=4)
        self.gen_cores = nn.ModuleList(ConvLSTMCell(z + cond, c, k) for _ in range(cfg.cores))
        self.inf_cores = nn.ModuleList(ConvLSTMCell(cu + c + cond, c, k) for _ in range(cfg.cores))
        self.prior_heads = nn.ModuleList(nn.Conv2d(c, 2 * z, k, padding=k // 2) for _ in range(cfg.cores))
        self.posterior_heads = nn.ModuleList(nn.Conv2d(c, 2 * z, k, padding=k // 2) for _ in range(cfg.cores))
        self.upsample = nn.ModuleList(nn.ConvTranspose2d(c, cu, 4, stride=4) for _ in range(cfg.cores))
        self.output_head = nn.Conv2d(cu, 3, 1)

    def init_state(self, batch: int, dtype=torch.float32) -> DecoderState:
        cfg = self.cfg
        g = cfg.grid

        def core():
            return CoreState(
                torch.zeros(batch, cfg.core_channels, g, g, dtype=dtype),
                torch.zeros(batch, cfg.core_channels, g, g, dtype=dtype),
            )

        return DecoderState(
            [core() for _ in range(cfg.cores)],
            [core() for _ in range(cfg.cores)],
            torch.zeros(batch, cfg.canvas_channels, cfg.image_size, cfg.image_size, dtype=dtype),
        )

    def draw_noise(self, batch: int, generator: torch.Generator | None, dtype) -> torch.Tensor:
        g = self.cfg.grid
        # drawn in float32 so float64 models see the same noise stream
        eps = torch.randn(batch, self.cfg.latent, g, g, generator=generator, dtype=torch.float32)
        return eps.to(dtype)

    def micro_step(self, m, state, r_star, pose_vec, target, eps):
        """Advance core ``m``; returns ``(state, prior, posterior, z)``.

        ``target`` is None in generation mode. ``eps`` is the standard normal
        noise used for the reparameterized sample.
        """
        if not 0 <= m < self.cfg.cores:
            raise IndexError(f"core index {m} out of range")
        g = self.cfg.grid
        cond = torch.cat([tile(pose_vec, g), tile(r_star, g), self.canvas_down(state.canvas)], 1)
        gen, inf = list(state.gen), list(state.inf)
        prior = LatentGaussian.from_stats(self.prior_heads[m](gen[m].hidden))
        posterior = None
        if target is not None:
            inf_in = torch.cat([self.target_down(target), gen[m].hidden, cond], 1)
            inf[m] = self.inf_cores[m](inf_in, inf[m])
            posterior = LatentGaussian.from_stats(self.posterior_heads[m](inf[m].hidden))
            z = posterior.sample(eps)
        else:
            z = prior.sample(eps)
        gen[m] = self.gen_cores[m](torch.cat([z, cond], 1), gen[m])
        canvas = state.canvas + self.upsample[m](gen[m].hidden)
        return DecoderState(gen, inf, canvas), prior, posterior, z

    def render_step(self, r_star, pose_vec, target, state_in, mode, generator=None) -> StepOutput:
        _check_mode(mode, target)
        state = state_in
        priors, posteriors, zs = [], [], []
        for m in range(self.cfg.cores):
            eps = self.draw_noise(r_star.shape[0], generator, r_star.dtype)
            state, prior, posterior, z = self.micro_step(m, state, r_star, pose_vec, target, eps)
            priors.append(prior)
            zs.append(z)
            if posterior is not None:
                posteriors.append(posterior)
        predicted = torch.sigmoid(self.output_head(state.canvas))
        return StepOutput(predicted, priors, posteriors, state, zs)

    def decode_sequence(self, r_stars, query_poses, targets, mode, generator=None, on_step=None):
        """Run one rendering step per row of ``r_stars`` (``[B, N, d]``).

        ``query_poses`` are pose vectors ``[B, N, 7]``; ``targets`` is
        ``[B, N, 3, H, W]`` in training mode and None otherwise.
        ``on_step(n, state_in, output)`` is called after every step.
        """
        b, n = r_stars.shape[:2]
        if query_poses.shape[:2] != (b, n) or (targets is not None and targets.shape[:2] != (b, n)):
            raise ValueError("r_stars, query_poses and targets must agree in batch and sequence length")
        _check_mode(mode, targets)
        state = self.init_state(b, r_stars.dtype)
        outputs = []
        for i in range(n):
            target = None if targets is None else targets[:, i]
            out = self.render_step(r_stars[:, i], query_poses[:, i], target, state, mode, generator)
            if on_step is not None:
                on_step(i, state, out)
            outputs.append(out)
            state = out.state_out
        return outputs
