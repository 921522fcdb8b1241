"""Training objectives and image metrics.

Loss helpers take batched tensors (dim 0 is the batch) and return one value
per example unless stated otherwise. Metrics take single ``[H, W, 3]`` or
``[3, H, W]`` frames with values in ``[0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import LatentGaussian, StepOutput

LOG_2PI = math.log(2 * math.pi)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    recon_per_step: list
    kl_per_step_per_core: list
    beta: float
    sigma: float

    @property
    def recon(self) -> float:
        return float(sum(self.recon_per_step))

    @property
    def kl(self) -> float:
        return float(sum(sum(row) for row in self.kl_per_step_per_core))


def _flat_sum(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).sum(dim=1)


def kl_diag_gaussian(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """Closed-form ``KL(q || p)`` summed over all non-batch dimensions."""
    if q.mean.shape != p.mean.shape or q.log_variance.shape != p.log_variance.shape:
        raise ValueError(f"shape mismatch: {tuple(q.mean.shape)} vs {tuple(p.mean.shape)}")
    # expm1(x) - x is exactly 0 at x = 0 and stays non-negative near it
    diff = q.log_variance - p.log_variance
    kl = 0.5 * (torch.expm1(diff) - diff + (q.mean - p.mean) ** 2 * torch.exp(-p.log_variance))
    return _flat_sum(kl)


def recon_nll(target: torch.Tensor, predicted: torch.Tensor, sigma: float) -> torch.Tensor:
    """Gaussian negative log-likelihood per example, constant term included."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if target.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(predicted.shape)}")
    nll = 0.5 * ((target - predicted) / sigma) ** 2 + math.log(sigma) + 0.5 * LOG_2PI
    return _flat_sum(nll)


def tgqn_loss(step_outputs: list[StepOutput], targets: torch.Tensor, beta: float, sigma: float) -> LossBreakdown:
    """Sequential ELBO; ``targets`` is ``[B, N, 3, H, W]``. Batch-averaged."""
    if len(step_outputs) != targets.shape[1]:
        raise ValueError("one target per rendering step is required")
    recon_steps, kl_rows = [], []
    kl_total = 0.0
    recon_total = 0.0
    for n, out in enumerate(step_outputs):
        if len(out.posteriors) != len(out.priors):
            raise ValueError(f"step {n} has no posteriors; training-mode outputs are required")
        recon = recon_nll(targets[:, n], out.predicted, sigma).mean()
        recon_total = recon_total + recon
        recon_steps.append(float(recon.detach()))
        row = []
        for q, p in zip(out.posteriors, out.priors):
            kl = kl_diag_gaussian(q, p).mean()
            kl_total = kl_total + kl
            row.append(float(kl.detach()))
        kl_rows.append(row)
    total = recon_total + beta * kl_total
    return LossBreakdown(total, recon_steps, kl_rows, float(beta), float(sigma))


def gqn_loss(output: StepOutput, target: torch.Tensor, sigma: float) -> LossBreakdown:
    """Single-step ELBO (``beta = 1``); ``target`` is ``[B, 3, H, W]``."""
    return tgqn_loss([output], target[:, None], 1.0, sigma)


def sigma_schedule(step: int, max_steps: int, start: float = 2.0, end: float = 0.7, anneal_frac: float = 0.8) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    horizon = anneal_frac * max_steps
    if horizon <= 0 or step >= horizon:
        return end
    return start + (end - start) * step / horizon


def lr_schedule(step: int, max_steps: int, start: float = 5e-4, end: float = 5e-5) -> float:
    if max_steps <= 0:
        return start
    frac = min(step / max_steps, 1.0)
    return start + (end - start) * frac


# --------------------------------------------------------------------------
# metrics


def _as_hwc(frame) -> np.ndarray:
    a = np.asarray(frame.detach().cpu() if isinstance(frame, torch.Tensor) else frame, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3 and a.shape[-1] != 3:
        a = a.transpose(1, 2, 0)
    return a


def _check_pair(a, b):
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def pixel_l1(a, b) -> float:
    """Mean absolute difference on the 0-255 scale."""
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(255.0 * a - 255.0 * b)))


def pixel_l2(a, b) -> float:
    """Root-mean-square difference on the 0-255 scale."""
    a, b = _check_pair(a, b)
    return float(np.sqrt(np.mean((255.0 * a - 255.0 * b) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over the valid window positions, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {window}x{window} window")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    w = torch.from_numpy(gaussian_window(window, sigma))[None, None]
    x = torch.from_numpy(a.transpose(2, 0, 1).copy())[:, None]
    y = torch.from_numpy(b.transpose(2, 0, 1).copy())[:, None]

    def filt(t):
        return F.conv2d(t, w)

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean(dim=(1, 2, 3)).mean())


@dataclass
class MetricsReport:
    l1_mean: float
    l1_std: float
    l2_mean: float
    l2_std: float
    ssim_mean: float
    ssim_std: float
    num_images: int

    CSV_HEADER = "variant,seed,l1_mean,l1_std,l2_mean,l2_std,ssim_mean,ssim_std,num_images"

    @classmethod
    def from_values(cls, l1, l2, ss) -> "MetricsReport":
        l1, l2, ss = (np.asarray(v, dtype=np.float64) for v in (l1, l2, ss))
        return cls(
            float(l1.mean()), float(l1.std()), float(l2.mean()), float(l2.std()),
            float(ss.mean()), float(ss.std()), int(l1.size),
        )

    def csv_row(self, variant: str, seed: int) -> str:
        vals = [self.l1_mean, self.l1_std, self.l2_mean, self.l2_std, self.ssim_mean, self.ssim_std]
        return ",".join([variant, str(seed)] + [f"{v:.6f}" for v in vals] + [str(self.num_images)])

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)}\n" for k in (
            "l1_mean", "l1_std", "l2_mean", "l2_std", "ssim_mean", "ssim_std", "num_images"))
