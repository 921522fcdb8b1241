"""Central finite-difference checks against autograd.

The numeric side always runs in float64. Its rounding noise is roughly
``eps64 * |L| / h`` per entry, so entries whose true gradient is below that
level cannot be resolved; ``floor`` makes the relative error well defined
there and ``resolvable`` flags the entries that carry real signal. The
analytic side is trusted down to ``ANALYTIC_ULPS`` ulps of the largest
gradient; below that, accumulated rounding in the backward pass dominates
(a structurally zero gradient comes back as about 1e-7 of the scale in float32).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch


DEFAULT_STEP = 1e-5
EPS64 = float(np.finfo(np.float64).eps)
ANALYTIC_ULPS = 1e3


@dataclass
class GradCheckResult:
    names: list
    analytic: np.ndarray
    numeric: np.ndarray
    noise: float = 0.0  # expected float64 rounding error of one central difference
    analytic_eps: float = EPS64  # machine epsilon of the analytic side

    @property
    def floor(self) -> float:
        scale = float(np.abs(self.analytic).max()) if len(self.analytic) else 0.0
        return max(ANALYTIC_ULPS * self.analytic_eps * scale + self.noise, 1e-300)

    @property
    def rel_err(self) -> np.ndarray:
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), self.floor)
        return np.abs(self.analytic - self.numeric) / denom

    def resolvable(self, margin: float = 1e5) -> np.ndarray:
        """Entries whose numeric gradient exceeds the rounding noise by ``margin``."""
        return np.abs(self.numeric) > margin * self.noise

    def worst(self):
        i = int(self.rel_err.argmax())
        return self.names[i], float(self.analytic[i]), float(self.numeric[i]), float(self.rel_err[i])


def sample_entries(module: torch.nn.Module, count: int, rng: np.random.Generator, prefixes=None):
    """Pick ``count`` (parameter name, flat index) pairs spread over all tensors.

    With ``prefixes`` the picks are split evenly across parameter groups whose
    names start with each prefix.
    """
    params = dict(module.named_parameters())
    groups = [list(params)] if prefixes is None else [[n for n in params if n.startswith(p)] for p in prefixes]
    picks = []
    for g, names in enumerate(groups):
        share = count // len(groups) + (1 if g < count % len(groups) else 0)
        for _ in range(share):
            name = names[rng.integers(len(names))]
            picks.append((name, int(rng.integers(params[name].numel()))))
    return picks


def check_parameters(model32: torch.nn.Module, loss_fn, entries, eps: float = DEFAULT_STEP) -> GradCheckResult:
    """Compare autograd gradients of ``loss_fn(model32)`` with float64 central differences.

    ``loss_fn(model)`` must be deterministic and return a scalar tensor. The
    numeric side runs on a float64 copy of ``model32``; the analytic side runs
    at the model's own precision.
    """
    model32.zero_grad()
    loss_fn(model32).backward()
    grads = {n: p.grad.detach().double().flatten().clone() for n, p in model32.named_parameters() if p.grad is not None}
    analytic_eps = float(torch.finfo(next(model32.parameters()).dtype).eps)
    model64 = copy.deepcopy(model32).double()
    params64 = dict(model64.named_parameters())
    analytic, numeric = [], []
    with torch.no_grad():
        base = abs(loss_fn(model64).item())
        for name, idx in entries:
            flat = params64[name].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_fn(model64).item()
            flat[idx] = orig - eps
            down = loss_fn(model64).item()
            flat[idx] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(grads[name][idx].item() if name in grads else 0.0)
    return GradCheckResult([f"{n}[{i}]" for n, i in entries], np.array(analytic), np.array(numeric),
                           EPS64 * base / eps, analytic_eps)


def check_input(fn, fn64, x: torch.Tensor, entries, eps: float = DEFAULT_STEP) -> GradCheckResult:
    """Same check for an input tensor: ``fn(x)`` and its float64 twin ``fn64`` return scalars."""
    analytic_eps = float(torch.finfo(x.dtype).eps)
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    g = x.grad.detach().double().flatten()
    x64 = x.detach().double().clone()
    flat = x64.view(-1)
    analytic, numeric = [], []
    with torch.no_grad():
        base = abs(fn64(x64).item())
        for idx in entries:
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = fn64(x64).item()
            flat[idx] = orig - eps
            down = fn64(x64).item()
            flat[idx] = orig
            numeric.append((up - down) / (2 * eps))
            analytic.append(g[idx].item())
    return GradCheckResult([f"x[{i}]" for i in entries], np.array(analytic), np.array(numeric),
                           EPS64 * base / eps, analytic_eps)
