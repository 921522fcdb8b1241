"""Multi-view self-attention over per-view representation tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig

# additive logit offset for hidden views; exp() of it underflows to exactly 0
MASK_OFFSET = -1e9


def build_attention_mask(n_views: int, masked: bool) -> torch.Tensor:
    """``[N, N]`` bool matrix; entry ``(n, k)`` is True iff row ``n`` may see view ``k``."""
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    full = torch.ones(n_views, n_views, dtype=torch.bool)
    return torch.tril(full) if masked else full


@dataclass
class AttendedSequence:
    reps: torch.Tensor  # [B, N, d]
    scores: torch.Tensor  # [B, L, H, N, N]

    def mean_scores(self) -> torch.Tensor:
        """Final-layer scores averaged over heads, ``[B, N, N]``."""
        return self.scores[:, -1].mean(dim=1)


class AttentionLayer(nn.Module):
    """Post-norm transformer encoder block."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        if d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ffn_mult * d)
        self.ff2 = nn.Linear(ffn_mult * d, d)
        self.norm2 = nn.LayerNorm(d)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.d // self.heads).transpose(1, 2)

    def logits(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k = self._split(self.query(tokens)), self._split(self.key(tokens))
        return q @ k.transpose(-1, -2) / math.sqrt(self.d // self.heads)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor):
        b, n, _ = tokens.shape
        if mask.shape != (n, n):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {n} tokens")
        offset = torch.zeros(n, n, dtype=tokens.dtype)
        offset = offset.masked_fill(~mask, MASK_OFFSET)
        scores = torch.softmax(self.logits(tokens) + offset, dim=-1)
        heads = scores @ self._split(self.value(tokens))
        attended = self.out(heads.transpose(1, 2).reshape(b, n, self.d))
        x = self.norm1(tokens + attended)
        x = self.norm2(x + self.ff2(F.relu(self.ff1(x))))
        return x, scores


class MultiViewAttention(nn.Module):
    """Stack of encoder blocks; no positional encoding is added."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.max_views = cfg.max_views
        self.blocks = nn.ModuleList(AttentionLayer(cfg.d, cfg.heads, cfg.ffn_mult) for _ in range(cfg.layers))

    def forward(self, reps: torch.Tensor, masked: bool) -> AttendedSequence:
        n = reps.shape[1]
        if not 1 <= n <= self.max_views:
            raise ValueError(f"number of views must be in [1, {self.max_views}], got {n}")
        mask = build_attention_mask(n, masked)
        scores = []
        x = reps
        for block in self.blocks:
            x, s = block(x, mask)
            scores.append(s)
        return AttendedSequence(x, torch.stack(scores, dim=1))
