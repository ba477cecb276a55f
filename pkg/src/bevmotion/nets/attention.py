"""Single-head scaled dot-product attention with key masking.

Kept deliberately small: one head is enough at desk scale and the explicit
weight tensor makes the normalization properties directly testable.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def sinusoidal_grid_encoding(h: int, w: int, channels: int, device, dtype) -> torch.Tensor:
    """(h*w, channels) two-axis sinusoidal position code, size-agnostic."""
    half = channels // 2
    freq = torch.exp(
        torch.arange(0, half, 2, device=device, dtype=dtype) * (-math.log(1e4) / max(half, 1))
    )
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    out = torch.zeros(h, w, channels, device=device, dtype=dtype)
    out[..., 0:half:2] = torch.sin(ys[..., None] * freq)
    out[..., 1:half:2] = torch.cos(ys[..., None] * freq)
    out[..., half::2] = torch.sin(xs[..., None] * freq)
    out[..., half + 1 :: 2] = torch.cos(xs[..., None] * freq)
    return out.reshape(h * w, channels)


class SingleHeadAttention(nn.Module):
    def __init__(self, query_dim: int, key_dim: int, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.q_proj = nn.Linear(query_dim, embed_dim)
        self.k_proj = nn.Linear(key_dim, embed_dim)
        self.v_proj = nn.Linear(key_dim, embed_dim)
        self.out_proj = nn.Linear(embed_dim, embed_dim)

    def forward(
        self,
        query: torch.Tensor,               # (B, Nq, Dq)
        key: torch.Tensor,                 # (B, Nk, Dk)
        key_mask: torch.Tensor | None = None,  # (B, Nk) bool, True = usable
        return_weights: bool = False,
    ):
        q = self.q_proj(query)
        k = self.k_proj(key)
        v = self.v_proj(key)
        logits = q @ k.transpose(1, 2) / math.sqrt(self.embed_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        if key_mask is not None:
            # rows with no valid key softmax to NaN; zero them, callers
            # substitute their own fallback embedding
            no_keys = ~key_mask.any(dim=-1)
            if no_keys.any():
                weights = torch.where(no_keys[:, None, None], torch.zeros_like(weights), weights)
        out = self.out_proj(weights @ v)
        if return_weights:
            return out, weights
        return out
