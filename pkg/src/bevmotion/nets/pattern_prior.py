"""Training-time prior distilled from ground-truth annotation maps.

Two grid branches (a local convolutional one and a global attention one over
downsampled tokens) are blended by a learned convex gate; an instance branch
summarizes each annotated object into a token via a recurrent encoder, and a
cross-attention step injects those tokens back into the spatial features.
None of this runs at inference time: it only sees labels, never predictions.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ContractError
from ..grid import NUM_CLASSES
from .attention import SingleHeadAttention, sinusoidal_grid_encoding


class LocalGridBranch(nn.Module):
    """3D convolution over the motion volume; 2D over category/state maps."""

    def __init__(self, out_channels: int, time_steps: int, motion_hidden: int = 8, hidden: int = 16):
        super().__init__()
        self.time_steps = time_steps
        self.motion_stem = nn.Conv3d(2, motion_hidden, 3, padding=1)
        self.motion_project = nn.Conv2d(motion_hidden * time_steps, out_channels, 1)
        self.cls_state_stem = nn.Conv2d(NUM_CLASSES + 1, hidden, 3, padding=1)
        self.cls_state_project = nn.Conv2d(hidden, out_channels, 3, padding=1)

    def forward(self, motion: torch.Tensor, category: torch.Tensor, state: torch.Tensor):
        """motion (B,T,2,H,W); category one-hot (B,NC,H,W); state (B,1,H,W)."""
        b, t, _, h, w = motion.shape
        if t != self.time_steps:
            raise ContractError(f"expected {self.time_steps} motion steps, got {t}")
        x = self.motion_stem(motion.permute(0, 2, 1, 3, 4))       # (B, mh, T, H, W)
        x = F.relu(x).reshape(b, -1, h, w)
        motion_feat = self.motion_project(x)
        y = F.relu(self.cls_state_stem(torch.cat([category, state], dim=1)))
        cls_state_feat = self.cls_state_project(y)
        return motion_feat, cls_state_feat


class GlobalGridBranch(nn.Module):
    """Temporal self-attention per location, then spatial self-attention over
    downsampled tokens; the result is upsampled back to full resolution."""

    def __init__(
        self,
        out_channels: int,
        embed_dim: int = 32,
        downsample: int = 4,
        use_positional: bool = True,
    ):
        super().__init__()
        self.downsample = downsample
        self.use_positional = use_positional
        self.motion_embed = nn.Linear(2, embed_dim)
        self.temporal_attn = SingleHeadAttention(embed_dim, embed_dim, embed_dim)
        self.merge = nn.Conv2d(embed_dim + NUM_CLASSES + 1, embed_dim, 1)
        self.spatial_attn = SingleHeadAttention(embed_dim, embed_dim, embed_dim)
        self.out = nn.Conv2d(embed_dim, out_channels, 1)

    def temporal_tokens(self, motion: torch.Tensor) -> torch.Tensor:
        """(B, T, 2, h, w) -> (B, E, h, w) after attention over the T axis."""
        b, t, _, h, w = motion.shape
        tok = motion.permute(0, 3, 4, 1, 2).reshape(b * h * w, t, 2)
        tok = self.motion_embed(tok)
        tok = self.temporal_attn(tok, tok)
        return tok.mean(dim=1).reshape(b, h, w, -1).permute(0, 3, 1, 2)

    def spatial_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Self-attention over locations of (B, E, h, w)."""
        b, e, h, w = x.shape
        tok = x.flatten(2).transpose(1, 2)  # (B, h*w, E)
        if self.use_positional:
            tok = tok + sinusoidal_grid_encoding(h, w, e, x.device, x.dtype)[None]
        tok = self.spatial_attn(tok, tok)
        return tok.transpose(1, 2).reshape(b, e, h, w)

    def forward(self, motion: torch.Tensor, category: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        b, t, _, h, w = motion.shape
        d = self.downsample
        if h % d or w % d:
            raise ContractError(f"spatial dims ({h}, {w}) must be divisible by downsample {d}")
        m = F.avg_pool2d(motion.reshape(b * t, 2, h, w), d).reshape(b, t, 2, h // d, w // d)
        x = self.temporal_tokens(m)
        cs = F.avg_pool2d(torch.cat([category, state], dim=1), d)
        x = self.merge(torch.cat([x, cs], dim=1))
        x = self.spatial_tokens(x)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        return self.out(x)


class AdaptiveFusion(nn.Module):
    """Convex per-channel blend of the global and local grid features."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate_head = nn.Linear(2 * channels, channels)

    def forward(self, global_feat: torch.Tensor, local_feat: torch.Tensor):
        pooled = torch.cat(
            [global_feat.mean(dim=(2, 3)), local_feat.mean(dim=(2, 3))], dim=1
        )
        gate = torch.sigmoid(self.gate_head(pooled))[:, :, None, None]
        fused = gate * global_feat + (1.0 - gate) * local_feat
        return fused, gate


class InstanceEncoder(nn.Module):
    """One token per annotated instance from sampled cells and motion history.

    Each instance contributes a row of ``cells_per_instance`` normalized cell
    positions, a category one-hot and its per-step mean motion; the recurrent
    encoder walks the motion steps and the final hidden state is the token.
    Sampling is seeded per sequence so tokens are reproducible.
    """

    def __init__(
        self,
        time_steps: int,
        token_dim: int = 32,
        cells_per_instance: int = 8,
        max_instances: int = 32,
    ):
        super().__init__()
        self.time_steps = time_steps
        self.token_dim = token_dim
        self.cells_per_instance = cells_per_instance
        self.max_instances = max_instances
        self.static_width = cells_per_instance * 2 + NUM_CLASSES
        self.lstm = nn.LSTM(input_size=self.static_width + 2, hidden_size=token_dim, batch_first=True)

    @property
    def row_width(self) -> int:
        """Width of one instance descriptor row."""
        return self.static_width + self.time_steps * 2

    def build_rows(
        self,
        motion: torch.Tensor,        # (T, 2, H, W)
        category: torch.Tensor,      # (H, W) long
        instance_id: torch.Tensor,   # (H, W) long
        seed: int = 0,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Descriptor rows (N, row_width) and per-step motion (N, T, 2)."""
        h, w = instance_id.shape
        rng = np.random.default_rng(seed)
        ids = torch.unique(instance_id)
        ids = ids[ids > 0].tolist()
        if len(ids) > self.max_instances:
            ids = sorted(rng.choice(sorted(ids), size=self.max_instances, replace=False).tolist())
        rows, motions = [], []
        for inst in ids:
            mask = instance_id == inst
            cells = mask.nonzero(as_tuple=False)  # row-major order
            n = cells.shape[0]
            pick = rng.choice(n, size=self.cells_per_instance, replace=n < self.cells_per_instance)
            chosen = cells[torch.as_tensor(np.sort(pick), dtype=torch.long, device=cells.device)]
            pos = chosen.to(motion.dtype)
            pos[:, 0] = pos[:, 0] / max(h - 1, 1) * 2 - 1
            pos[:, 1] = pos[:, 1] / max(w - 1, 1) * 2 - 1
            cat = int(category[chosen[0, 0], chosen[0, 1]])
            one_hot = torch.zeros(NUM_CLASSES, dtype=motion.dtype, device=motion.device)
            one_hot[cat] = 1.0
            step_motion = motion[:, :, mask].mean(dim=2)  # (T, 2)
            rows.append(torch.cat([pos.flatten(), one_hot, step_motion.flatten()]))
            motions.append(step_motion)
        if not rows:
            width = self.row_width
            return (
                torch.zeros(0, width, dtype=motion.dtype, device=motion.device),
                torch.zeros(0, self.time_steps, 2, dtype=motion.dtype, device=motion.device),
            )
        return torch.stack(rows), torch.stack(motions)

    def forward(
        self,
        motion: torch.Tensor,
        category: torch.Tensor,
        instance_id: torch.Tensor,
        seed: int = 0,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Tokens (max_instances, token_dim) plus validity mask (max_instances,)."""
        rows, step_motion = self.build_rows(motion, category, instance_id, seed)
        n = rows.shape[0]
        tokens = torch.zeros(self.max_instances, self.token_dim, dtype=motion.dtype, device=motion.device)
        mask = torch.zeros(self.max_instances, dtype=torch.bool, device=motion.device)
        if n == 0:
            return tokens, mask
        static = rows[:, : self.static_width]
        seq = torch.cat(
            [step_motion, static[:, None, :].expand(n, self.time_steps, self.static_width)], dim=2
        )
        _, (hidden, _) = self.lstm(seq)
        tokens[:n] = hidden[-1]
        mask[:n] = True
        return tokens, mask


class PriorIntegrator(nn.Module):
    """Cross-attention from feature-map queries to instance tokens, then a
    channel concat of every available prior component projected to a fixed
    output width."""

    def __init__(
        self,
        feature_channels: int,
        out_channels: int,
        token_dim: int = 32,
        embed_dim: int = 32,
        with_grid_prior: bool = True,
        with_instances: bool = True,
    ):
        super().__init__()
        if not (with_grid_prior or with_instances):
            raise ContractError("integrator needs at least one prior component")
        self.with_grid_prior = with_grid_prior
        self.with_instances = with_instances
        cin = feature_channels
        if with_grid_prior:
            cin += feature_channels
        if with_instances:
            self.cross_attn = SingleHeadAttention(feature_channels, token_dim, embed_dim)
            self.null_token = nn.Parameter(torch.zeros(embed_dim))
            cin += embed_dim
        self.project = nn.Conv2d(cin, out_channels, 1)

    def attend(
        self,
        features: torch.Tensor,   # (B, C', H, W)
        tokens: torch.Tensor,     # (B, N, D)
        token_mask: torch.Tensor, # (B, N)
        return_weights: bool = False,
    ):
        b, c, h, w = features.shape
        queries = features.flatten(2).transpose(1, 2)
        out, weights = self.cross_attn(queries, tokens, key_mask=token_mask, return_weights=True)
        no_keys = ~token_mask.any(dim=-1)
        if no_keys.any():
            out = torch.where(no_keys[:, None, None], self.null_token.expand_as(out), out)
        out = out.transpose(1, 2).reshape(b, -1, h, w)
        if return_weights:
            return out, weights
        return out

    def forward(
        self,
        features: torch.Tensor,
        grid_prior: torch.Tensor | None,
        tokens: torch.Tensor | None,
        token_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        parts = [features]
        if self.with_grid_prior:
            if grid_prior is None:
                raise ContractError("grid prior expected but missing")
            parts.append(grid_prior)
        if self.with_instances:
            if tokens is None or token_mask is None:
                raise ContractError("instance tokens expected but missing")
            parts.append(self.attend(features, tokens, token_mask))
        return self.project(torch.cat(parts, dim=1))


class PatternPriorExtractor(nn.Module):
    """Full label-conditioned prior: grid branches and/or instance branch.

    ``use_grid`` and ``use_instances`` mirror the ablation switches; at least
    one must be on for the module to exist at all.
    """

    def __init__(
        self,
        feature_channels: int,
        out_channels: int,
        time_steps: int,
        use_grid: bool = True,
        use_instances: bool = True,
        attention_channels: int = 32,
        attention_downsample: int = 4,
        instance_token_channels: int = 32,
        instance_cells: int = 8,
        instance_cap: int = 32,
    ):
        super().__init__()
        self.use_grid = use_grid
        self.use_instances = use_instances
        if use_grid:
            self.local_branch = LocalGridBranch(feature_channels, time_steps)
            self.global_branch = GlobalGridBranch(
                feature_channels, embed_dim=attention_channels, downsample=attention_downsample
            )
            self.local_merge = nn.Conv2d(2 * feature_channels, feature_channels, 1)
            self.fusion = AdaptiveFusion(feature_channels)
        if use_instances:
            self.instance_encoder = InstanceEncoder(
                time_steps,
                token_dim=instance_token_channels,
                cells_per_instance=instance_cells,
                max_instances=instance_cap,
            )
        self.integrator = PriorIntegrator(
            feature_channels,
            out_channels,
            token_dim=instance_token_channels,
            with_grid_prior=use_grid,
            with_instances=use_instances,
        )

    def grid_prior(self, motion, category, state):
        motion_local, cls_state_local = self.local_branch(motion, category, state)
        local = self.local_merge(torch.cat([motion_local, cls_state_local], dim=1))
        global_feat = self.global_branch(motion, category, state)
        fused, gate = self.fusion(global_feat, local)
        return fused, gate

    def forward(
        self,
        features: torch.Tensor,      # (B, C', H, W) backbone output
        motion: torch.Tensor,        # (B, T, 2, H, W) ground truth
        category: torch.Tensor,      # (B, NC, H, W) one-hot
        state: torch.Tensor,         # (B, 1, H, W)
        instance_id: torch.Tensor,   # (B, H, W) long
        category_index: torch.Tensor,  # (B, H, W) long
        seeds: list[int] | None = None,
    ) -> torch.Tensor:
        b = features.shape[0]
        grid_prior = None
        if self.use_grid:
            grid_prior, _ = self.grid_prior(motion, category, state)
        tokens = mask = None
        if self.use_instances:
            seeds = seeds if seeds is not None else [0] * b
            toks, masks = [], []
            for i in range(b):
                tok, m = self.instance_encoder(
                    motion[i], category_index[i], instance_id[i], seed=seeds[i]
                )
                toks.append(tok)
                masks.append(m)
            tokens, mask = torch.stack(toks), torch.stack(masks)
        return self.integrator(features, grid_prior, tokens, mask)
