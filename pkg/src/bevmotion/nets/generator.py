"""Latent-variable motion generation.

Features are split by two parallel heads (a dynamic and a static view of the
scene), compressed into a spatial Gaussian latent, and decoded autoregressively
by a convolutional GRU whose per-step states feed a small flow decoder.
Category/state decoding fuses the initial latent with backbone features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ContractError, NumericalError

LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class LatentField:
    """Spatial diagonal-Gaussian latent."""

    mean: torch.Tensor     # (B, D, h, w)
    log_var: torch.Tensor  # (B, D, h, w), clamped to LOG_VAR_RANGE
    source: str            # "posterior" or "prior"

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def sample(
        self,
        generator: torch.Generator | None = None,
        deterministic: bool = False,
        eps: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Reparameterized draw; ``deterministic`` returns the mean itself."""
        if deterministic:
            return self.mean
        if eps is None:
            eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype,
                              device=self.mean.device)
        return self.mean + self.std * eps

    def sample_many(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn((n, *self.mean.shape), generator=generator, dtype=self.mean.dtype,
                          device=self.mean.device)
        return self.mean[None] + self.std[None] * eps

    @classmethod
    def standard(cls, like: "LatentField") -> "LatentField":
        return cls(mean=torch.zeros_like(like.mean), log_var=torch.zeros_like(like.log_var),
                   source="standard")


class _Downsampler(nn.Sequential):
    def __init__(self, cin: int, cout: int, factor: int):
        layers = []
        c = cin
        f = factor
        while f > 1:
            if f % 2:
                raise ContractError("downsample factor must be a power of two")
            layers += [nn.Conv2d(c, cout, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            c = cout
            f //= 2
        super().__init__(*layers)


class GaussianLatentHead(nn.Module):
    """Dynamic/static feature split, spatial compression, Gaussian projection."""

    def __init__(self, in_channels: int, latent_channels: int = 16, downsample: int = 4, hidden: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.downsample = downsample
        self.dynamic_head = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.static_head = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.compress = _Downsampler(2 * hidden, hidden, downsample)
        self.gaussian = nn.Conv2d(hidden, 2 * latent_channels, 3, padding=1)

    def forward(self, features: torch.Tensor, source: str = "posterior") -> LatentField:
        dynamic = F.relu(self.dynamic_head(features))
        static = F.relu(self.static_head(features))
        x = self.compress(torch.cat([dynamic, static], dim=1))
        params = self.gaussian(x)
        mean, log_var = params.chunk(2, dim=1)
        return LatentField(mean=mean, log_var=log_var.clamp(*LOG_VAR_RANGE), source=source)


class DeterministicBottleneck(nn.Module):
    """Same compression trunk without the Gaussian; ablation stand-in."""

    def __init__(self, in_channels: int, latent_channels: int = 16, downsample: int = 4, hidden: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.dynamic_head = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.static_head = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.compress = _Downsampler(2 * hidden, hidden, downsample)
        self.out = nn.Conv2d(hidden, latent_channels, 3, padding=1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        dynamic = F.relu(self.dynamic_head(features))
        static = F.relu(self.static_head(features))
        return self.out(self.compress(torch.cat([dynamic, static], dim=1)))


class ConvGRUCell(nn.Module):
    """Input-free convolutional GRU: the state evolves under its own gates.

    With all weights and biases at zero the update gate is 0.5 and the
    candidate 0, so one step exactly halves the state.
    """

    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        p = kernel_size // 2
        self.update_gate = nn.Conv2d(channels, channels, kernel_size, padding=p)
        self.reset_gate = nn.Conv2d(channels, channels, kernel_size, padding=p)
        self.candidate = nn.Conv2d(channels, channels, kernel_size, padding=p)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        z = torch.sigmoid(self.update_gate(state))
        r = torch.sigmoid(self.reset_gate(state))
        cand = torch.tanh(self.candidate(r * state))
        return (1.0 - z) * state + z * cand


class FlowDecoder(nn.Module):
    """Two-layer conv head from a latent state to a full-resolution flow map."""

    def __init__(self, latent_channels: int, upsample: int = 4, hidden: int = 32):
        super().__init__()
        self.upsample = upsample
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 2, 3, padding=1),
        )

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        flow = self.net(state)
        return F.interpolate(flow, scale_factor=self.upsample, mode="bilinear", align_corners=False)


class MotionRollout(nn.Module):
    """Autoregressive rollout: T recurrent steps, one decoded flow map each.

    Step ``tau`` depends only on the initial latent and earlier states, so
    perturbing the state after step k (via ``state_hook``) can never change
    outputs up to k.  A non-finite state or flow aborts with diagnostics.
    """

    def __init__(self, latent_channels: int, steps: int, upsample: int = 4):
        super().__init__()
        self.steps = steps
        self.cell = ConvGRUCell(latent_channels)
        self.flow_decoder = FlowDecoder(latent_channels, upsample=upsample)

    def forward(self, z0: torch.Tensor, state_hook=None) -> torch.Tensor:
        if not torch.isfinite(z0).all():
            raise NumericalError("rollout received a non-finite initial latent")
        state = z0
        flows = []
        norms = []
        for tau in range(1, self.steps + 1):
            state = self.cell(state)
            flow = self.flow_decoder(state)
            norms.append(float(state.norm()))
            if not (torch.isfinite(state).all() and torch.isfinite(flow).all()):
                raise NumericalError(
                    f"non-finite rollout at step {tau}; state norms so far: {norms}"
                )
            flows.append(flow)
            if state_hook is not None:
                state = state_hook(tau, state)
        return torch.stack(flows, dim=1)  # (B, T, 2, H, W)


class DirectMotionHead(nn.Module):
    """One-shot multi-step flow head; ablation alternative to the rollout."""

    def __init__(self, latent_channels: int, steps: int, upsample: int = 4, hidden: int = 32):
        super().__init__()
        self.steps = steps
        self.upsample = upsample
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 2 * steps, 3, padding=1),
        )

    def forward(self, z0: torch.Tensor) -> torch.Tensor:
        b = z0.shape[0]
        flow = F.interpolate(self.net(z0), scale_factor=self.upsample, mode="bilinear",
                             align_corners=False)
        return flow.reshape(b, self.steps, 2, *flow.shape[-2:])


class ClassStateDecoder(nn.Module):
    """Category and motion-state logits from the fused latent + skip features."""

    def __init__(self, latent_channels: int, skip_channels: int, num_classes: int,
                 upsample: int = 4, hidden: int = 32):
        super().__init__()
        self.upsample = upsample
        self.trunk = nn.Sequential(
            nn.Conv2d(latent_channels + skip_channels, hidden, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.cls_head = nn.Conv2d(hidden, num_classes, 3, padding=1)
        self.state_head = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, z0: torch.Tensor, skip: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        up = F.interpolate(z0, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.trunk(torch.cat([up, skip], dim=1))
        return self.cls_head(x), self.state_head(x).squeeze(1)
