"""Spatial feature extractors over stacked multi-frame occupancy grids.

Backbones are interchangeable behind a registry so the prediction pipeline
stays architecture-agnostic: anything mapping (B, T, C, H, W) occupancy to a
(B, C', H, W) feature map qualifies.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..exceptions import ConfigError, ContractError
from ..grid import GridSpec, OccupancyGrid


@dataclass
class FeatureMap:
    """Feature tensor plus provenance of the producing backbone and input."""

    values: np.ndarray  # (H, W, C') float32
    backbone_id: str
    input_hash: str


class _ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
            nn.GroupNorm(4, cout),
            nn.ReLU(inplace=True),
        )


class PyramidBackbone(nn.Module):
    """Shared per-frame stem, temporal concatenation, 3-level spatial pyramid.

    Downsampling uses stride-2 convolutions; decoding upsamples bilinearly and
    adds lateral skips, so the output keeps the input's spatial resolution.
    """

    name = "stpn_toy"

    def __init__(self, in_channels: int, time_steps: int, out_channels: int = 32, stem_channels: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.time_steps = time_steps
        self.out_channels = out_channels
        c = out_channels
        self.stem = nn.Sequential(_ConvBlock(in_channels, stem_channels), _ConvBlock(stem_channels, stem_channels))
        self.temporal_fuse = nn.Conv2d(stem_channels * time_steps, c, 1)
        self.enc1 = _ConvBlock(c, c, stride=2)
        self.enc2 = _ConvBlock(c, c, stride=2)
        self.mid = _ConvBlock(c, c)
        self.lat1 = nn.Conv2d(c, c, 1)
        self.lat0 = nn.Conv2d(c, c, 1)
        self.out = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        b, t, c, h, w = grids.shape
        if t != self.time_steps or c != self.in_channels:
            raise ContractError(
                f"backbone expects {self.time_steps} frames x {self.in_channels} channels, got {t} x {c}"
            )
        x = self.stem(grids.reshape(b * t, c, h, w))
        x = x.reshape(b, -1, h, w)
        x0 = self.temporal_fuse(x)
        x1 = self.enc1(x0)
        x2 = self.mid(self.enc2(x1))
        u1 = F.interpolate(x2, size=x1.shape[-2:], mode="bilinear", align_corners=False) + self.lat1(x1)
        u0 = F.interpolate(u1, size=x0.shape[-2:], mode="bilinear", align_corners=False) + self.lat0(x0)
        return self.out(u0)


class IdentityProbe(nn.Module):
    """Debug backbone: channel projection of the raw stacked occupancy."""

    name = "identity_probe"

    def __init__(self, in_channels: int, time_steps: int, out_channels: int = 32):
        super().__init__()
        self.in_channels = in_channels
        self.time_steps = time_steps
        self.out_channels = out_channels
        self.proj = nn.Conv2d(in_channels * time_steps, out_channels, 1)

    def forward(self, grids: torch.Tensor) -> torch.Tensor:
        b, t, c, h, w = grids.shape
        if t != self.time_steps or c != self.in_channels:
            raise ContractError(
                f"backbone expects {self.time_steps} frames x {self.in_channels} channels, got {t} x {c}"
            )
        return self.proj(grids.reshape(b, t * c, h, w))


_REGISTRY: dict[str, type[nn.Module]] = {
    PyramidBackbone.name: PyramidBackbone,
    IdentityProbe.name: IdentityProbe,
}


def register_backbone(name: str, cls: type[nn.Module]) -> None:
    _REGISTRY[name] = cls


def available_backbones() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def create_backbone(name: str, in_channels: int, time_steps: int, out_channels: int = 32, **kwargs) -> nn.Module:
    if name not in _REGISTRY:
        raise ConfigError(f"unknown backbone {name!r}; available: {available_backbones()}")
    return _REGISTRY[name](in_channels=in_channels, time_steps=time_steps, out_channels=out_channels, **kwargs)


def stack_grids(grids: list[OccupancyGrid]) -> torch.Tensor:
    """(T, H, W, C) occupancy -> (1, T, C, H, W) float tensor."""
    arr = np.stack([g.cells for g in grids]).astype(np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).unsqueeze(0)


def extract_features(backbone: nn.Module, grids: list[OccupancyGrid], spec: GridSpec) -> FeatureMap:
    """Run a backbone over one sequence of occupancy grids.

    Deterministic given parameters: the backbone is flipped to eval mode and
    gradients are disabled.
    """
    if len(grids) != spec.input_frames:
        raise ContractError(f"expected {spec.input_frames} grids, got {len(grids)}")
    for g in grids:
        if g.cells.shape != (spec.H, spec.W, spec.C):
            raise ContractError(f"grid shape {g.cells.shape} != {(spec.H, spec.W, spec.C)}")
    x = stack_grids(grids)
    digest = hashlib.sha1(x.numpy().tobytes()).hexdigest()[:16]
    was_training = backbone.training
    backbone.eval()
    try:
        with torch.no_grad():
            y = backbone(x)
    finally:
        backbone.train(was_training)
    values = y.squeeze(0).permute(1, 2, 0).numpy().astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise ContractError("backbone produced non-finite features")
    return FeatureMap(values=values, backbone_id=getattr(backbone, "name", type(backbone).__name__), input_hash=digest)
