"""End-to-end prediction network with component switches.

Inference always runs grids -> backbone -> latent -> decoders and never sees
labels.  During training an optional prior branch encodes the ground-truth
annotations into a second latent; the two are tied by the consistency loss and
the rollout can consume the prior's sample as a teacher path.

Switches (all on by default, each independently removable for ablations):
  pattern_extractor  grid-level prior branches over annotation maps
  pattern_generator  autoregressive recurrent rollout (off: one-shot head)
  latent_modeling    Gaussian latent + consistency KL (off: deterministic code)
  pattern_fusion     instance tokens cross-attended into the prior
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from ..exceptions import ConfigError
from ..grid import NUM_CLASSES, GridSpec
from .backbone import create_backbone
from .generator import (
    ClassStateDecoder,
    DeterministicBottleneck,
    DirectMotionHead,
    GaussianLatentHead,
    LatentField,
    MotionRollout,
)
from .pattern_prior import PatternPriorExtractor


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "stpn_toy"
    feature_channels: int = 32
    prior_channels: int = 64
    latent_channels: int = 16
    latent_downsample: int = 4
    attention_channels: int = 32
    attention_downsample: int = 4
    instance_token_channels: int = 32
    instance_cells: int = 8
    instance_cap: int = 32
    pattern_extractor: bool = True
    pattern_generator: bool = True
    latent_modeling: bool = True
    pattern_fusion: bool = True

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in self.__dataclass_fields__.values()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def has_prior_path(self) -> bool:
        return self.pattern_extractor or self.pattern_fusion


class MotionPredictionNet(nn.Module):
    def __init__(self, spec: GridSpec, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.spec = spec
        self.backbone = create_backbone(
            cfg.backbone, in_channels=spec.C, time_steps=spec.input_frames,
            out_channels=cfg.feature_channels,
        )
        if cfg.latent_modeling:
            self.posterior_head = GaussianLatentHead(
                cfg.feature_channels, cfg.latent_channels, cfg.latent_downsample
            )
        else:
            self.posterior_head = DeterministicBottleneck(
                cfg.feature_channels, cfg.latent_channels, cfg.latent_downsample
            )
        if cfg.has_prior_path:
            self.prior_extractor = PatternPriorExtractor(
                cfg.feature_channels,
                cfg.prior_channels,
                time_steps=spec.output_steps,
                use_grid=cfg.pattern_extractor,
                use_instances=cfg.pattern_fusion,
                attention_channels=cfg.attention_channels,
                attention_downsample=cfg.attention_downsample,
                instance_token_channels=cfg.instance_token_channels,
                instance_cells=cfg.instance_cells,
                instance_cap=cfg.instance_cap,
            )
            if cfg.latent_modeling:
                self.prior_head = GaussianLatentHead(
                    cfg.prior_channels, cfg.latent_channels, cfg.latent_downsample
                )
            else:
                self.prior_head = DeterministicBottleneck(
                    cfg.prior_channels, cfg.latent_channels, cfg.latent_downsample
                )
        if cfg.pattern_generator:
            self.motion_decoder = MotionRollout(
                cfg.latent_channels, spec.output_steps, upsample=cfg.latent_downsample
            )
        else:
            self.motion_decoder = DirectMotionHead(
                cfg.latent_channels, spec.output_steps, upsample=cfg.latent_downsample
            )
        self.cls_state_decoder = ClassStateDecoder(
            cfg.latent_channels, cfg.feature_channels, NUM_CLASSES,
            upsample=cfg.latent_downsample,
        )

    def encode_posterior(self, features: torch.Tensor):
        if self.cfg.latent_modeling:
            return self.posterior_head(features, source="posterior")
        return self.posterior_head(features)

    def forward_train(
        self,
        batch: dict,
        generator: torch.Generator | None = None,
        use_teacher: bool = False,
        seeds: list[int] | None = None,
    ) -> dict:
        """One training pass; returns predictions plus both latent branches."""
        features = self.backbone(batch["grids"])
        posterior = self.encode_posterior(features)
        prior = None
        if self.cfg.has_prior_path:
            prior_features = self.prior_extractor(
                features,
                batch["motion"],
                batch["category_onehot"],
                batch["state"],
                batch["instance"],
                batch["category"],
                seeds=seeds,
            )
            if self.cfg.latent_modeling:
                prior = self.prior_head(prior_features, source="prior")
            else:
                prior = self.prior_head(prior_features)

        if self.cfg.latent_modeling:
            branch = prior if (use_teacher and prior is not None) else posterior
            z0 = branch.sample(generator=generator)
        else:
            z0 = prior if (use_teacher and prior is not None) else posterior

        motion_pred = self.motion_decoder(z0)
        cls_logits, state_logits = self.cls_state_decoder(z0, features)
        return {
            "motion": motion_pred,
            "cls_logits": cls_logits,
            "state_logits": state_logits,
            "posterior": posterior,
            "prior": prior,
            "z0": z0,
        }

    @torch.no_grad()
    def predict(
        self,
        grids: torch.Tensor,
        mode: str = "deterministic",
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Label-free inference.  ``mode`` is "deterministic" or "sample"."""
        if mode not in ("deterministic", "sample"):
            raise ConfigError(f"unknown prediction mode {mode!r}")
        was_training = self.training
        self.eval()
        try:
            features = self.backbone(grids)
            code = self.encode_posterior(features)
            if isinstance(code, LatentField):
                z0 = code.sample(generator=generator, deterministic=(mode == "deterministic"))
            else:
                z0 = code
            motion = self.motion_decoder(z0)
            cls_logits, state_logits = self.cls_state_decoder(z0, features)
        finally:
            self.train(was_training)
        return motion, cls_logits, state_logits
