"""Multi-task objective: motion regression, state, category, and the latent
consistency term tying the observation-conditioned latent to the
label-conditioned one.

All functions take torch tensors and stay differentiable.  Empty supervision
masks yield a zero loss plus a flag instead of an error: sparse scenes
legitimately contain nothing to supervise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .exceptions import ContractError
from .grid import STATIC_SPEED
from .nets.generator import LatentField

SLOW_SPEED = 5.0
GROUP_NAMES = ("static", "slow", "fast")
GROUP_WEIGHT_RANGE = (0.1, 10.0)


@dataclass(frozen=True)
class LossWeights:
    move: float = 1.0
    state: float = 1.0
    cls: float = 1.0
    pattern: float = 0.1

    def __post_init__(self) -> None:
        for name in ("move", "state", "cls", "pattern"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")

    def to_dict(self) -> dict:
        return {"move": self.move, "state": self.state, "cls": self.cls, "pattern": self.pattern}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass
class LossReport:
    """Scalar components of one step; ``total`` is their weighted sum."""

    total: float
    move: float
    state: float
    cls: float
    pattern: float
    weights: LossWeights
    pattern_weight_effective: float
    group_move: dict[str, float] = field(default_factory=dict)
    no_supervision: bool = False

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "move": self.move,
            "state": self.state,
            "cls": self.cls,
            "pattern": self.pattern,
            "pattern_weight_effective": self.pattern_weight_effective,
            "group_move": dict(self.group_move),
            "no_supervision": self.no_supervision,
        }


def speed_groups(target_motion: torch.Tensor, horizon_seconds: float) -> torch.Tensor:
    """Cell speed group (0 static, 1 slow, 2 fast) from ground-truth motion.

    Speed is the final-step displacement norm over the horizon; boundaries are
    lower-inclusive half-open intervals at 0.2 and 5 m/s.
    """
    speed = target_motion[:, -1].norm(dim=1) / horizon_seconds  # (B, H, W)
    groups = torch.full_like(speed, 1, dtype=torch.long)
    groups[speed < STATIC_SPEED] = 0
    groups[speed >= SLOW_SPEED] = 2
    return groups


def _group_weights(groups: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Per-cell weight proportional to inverse group frequency, clamped."""
    weights = torch.ones_like(valid)
    mask = valid > 0
    total = mask.sum()
    if total == 0:
        return weights
    present = [(g, int(((groups == g) & mask).sum())) for g in range(3)]
    present = [(g, n) for g, n in present if n > 0]
    for g, n in present:
        w = float(total) / (len(present) * n)
        w = min(max(w, GROUP_WEIGHT_RANGE[0]), GROUP_WEIGHT_RANGE[1])
        weights = torch.where((groups == g) & mask, torch.full_like(weights, w), weights)
    return weights


def motion_loss(
    pred: torch.Tensor,        # (B, T, 2, H, W)
    target: torch.Tensor,      # (B, T, 2, H, W)
    valid: torch.Tensor,       # (B, H, W) {0,1}
    horizon_seconds: float,
    reweight_groups: bool = True,
) -> tuple[torch.Tensor, dict[str, float], bool]:
    """Smooth-L1 over valid cells and all steps, speed-group reweighted.

    Returns (loss, per-group unweighted means, no_supervision flag).
    """
    if pred.shape != target.shape:
        raise ContractError(f"motion shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = valid > 0
    n_valid = int(mask.sum())
    if n_valid == 0:
        return pred.sum() * 0.0, {}, True
    per_cell = F.smooth_l1_loss(pred, target, reduction="none", beta=1.0).sum(dim=2)  # (B, T, H, W)
    groups = speed_groups(target, horizon_seconds)
    weights = _group_weights(groups, valid.to(pred.dtype)) if reweight_groups else torch.ones_like(valid, dtype=pred.dtype)
    masked = per_cell * mask[:, None].to(pred.dtype)
    loss = (masked * weights[:, None]).sum() / (n_valid * pred.shape[1])
    breakdown = {}
    for g, name in enumerate(GROUP_NAMES):
        sel = (groups == g) & mask
        if sel.any():
            breakdown[name] = float(per_cell.mean(dim=1)[sel].mean())
    return loss, breakdown, False


def state_loss(logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor):
    """Binary cross-entropy on valid cells; (loss, no_supervision)."""
    mask = valid > 0
    if not mask.any():
        return logits.sum() * 0.0, True
    per_cell = F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype), reduction="none")
    return per_cell[mask].mean(), False


def cls_loss(logits: torch.Tensor, target: torch.Tensor, valid: torch.Tensor):
    """Categorical cross-entropy on valid cells; (loss, no_supervision)."""
    mask = valid > 0
    if not mask.any():
        return logits.sum() * 0.0, True
    per_cell = F.cross_entropy(logits, target.long(), reduction="none")
    return per_cell[mask].mean(), False


def pattern_loss(posterior: LatentField, prior: LatentField) -> torch.Tensor:
    """Closed-form diagonal-Gaussian KL(posterior || prior), averaged over
    batch, channels and latent cells."""
    if posterior.mean.shape != prior.mean.shape:
        raise ContractError("latent shapes differ between posterior and prior")
    var_p = torch.exp(posterior.log_var)
    var_q = torch.exp(prior.log_var)
    kl = 0.5 * (prior.log_var - posterior.log_var) \
        + (var_p + (posterior.mean - prior.mean) ** 2) / (2.0 * var_q) - 0.5
    return kl.mean()


def feature_consistency(posterior_code: torch.Tensor, prior_code: torch.Tensor) -> torch.Tensor:
    """Pattern-consistency fallback when latents are deterministic codes."""
    return F.mse_loss(posterior_code, prior_code)


def total_loss(
    move: torch.Tensor,
    state: torch.Tensor,
    cls_: torch.Tensor,
    pattern: torch.Tensor,
    weights: LossWeights,
    pattern_scale: float = 1.0,
    group_move: dict[str, float] | None = None,
    no_supervision: bool = False,
) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum; ``pattern_scale`` implements warm-up on the KL weight."""
    eff = weights.pattern * pattern_scale
    total = weights.move * move + weights.state * state + weights.cls * cls_ + eff * pattern
    report = LossReport(
        total=float(total),
        move=float(move),
        state=float(state),
        cls=float(cls_),
        pattern=float(pattern),
        weights=weights,
        pattern_weight_effective=eff,
        group_move=group_move or {},
        no_supervision=no_supervision,
    )
    return total, report
