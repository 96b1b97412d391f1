"""Least-squares GAN, feature-matching, mel and watermark losses, and role routing."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch

from .audio import MelParams, log_mel


class RoleMode(str, Enum):
    OBSERVER = "observer"
    COLLABORATOR = "collaborator"


@dataclass
class LossWeights:
    fm: float = 2.0
    mel: float = 45.0
    wm: float = 1.0
    # "squared" follows the collaborative-watermarking objective, "l1" the HiFi-GAN recipe
    fm_distance: str = "squared"

    def __post_init__(self):
        if min(self.fm, self.mel, self.wm) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.fm_distance not in ("squared", "l1"):
            raise ValueError(f"fm_distance must be 'squared' or 'l1', got {self.fm_distance!r}")


def _mean_over_maps(maps: Sequence[torch.Tensor], fn) -> torch.Tensor:
    # batch/timestep mean within each sub-discriminator, then mean across sub-discriminators
    return torch.stack([fn(m).mean() for m in maps]).mean()


def loss_discriminator(real_scores: Sequence[torch.Tensor], gen_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    """E[(D(x_real) - 1)^2 + D(x_gen)^2]."""
    return _mean_over_maps(real_scores, lambda s: (s - 1) ** 2) + _mean_over_maps(gen_scores, lambda s: s ** 2)


def loss_generator_adv(gen_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    return _mean_over_maps(gen_scores, lambda s: (s - 1) ** 2)


def loss_feature_matching(real_feats, gen_feats, distance: str = "squared") -> torch.Tensor:
    """Sum over every hidden activation of the mean (squared or absolute) difference."""
    if len(real_feats) != len(gen_feats):
        raise ValueError("feature lists have different numbers of sub-discriminators")
    total = 0.0
    for r_sub, g_sub in zip(real_feats, gen_feats):
        if len(r_sub) != len(g_sub):
            raise ValueError("sub-discriminator feature lists differ in depth")
        for r, g in zip(r_sub, g_sub):
            if r.shape != g.shape:
                raise ValueError(f"activation shapes differ: {tuple(r.shape)} vs {tuple(g.shape)}")
            d = r - g
            total = total + (d.pow(2) if distance == "squared" else d.abs()).mean()
    return torch.as_tensor(total)


def loss_mel(x_real: torch.Tensor, x_gen: torch.Tensor, p: MelParams = MelParams()) -> torch.Tensor:
    """Mean absolute difference of natural-log mel spectrograms, floored at ``p.log_floor``."""
    if x_real.shape != x_gen.shape:
        raise ValueError(f"length mismatch: {tuple(x_real.shape)} vs {tuple(x_gen.shape)}")
    return (log_mel(x_real, p) - log_mel(x_gen, p)).abs().mean()


def loss_watermark(wm_real: torch.Tensor, wm_gen: torch.Tensor) -> torch.Tensor:
    """E[(WM(x_hat_real) - 1)^2 + WM(x_tilde_gen)^2] over the batch."""
    return ((wm_real - 1) ** 2).mean() + (wm_gen ** 2).mean()


def route_generator_loss(mode: RoleMode, adv: torch.Tensor, fm: torch.Tensor, mel: torch.Tensor,
                         wm: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """Total generator objective.

    An observer ignores the watermark loss entirely (detached); a collaborator
    adds ``weights.wm * wm`` so its gradient reaches the generator.
    """
    total = adv + weights.fm * fm + weights.mel * mel
    if RoleMode(mode) is RoleMode.COLLABORATOR:
        total = total + weights.wm * wm
    return total
