"""Charbonnier spatial loss and the wavelet-subband contrastive loss.

The contrastive loss decomposes SR, HR and bilinear-upsampled (UP) frames with
a one-level Haar transform. High-frequency SR subbands are pulled towards the
matching HR subbands, the SR low band towards both HR and UP low bands, and
every anchor is pushed away from the UP high-frequency subbands.

Similarity is the negative mean absolute difference, per sample. The gradient
of ``|x|`` at exactly zero is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import LossConfig
from .frequency import WaveletSubbands, dwt2


def _check_same(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def charbonnier(sr: torch.Tensor, hr: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    _check_same(sr, hr)
    return torch.sqrt((sr - hr) ** 2 + eps * eps).mean()


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-sample negative mean absolute difference, shape (B,)."""
    return -(a - b).abs().flatten(1).mean(1)


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: list[torch.Tensor], tau: float) -> torch.Tensor:
    """Per-sample ``-log(e^{s+} / (e^{s+} + sum_k e^{s_k}))`` with similarities over tau."""
    pos = similarity(anchor, positive) / tau
    logits = torch.stack([pos] + [similarity(anchor, g) / tau for g in negatives], dim=0)
    return torch.logsumexp(logits, dim=0) - pos


@dataclass
class ContrastiveTerms:
    loss: torch.Tensor  # scalar, mean over samples
    high: torch.Tensor  # (B,) high-frequency term per sample
    low: torch.Tensor  # (B,) low-frequency term per sample


def fc_loss_from_subbands(
    sr: WaveletSubbands, hr: WaveletSubbands, up: WaveletSubbands, cfg: LossConfig = LossConfig()
) -> ContrastiveTerms:
    tau = cfg.temperature
    negatives = [up.hh, up.hl, up.lh]
    high_pairs = [(sr.hh, hr.hh), (sr.hl, hr.hl), (sr.lh, hr.lh)]
    low_pairs = [(sr.ll, hr.ll), (sr.ll, up.ll)]

    def reduce(terms):
        total = torch.stack(terms).sum(0)
        return total / len(terms) if cfg.term_reduction == "mean" else total

    high = reduce([info_nce(a, p, negatives, tau) for a, p in high_pairs])
    low = reduce([info_nce(a, p, negatives, tau) for a, p in low_pairs])
    per_sample = torch.zeros_like(high)
    if cfg.use_high_term:
        per_sample = per_sample + high
    if cfg.use_low_term:
        per_sample = per_sample + low
    return ContrastiveTerms(per_sample.mean(), high.detach(), low.detach())


def fc_loss(sr: torch.Tensor, hr: torch.Tensor, up: torch.Tensor, cfg: LossConfig = LossConfig()) -> ContrastiveTerms:
    """Frequency-aware contrastive loss for (B, C, H, W) batches."""
    _check_same(sr, hr, up)
    return fc_loss_from_subbands(dwt2(sr), dwt2(hr), dwt2(up), cfg)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    spatial: torch.Tensor
    contrastive: torch.Tensor
    high: torch.Tensor
    low: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "L_all": self.total.item(),
            "L_spa": self.spatial.item(),
            "L_fc": self.contrastive.item(),
            "L1": self.high.mean().item(),
            "L2": self.low.mean().item(),
        }


def total_loss(sr: torch.Tensor, hr: torch.Tensor, up: torch.Tensor, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    spa = charbonnier(sr, hr, cfg.eps)
    fc = fc_loss(sr, hr, up, cfg)
    return LossBreakdown(spa + cfg.alpha * fc.loss, spa, fc.loss, fc.high, fc.low)
