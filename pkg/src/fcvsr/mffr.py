"""Multi-frequency feature refinement: band-pass decomposition, low-to-high
progressive enhancement, and channel-attention aggregation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .frequency import bandpass_masks, decompose, mean_filter
from .mgaa import ChannelAttention


class EnhancementBlock(nn.Module):
    """``x + gamma * CA(sigmoid(conv3x3(x)))``."""

    def __init__(self, channels: int, gamma: float = 0.2):
        super().__init__()
        self.gamma = gamma
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.ca = ChannelAttention(channels)

    def forward(self, x):
        return x + self.gamma * self.ca(torch.sigmoid(self.conv(x)))


class Enhancer(nn.Module):
    """Enhances band q from the raw bands 1..q and the enhanced bands 1..q-1.

    One enhancement block is shared by the feedforward and feedback branches.
    """

    def __init__(self, channels: int, gamma: float, use_feedforward=True, use_feedback=True, identity=False):
        super().__init__()
        self.block = nn.Identity() if identity else EnhancementBlock(channels, gamma)
        self.use_feedforward = use_feedforward
        self.use_feedback = use_feedback

    def forward(self, bands: list[torch.Tensor], enhanced: list[torch.Tensor]) -> torch.Tensor:
        q = len(bands)
        if len(enhanced) != q - 1:
            raise ValueError(f"band {q} needs {q - 1} enhanced lower bands, got {len(enhanced)}")
        if q == 1:
            return self.block(mean_filter(bands[0], 3))
        current = bands[-1]
        high = current - sum(bands[:-1])
        feedback = sum(enhanced)
        if not self.use_feedback:
            return self.block(high + feedback)
        fb = self.block(feedback)
        if not self.use_feedforward:
            return fb + current
        return self.block(high + feedback) + fb


class MFFR(nn.Module):
    def __init__(
        self,
        channels: int,
        num_bands: int,
        gamma: float = 0.2,
        mask_variant: str = "consecutive-difference",
        butterworth_order: int = 2,
        use_feedforward: bool = True,
        use_feedback: bool = True,
        identity_hooks: bool = False,
    ):
        super().__init__()
        self.num_bands = num_bands
        self.mask_variant = mask_variant
        self.butterworth_order = butterworth_order
        self.enhancers = nn.ModuleList(
            Enhancer(channels, gamma, use_feedforward, use_feedback, identity_hooks) for _ in range(num_bands)
        )
        self.aggregate_ca = nn.Identity() if identity_hooks else ChannelAttention(channels)

    def masks(self, h: int, w: int):
        return bandpass_masks(h, w, self.num_bands, self.mask_variant, self.butterworth_order)

    def decouple(self, x: torch.Tensor) -> list[torch.Tensor]:
        return list(decompose(x, self.masks(*x.shape[-2:])).unbind(0))

    def enhance(self, bands: list[torch.Tensor]) -> list[torch.Tensor]:
        enhanced: list[torch.Tensor] = []
        for q, enhancer in enumerate(self.enhancers, start=1):
            enhanced.append(enhancer(bands[:q], enhanced))
        return enhanced

    def aggregate(self, enhanced: list[torch.Tensor]) -> torch.Tensor:
        if not enhanced:
            raise ValueError("nothing to aggregate")
        return self.aggregate_ca(sum(enhanced))

    def forward(self, x: torch.Tensor, return_bands: bool = False):
        bands = self.decouple(x)
        enhanced = self.enhance(bands)
        out = self.aggregate(enhanced)
        if return_bands:
            return out, bands, enhanced
        return out


def dump_subbands(mffr: MFFR, feature: torch.Tensor, out_dir: str | Path, channel: int = 0) -> list[Path]:
    """Write one grayscale PNG per decomposed and enhanced band for ``channel``
    of the first sample in ``feature``; each image is min-max normalised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        refined, bands, enhanced = mffr(feature, return_bands=True)
    written = []
    items = [("input", feature), ("refined", refined)]
    items += [(f"S{j}", b) for j, b in enumerate(bands, 1)]
    items += [(f"E{j}", e) for j, e in enumerate(enhanced, 1)]
    for name, t in items:
        a = t[0, channel].detach().cpu().double().numpy()
        span = a.max() - a.min()
        a = (a - a.min()) / span if span > 0 else np.zeros_like(a)
        path = out_dir / f"{name}.png"
        Image.fromarray(np.round(a * 255).astype(np.uint8), mode="L").save(path)
        written.append(path)
    return written
