"""Motion-guided adaptive alignment.

A frequency-domain motion estimator predicts several offset fields between a
reference and a source feature, a kernel predictor produces per-pixel separable
kernels from the reference, and a cascade of warp-then-filter steps aligns the
source onto the reference. Forward and backward neighbours are aligned
independently and fused by a 3x3 convolution.

Offsets are (N, 2, H, W) with channel 0 the horizontal (x) and channel 1 the
vertical (y) displacement in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frequency import fft2, ifft2, to_real_channels


class ChannelAttention(nn.Module):
    """Global average pool, two 1x1 convs, sigmoid gate."""

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.body = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return x * self.body(x)


class OffsetBranch(nn.Module):
    """Two convolutions of kernel size 2n+1 with PReLU between, then channel attention."""

    def __init__(self, channels: int, n: int):
        super().__init__()
        k = 2 * n + 1
        self.conv1 = nn.Conv2d(2 * channels, 2 * channels, k, padding=n)
        self.act = nn.PReLU()
        self.conv2 = nn.Conv2d(2 * channels, 4, k, padding=n)
        self.ca = ChannelAttention(4, channels)

    def forward(self, x):
        return self.ca(self.conv2(self.act(self.conv1(x))))


def spectrum_to_offset(o_hat: torch.Tensor) -> torch.Tensor:
    """Read a 4-channel map as [re_x, re_y, im_x, im_y] of a centered spectrum
    and return the real part of its inverse transform, shape (N, 2, H, W)."""
    spec = torch.complex(o_hat[:, :2], o_hat[:, 2:])
    return ifft2(spec, real=False).real


class MotionEstimator(nn.Module):
    def __init__(self, channels: int, num_offsets: int):
        super().__init__()
        c = channels
        self.diff_block = nn.Sequential(
            nn.Conv2d(4 * c, 4 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(4 * c, 2 * c, 3, padding=1),
        )
        self.ref_block = nn.Sequential(
            nn.Conv2d(2 * c, 2 * c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4, 3, padding=1),
        )
        self.branches = nn.ModuleList(OffsetBranch(c, n) for n in range(1, num_offsets + 1))

    def forward(self, ref: torch.Tensor, src: torch.Tensor) -> list[torch.Tensor]:
        if ref.shape != src.shape:
            raise ValueError(f"reference {tuple(ref.shape)} and source {tuple(src.shape)} differ")
        f_ref = to_real_channels(fft2(ref))
        f_src = to_real_channels(fft2(src))
        f_diff = f_ref - f_src + self.diff_block(torch.cat([f_ref, f_src], dim=1))
        ref_corr = self.ref_block(f_ref)
        # local correlation: per-location product of the two 4-channel maps
        return [spectrum_to_offset(branch(f_diff) * ref_corr) for branch in self.branches]


@dataclass
class KernelSet:
    vertical: torch.Tensor  # (N_off, B, C, k, H, W)
    horizontal: torch.Tensor  # (N_off, B, C, k, H, W)

    def __len__(self):
        return self.vertical.shape[0]


class KernelPredictor(nn.Module):
    """3x3 conv, ReLU, 1x1 conv producing 2 * num_offsets * C * k values per pixel.

    The head starts at small weights with a delta-kernel bias so every adaptive
    convolution is close to the identity at initialisation.
    """

    def __init__(self, channels: int, num_offsets: int, kernel_size: int):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"adaptive kernel size must be odd, got {kernel_size}")
        self.c, self.n, self.k = channels, num_offsets, kernel_size
        self.body = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(channels, 2 * num_offsets * channels * kernel_size, 1)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            self.head.bias.copy_(delta_bias(num_offsets, channels, kernel_size))

    def forward(self, ref: torch.Tensor) -> KernelSet:
        b, _, h, w = ref.shape
        k = self.head(self.body(ref)).view(b, self.n, 2, self.c, self.k, h, w)
        k = k.permute(1, 2, 0, 3, 4, 5, 6)
        return KernelSet(vertical=k[:, 0], horizontal=k[:, 1])


def delta_bias(num_offsets: int, channels: int, kernel_size: int) -> torch.Tensor:
    bias = torch.zeros(num_offsets, 2, channels, kernel_size)
    bias[..., kernel_size // 2] = 1.0
    return bias.flatten()


def warp(x: torch.Tensor, offset: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``x`` at ``p + offset(p)``; reads past the border clamp to the edge."""
    _, _, h, w = x.shape
    ys = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    xs = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    gx = (xs + offset[:, 0]) * (2.0 / max(w - 1, 1)) - 1.0
    gy = (ys + offset[:, 1]) * (2.0 / max(h - 1, 1)) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=True)


def _filter_1d(x: torch.Tensor, kernel: torch.Tensor, dim: int) -> torch.Tensor:
    # kernel: (B, C, k, H, W); correlation along `dim` (-1 width, -2 height)
    k = kernel.shape[2]
    p = k // 2
    pad = (p, p, 0, 0) if dim == -1 else (0, 0, p, p)
    xp = F.pad(x, pad, mode="reflect") if p else x
    patches = xp.unfold(dim, k, 1)  # (B, C, H, W, k)
    return (patches * kernel.permute(0, 1, 3, 4, 2)).sum(-1)


def adaptive_separable_conv(x: torch.Tensor, vertical: torch.Tensor, horizontal: torch.Tensor) -> torch.Tensor:
    """Spatially-varying, channel-wise separable filtering.

    Applies the 1 x k horizontal kernel, then the k x 1 vertical kernel, at every
    pixel and channel. Kernels are (B, C, k, H, W); tap ``t`` weights the sample
    at displacement ``t - k // 2``. Borders are reflect-padded.
    """
    b, c, h, w = x.shape
    expected = (b, c, vertical.shape[2], h, w)
    if tuple(vertical.shape) != expected or tuple(horizontal.shape) != expected:
        raise ValueError(
            f"kernels {tuple(vertical.shape)} / {tuple(horizontal.shape)} do not match feature {tuple(x.shape)}"
        )
    if vertical.shape[2] % 2 == 0:
        raise ValueError("adaptive kernel size must be odd")
    return _filter_1d(_filter_1d(x, horizontal, -1), vertical, -2)


def mgac_align(src: torch.Tensor, offsets: list[torch.Tensor] | None, kernels: KernelSet) -> torch.Tensor:
    """Cascade of warp-then-filter steps; ``offsets=None`` skips warping."""
    n = len(kernels)
    if offsets is not None and len(offsets) != n:
        raise ValueError(f"{len(offsets)} offsets for {n} kernel pairs")
    a = src
    for i in range(n):
        if offsets is not None:
            a = warp(a, offsets[i])
        a = adaptive_separable_conv(a, kernels.vertical[i], kernels.horizontal[i])
    return a


class MGAA(nn.Module):
    """Aligns a left and a right neighbour onto a center feature and fuses them."""

    def __init__(self, channels: int, num_offsets: int, kernel_size: int, use_motion: bool = True):
        super().__init__()
        self.use_motion = use_motion
        self.motion = MotionEstimator(channels, num_offsets) if use_motion else None
        self.kernels = KernelPredictor(channels, num_offsets, kernel_size)
        self.fuse = nn.Conv2d(2 * channels, channels, 3, padding=1)

    def align(self, center: torch.Tensor, neighbour: torch.Tensor) -> torch.Tensor:
        offsets = self.motion(center, neighbour) if self.motion is not None else None
        return mgac_align(neighbour, offsets, self.kernels(center))

    def forward(self, left: torch.Tensor, center: torch.Tensor, right: torch.Tensor) -> torch.Tensor:
        if not (left.shape == center.shape == right.shape):
            raise ValueError("MGAA inputs must share a shape")
        fwd = self.align(center, left)
        bwd = self.align(center, right)
        return self.fuse(torch.cat([fwd, bwd], dim=1))


class ConcatFusion(nn.Module):
    """Alignment-free stand-in: concatenate the three features and convolve."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(3 * channels, channels, 3, padding=1)

    def forward(self, left, center, right):
        if not (left.shape == center.shape == right.shape):
            raise ValueError("fusion inputs must share a shape")
        return self.fuse(torch.cat([left, center, right], dim=1))
