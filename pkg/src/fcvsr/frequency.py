"""Frequency-domain primitives shared by the alignment, refinement and loss code.

All functions take NCHW (or any ``(..., H, W)``) tensors and transform over the
last two axes. Spectra are kept *centered*: the DC bin sits at ``(H // 2, W // 2)``
so that band-pass masks can be written in terms of the distance to the center.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F

FFT_NORM = "ortho"
IMAG_TOLERANCE = 1e-4


def _check_finite(x: torch.Tensor) -> None:
    if not torch.isfinite(x).all():
        raise ValueError("input contains non-finite values")


def fft2(x: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Centered, orthonormal 2-D FFT over the last two axes."""
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError(f"spatial dims must be >= 2, got {tuple(x.shape[-2:])}")
    if check:
        _check_finite(x)
    return torch.fft.fftshift(torch.fft.fft2(x, norm=FFT_NORM), dim=(-2, -1))


def ifft2(spec: torch.Tensor, real: bool = True) -> torch.Tensor:
    """Inverse of :func:`fft2`.

    With ``real=True`` the imaginary part is dropped. It must be negligible
    (relative size below ``IMAG_TOLERANCE``), which holds whenever the spectrum
    came from a real signal multiplied by a real, point-symmetric mask.
    """
    x = torch.fft.ifft2(torch.fft.ifftshift(spec, dim=(-2, -1)), norm=FFT_NORM)
    if not real:
        return x
    with torch.no_grad():
        scale = x.real.abs().max().clamp_min(1e-12)
        if x.imag.abs().max() > IMAG_TOLERANCE * scale:
            raise ValueError("inverse transform has a non-negligible imaginary part")
    return x.real


def to_real_channels(spec: torch.Tensor) -> torch.Tensor:
    """Concatenate real and imaginary parts along the channel axis (C -> 2C)."""
    return torch.cat([spec.real, spec.imag], dim=1)


@dataclass(frozen=True)
class MaskSet:
    masks: torch.Tensor  # (Q, H, W), float64
    cutoffs: tuple[float, ...]
    variant: str

    def __len__(self):
        return self.masks.shape[0]


def cutoff_frequencies(h: int, w: int, num_bands: int) -> list[float]:
    radius = math.sqrt((h / 2) ** 2 + (w / 2) ** 2)
    return [j * radius / num_bands for j in range(1, num_bands + 1)]


def _radius_sq(h: int, w: int) -> torch.Tensor:
    u = torch.arange(h, dtype=torch.float64) - h // 2
    v = torch.arange(w, dtype=torch.float64) - w // 2
    return u[:, None] ** 2 + v[None, :] ** 2


@lru_cache(maxsize=64)
def _masks(h: int, w: int, num_bands: int, variant: str, order: int) -> MaskSet:
    d = cutoff_frequencies(h, w, num_bands)
    r2 = _radius_sq(h, w)
    if variant in ("consecutive-difference", "literal-paper"):
        lows = [torch.exp(-r2 / (2 * dj**2)) for dj in d]
    elif variant == "butterworth":
        lows = [1.0 / (1.0 + (r2 / dj**2) ** order) for dj in d]
    elif variant == "ideal":
        r = r2.sqrt()
        lows = [(r <= dj).to(torch.float64) for dj in d]
        # the outermost cutoff equals the corner radius; include it exactly
        lows[-1] = torch.ones_like(r)
    else:
        raise ValueError(f"unknown mask variant {variant!r}")

    if variant == "literal-paper":
        masks = [lows[j] - sum((lows[l] for l in range(j)), torch.zeros_like(r2)) for j in range(num_bands)]
    else:
        masks = [lows[0]] + [lows[j] - lows[j - 1] for j in range(1, num_bands)]
    return MaskSet(torch.stack(masks), tuple(d), variant)


def bandpass_masks(
    h: int, w: int, num_bands: int, variant: str = "consecutive-difference", order: int = 2
) -> MaskSet:
    """Build ``num_bands`` radial band-pass masks for an ``h x w`` centered spectrum.

    Variants:
      * ``consecutive-difference``: Gaussian low-pass at cutoff j minus the one at j-1,
        so the masks telescope to the widest Gaussian.
      * ``literal-paper``: Gaussian at cutoff j minus *all* narrower Gaussians.
      * ``ideal``: hard annuli ``d_{j-1} < r <= d_j``.
      * ``butterworth``: differences of Butterworth low-passes of the given order.

    The returned tensors are cached; treat them as read-only.
    """
    if num_bands < 1:
        raise ValueError(f"num_bands must be >= 1, got {num_bands}")
    if h < 2 or w < 2:
        raise ValueError(f"mask size must be at least 2x2, got {h}x{w}")
    if num_bands > min(h, w):
        warnings.warn(
            f"{num_bands} bands on a {h}x{w} spectrum: bands are thinner than one bin",
            stacklevel=2,
        )
    return _masks(h, w, num_bands, variant, order)


def decompose(x: torch.Tensor, masks: MaskSet | torch.Tensor) -> torch.Tensor:
    """Split ``x`` (N, C, H, W) into band-limited components.

    Returns a tensor of shape (Q, N, C, H, W) whose j-th entry is the inverse
    transform of the j-th mask times the spectrum of ``x``.
    """
    m = masks.masks if isinstance(masks, MaskSet) else masks
    if m.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"mask size {tuple(m.shape[-2:])} does not match feature size {tuple(x.shape[-2:])}")
    spec = fft2(x)
    m = m.to(device=x.device, dtype=x.dtype)
    shape = (m.shape[0],) + (1,) * (x.dim() - 2) + tuple(m.shape[-2:])
    return ifft2(m.view(shape) * spec.unsqueeze(0))


@dataclass
class WaveletSubbands:
    """Single-level orthonormal Haar subbands.

    Naming: the first letter is the filter applied along the width, the second
    along the height, so ``hl`` responds to intensity changes along the
    horizontal axis (vertical edges).
    """

    ll: torch.Tensor
    lh: torch.Tensor
    hl: torch.Tensor
    hh: torch.Tensor
    padding: tuple[int, int] = (0, 0)  # (bottom rows, right cols) added before analysis

    def energy(self) -> torch.Tensor:
        return sum(b.pow(2).sum() for b in (self.ll, self.lh, self.hl, self.hh))


def dwt2(x: torch.Tensor) -> WaveletSubbands:
    h, w = x.shape[-2:]
    pad = (h % 2, w % 2)
    if any(pad):
        if x.dim() < 3:
            raise ValueError("odd-sized input needs at least (C, H, W) layout for padding")
        x = F.pad(x, (0, pad[1], 0, pad[0]), mode="reflect")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletSubbands(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
        padding=pad,
    )


def idwt2(sb: WaveletSubbands) -> torch.Tensor:
    ll, lh, hl, hh = sb.ll, sb.lh, sb.hl, sb.hh
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w = ll.shape[-2:]
    out = ll.new_empty(ll.shape[:-2] + (2 * h, 2 * w))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    ph, pw = sb.padding
    return out[..., : 2 * h - ph, : 2 * w - pw]


def mean_filter(x: torch.Tensor, size: int = 3) -> torch.Tensor:
    """Per-channel box average with reflect padding; ``x`` is (N, C, H, W)."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"mean filter size must be odd and positive, got {size}")
    if size == 1:
        return x
    p = size // 2
    return F.avg_pool2d(F.pad(x, (p, p, p, p), mode="reflect"), size, stride=1)
