"""Full network: per-frame embedding, three-node alignment tree, frequency
refinement, reconstruction head and bilinear residual output."""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, preset
from .mffr import MFFR
from .mgaa import MGAA, ConcatFusion

NUM_FRAMES = 7


class ScaleWiseBlock(nn.Module):
    """Residual block whose 3x3 conv is shared between full and half resolution.

    ``x + res_scale * (conv(relu(x)) + up(conv(relu(down(x)))))``
    """

    def __init__(self, channels: int, res_scale: float = 0.1):
        super().__init__()
        self.res_scale = res_scale
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        y = self.conv(F.relu(x))
        if h >= 2 and w >= 2:
            small = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
            small = self.conv(F.relu(small))
            y = y + F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)
        return x + self.res_scale * y


class ResidualGroup(nn.Module):
    """Three scale-wise blocks and a closing conv under a short skip."""

    def __init__(self, channels: int, blocks: int = 3):
        super().__init__()
        self.body = nn.Sequential(*[ScaleWiseBlock(channels) for _ in range(blocks)])
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        with torch.no_grad():
            self.conv.weight.mul_(0.1)

    def forward(self, x):
        return x + self.conv(self.body(x))


class Reconstruction(nn.Module):
    """Residual-in-residual groups, then conv + pixel shuffle to an HR residual."""

    def __init__(self, channels: int, image_channels: int, num_groups: int, scale: int):
        super().__init__()
        self.groups = nn.Sequential(*[ResidualGroup(channels) for _ in range(num_groups)])
        self.trunk = nn.Conv2d(channels, channels, 3, padding=1)
        self.tail = nn.Conv2d(channels, image_channels * scale * scale, 3, padding=1)
        self.shuffle = nn.PixelShuffle(scale)
        with torch.no_grad():
            self.tail.weight.mul_(0.1)
            self.tail.bias.zero_()

    def forward(self, x):
        x = x + self.trunk(self.groups(x))
        return self.shuffle(self.tail(x))


class FCVSR(nn.Module):
    """Seven LR frames (B, 7, C_img, h, w) -> SR center frame (B, C_img, s*h, s*w).

    The output is clamped to [0, 1] only in eval mode.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = cfg = config
        c = cfg.channels
        self.embed = nn.Conv2d(cfg.image_channels, c, 3, padding=1)

        def make_align():
            if not cfg.use_alignment:
                return ConcatFusion(c)
            return MGAA(c, cfg.num_offsets, cfg.kernel_size, use_motion=cfg.use_motion)

        if cfg.share_alignment:
            self.align = make_align()
        else:
            self.align_past = make_align()
            self.align_future = make_align()
            self.align = make_align()

        self.refine = (
            MFFR(
                c,
                cfg.num_bands,
                cfg.gamma,
                cfg.mask_variant,
                cfg.butterworth_order,
                cfg.use_feedforward,
                cfg.use_feedback,
                cfg.identity_hooks,
            )
            if cfg.use_refinement
            else nn.Identity()
        )
        self.rec = Reconstruction(c, cfg.image_channels, cfg.num_groups, cfg.scale)

    def embed_frames(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5 or frames.shape[1] != NUM_FRAMES:
            raise ValueError(f"expected (B, {NUM_FRAMES}, C, h, w) frames, got {tuple(frames.shape)}")
        b, t, ci, h, w = frames.shape
        feats = self.embed(frames.reshape(b * t, ci, h, w))
        return feats.view(b, t, -1, h, w)

    def aligned_feature(self, feats: torch.Tensor) -> torch.Tensor:
        f = feats.unbind(1)
        past = self.align if self.config.share_alignment else self.align_past
        future = self.align if self.config.share_alignment else self.align_future
        f_past = past(f[0], f[1], f[2])
        f_future = future(f[4], f[5], f[6])
        return self.align(f_past, f[3], f_future)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        feats = self.embed_frames(frames)
        refined = self.refine(self.aligned_feature(feats))
        residual = self.rec(refined)
        up = F.interpolate(frames[:, NUM_FRAMES // 2], scale_factor=self.config.scale, mode="bilinear", align_corners=False)
        out = residual + up
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out


def zero_residual_head(model: FCVSR) -> None:
    """Zero the last reconstruction conv so the model returns the bilinear upsample."""
    with torch.no_grad():
        model.rec.tail.weight.zero_()
        model.rec.tail.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_count(config: ModelConfig) -> int:
    return count_parameters(FCVSR(config))


def parameter_breakdown(model: FCVSR) -> OrderedDict[str, int]:
    out: OrderedDict[str, int] = OrderedDict()
    for name, child in model.named_children():
        if isinstance(child, (MGAA, ConcatFusion)):
            if isinstance(child, MGAA):
                if child.motion is not None:
                    out[f"{name}.motion"] = count_parameters(child.motion)
                out[f"{name}.kernels"] = count_parameters(child.kernels)
                out[f"{name}.fuse"] = count_parameters(child.fuse)
            else:
                out[name] = count_parameters(child)
        else:
            out[name] = count_parameters(child)
    return out


# reference model sizes, millions of parameters
REFERENCE_PARAMS = {"FCVSR": 8.81, "FCVSR-S": 3.70}


def parameter_report(channels: int = 64, tolerance: float = 0.25) -> dict:
    """Parameter counts of both presets against reference totals."""
    rows = {}
    for name, target in REFERENCE_PARAMS.items():
        model = FCVSR(preset(name, channels=channels))
        total = count_parameters(model)
        rel = total / (target * 1e6) - 1.0
        rows[name] = {
            "total": total,
            "target_millions": target,
            "relative_deviation": rel,
            "within_tolerance": abs(rel) <= tolerance,
            "breakdown": dict(parameter_breakdown(model)),
        }
    return {"channels": channels, "tolerance": tolerance, "presets": rows}
