"""PSNR / SSIM on frames, plus a hook that shells out to an external VMAF tool."""

from __future__ import annotations

import json
import logging
import re
import shlex
import subprocess

import numpy as np
from scipy.signal import fftconvolve

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _as_chw(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (C, H, W) frame, got shape {a.shape}")
    return a


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(peak**2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return fftconvolve(x, win[::-1, ::-1], mode="valid")


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid window positions and channels."""
    a, b = _as_chw(a), _as_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"frame {a.shape[-2:]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        vx = _filter_valid(x * x, win) - mx**2
        vy = _filter_valid(y * y, win) - my**2
        cxy = _filter_valid(x * y, win) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


_VMAF_LINE = re.compile(r"vmaf[\w ]*[:=]\s*([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)


def parse_vmaf(text: str) -> float | None:
    """Accepts a JSON object with a numeric ``vmaf`` key, a ``VMAF score: x`` line,
    or output that is a single number."""
    text = text.strip()
    if not text:
        return None
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        data = None
    if isinstance(data, (int, float)) and not isinstance(data, bool):
        return float(data)
    if isinstance(data, dict) and isinstance(data.get("vmaf"), (int, float)):
        return float(data["vmaf"])
    m = _VMAF_LINE.findall(text)
    if m:
        return float(m[-1])
    return None


def vmaf_external(ref_dir, dist_dir, tool_cmd: str | None) -> float | None:
    """Run ``tool_cmd`` (placeholders ``{ref}``, ``{dist}``) and parse its score.

    Returns None when no tool is configured, and None with a warning when the
    tool fails or prints something unparseable.
    """
    if not tool_cmd:
        return None
    cmd = tool_cmd.format(ref=shlex.quote(str(ref_dir)), dist=shlex.quote(str(dist_dir)))
    try:
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, check=False)
    except OSError as e:
        log.warning("VMAF tool could not start: %s", e)
        return None
    if proc.returncode != 0:
        log.warning("VMAF tool exited with %d: %s", proc.returncode, proc.stderr.strip())
        return None
    score = parse_vmaf(proc.stdout)
    if score is None:
        log.warning("could not parse VMAF tool output: %r", proc.stdout[:200])
    return score
