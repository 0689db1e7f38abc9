"""Dataset preparation (downsample, then encode with an external codec) and
deterministic training-sample generation.

Directory conventions
---------------------
``src_dir/<sequence>/*.png`` holds the HR frames of each sequence, sorted by
file name. :func:`prepare_dataset` writes ``out_dir/<sequence>/lr/*.png`` and a
line-delimited JSON manifest (one object per sequence)::

    {"name": str, "status": "ok" | "failed", "error": str | null,
     "image_channels": 1 | 3,
     "hr_frames": [path, ...], "lr_frames": [path, ...],
     "degradation": {"mode": "QP" | "CRF" | "none", "value": int | null,
                     "encoder_cmd": str | null, "scale": int}}

Paths are relative to the manifest's directory.

The encoder command is a shell template with ``{input}``, ``{output}``,
``{qp}`` and ``{crf}`` placeholders. ``{input}`` is a directory of bicubic-
downsampled PNG frames; the command must leave the same number of decoded PNG
frames in the ``{output}`` directory (encode + decode in one step).
"""

from __future__ import annotations

import json
import logging
import math
import os
import shlex
import shutil
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .model import NUM_FRAMES

log = logging.getLogger(__name__)

DEGRADATION_MODES = ("QP", "CRF", "none")
# common compression settings
QP_VALUES = (22, 27, 32, 37)
CRF_VALUES = (15, 25, 35)


# --- frame I/O -------------------------------------------------------------


def to_luma(rgb: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma of an (H, W, 3) array."""
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def load_frame(path: str | Path, channels: int = 3) -> np.ndarray:
    """Read a PNG as a float32 (C, H, W) array in [0, 1]."""
    with Image.open(path) as im:
        if channels == 1:
            a = np.asarray(_luma_image(im), dtype=np.float32) / 255.0
            return a[None].copy()
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return a.transpose(2, 0, 1).copy()


def save_frame(path: str | Path, frame) -> None:
    """Write a (C, H, W) float frame in [0, 1] as an 8-bit PNG."""
    a = frame.detach().cpu().numpy() if isinstance(frame, torch.Tensor) else np.asarray(frame)
    a = np.clip(np.round(a.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    if a.ndim == 3 and a.shape[0] == 1:
        img = Image.fromarray(a[0], mode="L")
    elif a.ndim == 3:
        img = Image.fromarray(a.transpose(1, 2, 0), mode="RGB")
    else:
        img = Image.fromarray(a, mode="L")
    img.save(path)


def list_frames(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob("*.png"))


def bicubic_downsample(img: Image.Image, scale: int) -> Image.Image:
    w, h = img.size
    if w % scale or h % scale:
        raise ValueError(f"frame size {w}x{h} is not divisible by scale {scale}")
    return img.resize((w // scale, h // scale), Image.BICUBIC)


# --- manifest ----------------------------------------------------------------


@dataclass
class Degradation:
    mode: str = "none"
    value: int | None = None
    encoder_cmd: str | None = None
    scale: int = 4

    def __post_init__(self):
        if self.mode not in DEGRADATION_MODES:
            raise ValueError(f"degradation mode must be one of {DEGRADATION_MODES}, got {self.mode!r}")
        if self.mode != "none" and (self.value is None or not self.encoder_cmd):
            raise ValueError(f"mode {self.mode} needs both a value and an encoder command")
        if self.scale < 1:
            raise ValueError("scale must be positive")


@dataclass
class SequenceEntry:
    name: str
    hr_frames: list[str]
    lr_frames: list[str]
    degradation: Degradation
    image_channels: int = 3
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> SequenceEntry:
        required = {"name", "hr_frames", "lr_frames", "degradation", "status"}
        missing = required - set(d)
        if missing:
            raise ValueError(f"manifest entry missing fields {sorted(missing)}")
        d = dict(d)
        d["degradation"] = Degradation(**d["degradation"])
        return cls(**d)


@dataclass
class Manifest:
    path: Path
    sequences: list[SequenceEntry] = field(default_factory=list)

    @property
    def root(self) -> Path:
        return self.path.parent

    def ok(self) -> list[SequenceEntry]:
        return [s for s in self.sequences if s.status == "ok"]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def write(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("".join(s.to_json() + "\n" for s in self.sequences))


def load_manifest(path: str | Path, check_images: bool = False) -> Manifest:
    """Parse and validate a manifest; raises ValueError on schema violations."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            entries.append(SequenceEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, TypeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: {e}") from e
    manifest = Manifest(path, entries)
    for s in manifest.ok():
        if len(s.hr_frames) != len(s.lr_frames):
            raise ValueError(f"sequence {s.name}: {len(s.hr_frames)} HR vs {len(s.lr_frames)} LR frames")
        if not s.hr_frames:
            raise ValueError(f"sequence {s.name} has no frames")
        if check_images:
            scale = s.degradation.scale
            for hr, lr in zip(s.hr_frames, s.lr_frames):
                with Image.open(manifest.resolve(hr)) as a, Image.open(manifest.resolve(lr)) as b:
                    if (a.size[0] != b.size[0] * scale) or (a.size[1] != b.size[1] * scale):
                        raise ValueError(f"sequence {s.name}: {hr} is not {scale}x {lr}")
    return manifest


# --- preparation -------------------------------------------------------------


def _run_encoder(template: str, src: Path, dst: Path, deg: Degradation) -> None:
    value = "" if deg.value is None else str(deg.value)
    cmd = template.format(
        input=shlex.quote(str(src)),
        output=shlex.quote(str(dst)),
        qp=value if deg.mode == "QP" else "",
        crf=value if deg.mode == "CRF" else "",
    )
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, check=False)
    if proc.returncode != 0:
        raise RuntimeError(f"encoder exited with {proc.returncode}: {proc.stderr.strip()[:500]}")


def _prepare_sequence(seq_dir: Path, out_dir: Path, deg: Degradation, channels: int) -> SequenceEntry:
    hr_paths = list_frames(seq_dir)
    if not hr_paths:
        raise ValueError(f"no PNG frames in {seq_dir}")
    rel = lambda p: _relpath(p, out_dir)
    entry = SequenceEntry(
        name=seq_dir.name,
        hr_frames=[rel(p) for p in hr_paths],
        lr_frames=[],
        degradation=deg,
        image_channels=channels,
    )
    seq_out = out_dir / seq_dir.name
    lr_dir = seq_out / "lr"
    pre_dir = seq_out / "lr_pre" if deg.mode != "none" else lr_dir
    for d in {lr_dir, pre_dir}:
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
    for i, p in enumerate(hr_paths):
        with Image.open(p) as im:
            im = im.convert("RGB") if channels == 3 else _luma_image(im)
            bicubic_downsample(im, deg.scale).save(pre_dir / f"{i:05d}.png")
    if deg.mode != "none":
        try:
            _run_encoder(deg.encoder_cmd, pre_dir, lr_dir, deg)
            decoded = list_frames(lr_dir)
            if len(decoded) != len(hr_paths):
                raise RuntimeError(f"encoder produced {len(decoded)} frames, expected {len(hr_paths)}")
        except RuntimeError as e:
            log.warning("sequence %s failed: %s", seq_dir.name, e)
            entry.status, entry.error = "failed", str(e)
            return entry
    entry.lr_frames = [rel(p) for p in list_frames(lr_dir)]
    return entry


def _relpath(p, start) -> str:
    return Path(os.path.relpath(Path(p).resolve(), Path(start).resolve())).as_posix()


def _luma_image(im: Image.Image) -> Image.Image:
    if im.mode == "L":
        return im
    y = to_luma(np.asarray(im.convert("RGB"), dtype=np.float64))
    return Image.fromarray(np.clip(np.round(y), 0, 255).astype(np.uint8), mode="L")


def prepare_dataset(
    src_dir: str | Path,
    out_dir: str | Path,
    degradation: Degradation | None = None,
    image_channels: int = 3,
    workers: int = 1,
    manifest_name: str = "manifest.jsonl",
) -> Manifest:
    """Build LR frames for every sequence under ``src_dir`` and write a manifest.

    A sequence whose encoder call fails is recorded with ``status="failed"``;
    the remaining sequences are still processed.
    """
    src_dir, out_dir = Path(src_dir), Path(out_dir)
    deg = degradation or Degradation()
    seq_dirs = sorted(d for d in src_dir.iterdir() if d.is_dir())
    if not seq_dirs:
        raise ValueError(f"no sequence directories under {src_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        entries = list(pool.map(lambda d: _prepare_sequence(d, out_dir, deg, image_channels), seq_dirs))
    manifest = Manifest(out_dir / manifest_name, entries)
    manifest.write()
    return manifest


# --- sampling ----------------------------------------------------------------


def sample_window(length: int, t: int, size: int = NUM_FRAMES) -> list[int]:
    """Frame indices ``t - size//2 .. t + size//2``, mirrored at the sequence ends."""
    if length < 1:
        raise ValueError("sequence must have at least one frame")
    if length == 1:
        return [0] * size
    period = 2 * (length - 1)
    out = []
    for i in range(t - size // 2, t + size // 2 + 1):
        i = abs(i) % period
        out.append(period - i if i >= length else i)
    return out


def bilinear_up(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """(C, h, w) or (B, C, h, w) -> bilinear x``scale``."""
    squeeze = lr.dim() == 3
    x = lr[None] if squeeze else lr
    up = F.interpolate(x, scale_factor=scale, mode="bilinear", align_corners=False)
    return up[0] if squeeze else up


@dataclass
class TrainSample:
    lr: torch.Tensor  # (7, C, h, w)
    hr: torch.Tensor  # (C, H, W)
    up: torch.Tensor  # (C, H, W)

    @classmethod
    def build(cls, lr: torch.Tensor, hr: torch.Tensor, scale: int) -> TrainSample:
        return cls(lr, hr, bilinear_up(lr[NUM_FRAMES // 2], scale))


def dihedral(x: torch.Tensor, k: int) -> torch.Tensor:
    """One of the 8 rotations/reflections of the last two axes: rotate by
    ``k % 4`` quarter turns, then mirror horizontally when ``k >= 4``."""
    x = torch.rot90(x, k % 4, dims=(-2, -1))
    return x.flip(-1) if k >= 4 else x


def crop_and_augment(
    sample: TrainSample,
    patch: int | None,
    rng: np.random.Generator,
    scale: int,
    augment: bool = True,
) -> TrainSample:
    """Random aligned crop (``patch`` is the HR side) plus a random dihedral transform.

    The same transform is applied to every LR frame, the HR frame and the UP frame.
    """
    lr, hr, up = sample.lr, sample.hr, sample.up
    if patch is not None:
        if patch % scale:
            raise ValueError(f"patch {patch} is not divisible by scale {scale}")
        lp = patch // scale
        h, w = lr.shape[-2:]
        if lp > h or lp > w:
            raise ValueError(f"patch {patch} larger than HR frame {h * scale}x{w * scale}")
        y = int(rng.integers(0, h - lp + 1))
        x = int(rng.integers(0, w - lp + 1))
        lr = lr[..., y : y + lp, x : x + lp]
        sl = (slice(None), slice(y * scale, y * scale + patch), slice(x * scale, x * scale + patch))
        hr, up = hr[sl], up[sl]
    if augment:
        k = int(rng.integers(0, 8))
        lr, hr, up = dihedral(lr, k), dihedral(hr, k), dihedral(up, k)
    return TrainSample(lr.contiguous(), hr.contiguous(), up.contiguous())


class ClipDataset:
    """Seven-frame windows around every frame of every usable sequence.

    Randomness for sample ``index`` in ``epoch`` comes only from
    ``(seed, epoch, index)``, so results do not depend on loading order.
    ``targets`` optionally restricts training to (sequence, frame) pairs.
    """

    def __init__(
        self,
        manifest: Manifest,
        patch: int | None = None,
        augment: bool = True,
        seed: int = 0,
        targets: list[tuple[int, int]] | None = None,
    ):
        self.manifest = manifest
        self.patch, self.augment, self.seed = patch, augment, seed
        self.sequences = manifest.ok()
        if not self.sequences:
            raise ValueError("manifest has no usable sequences")
        scales = {s.degradation.scale for s in self.sequences}
        channels = {s.image_channels for s in self.sequences}
        if len(scales) != 1 or len(channels) != 1:
            raise ValueError("all sequences must share scale and channel count")
        self.scale = scales.pop()
        self.channels = channels.pop()
        self.index = [(i, t) for i, s in enumerate(self.sequences) for t in range(len(s.lr_frames))]
        if targets is not None:
            unknown = set(map(tuple, targets)) - set(self.index)
            if unknown:
                raise ValueError(f"targets not in the manifest: {sorted(unknown)}")
            self.index = [tuple(t) for t in targets]
        self._cache: dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.index)

    def _frame(self, rel: str) -> np.ndarray:
        if rel not in self._cache:
            self._cache[rel] = load_frame(self.manifest.resolve(rel), self.channels)
        return self._cache[rel]

    def clip(self, seq: int, t: int) -> TrainSample:
        s = self.sequences[seq]
        idx = sample_window(len(s.lr_frames), t)
        lr = torch.from_numpy(np.stack([self._frame(s.lr_frames[i]) for i in idx]))
        hr = torch.from_numpy(self._frame(s.hr_frames[t]))
        return TrainSample.build(lr, hr, self.scale)

    def sample(self, index: int, epoch: int = 0) -> TrainSample:
        rng = np.random.default_rng((self.seed, epoch, index))
        return crop_and_augment(self.clip(*self.index[index]), self.patch, rng, self.scale, self.augment)

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng((self.seed, epoch)).permutation(len(self))

    def batches_per_epoch(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)

    def batch(self, epoch: int, position: int, batch_size: int) -> TrainSample:
        """The ``position``-th batch of ``epoch`` as stacked tensors."""
        ids = self.order(epoch)[position * batch_size : (position + 1) * batch_size]
        samples = [self.sample(int(i), epoch) for i in ids]
        return TrainSample(
            torch.stack([s.lr for s in samples]),
            torch.stack([s.hr for s in samples]),
            torch.stack([s.up for s in samples]),
        )


# --- synthetic content ---------------------------------------------------------


def synthetic_frames(num_frames: int = 7, size: int = 128, channels: int = 3, seed: int = 0, max_freq: float = 0.06):
    """Smooth drifting texture: a sum of random sinusoids (each below ``max_freq``
    cycles per pixel) translating a fraction of a pixel per frame.

    Returns a float64 array (T, C, size, size) in [0, 1].
    """
    rng = np.random.default_rng(seed)
    k = 6
    freqs = rng.uniform(-max_freq, max_freq, size=(k, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(k, channels))
    amps = rng.uniform(0.2, 1.0, size=(k, channels))
    velocity = rng.uniform(-1.5, 1.5, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.zeros((num_frames, channels, size, size))
    for t in range(num_frames):
        x, y = xx + velocity[0] * t, yy + velocity[1] * t
        for j in range(k):
            arg = 2 * np.pi * (freqs[j, 0] * x + freqs[j, 1] * y)
            frames[t] += amps[j][:, None, None] * np.sin(arg[None] + phases[j][:, None, None])
    lo, hi = frames.min(), frames.max()
    return (frames - lo) / (hi - lo)


def write_synthetic_dataset(root: str | Path, sequences: int = 1, num_frames: int = 10, size: int = 128, channels: int = 3, seed: int = 0) -> Path:
    """Write ``sequences`` synthetic HR sequences as PNG directories under ``root``."""
    root = Path(root)
    for s in range(sequences):
        d = root / f"seq{s:03d}"
        d.mkdir(parents=True, exist_ok=True)
        for t, f in enumerate(synthetic_frames(num_frames, size, channels, seed + s)):
            save_frame(d / f"{t:05d}.png", f)
    return root
