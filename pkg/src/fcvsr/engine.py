"""Training loop, evaluation, inference and ablation runs."""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import MASK_VARIANTS, Config
from .data import ClipDataset, Manifest, TrainSample, list_frames, load_frame, load_manifest, sample_window, save_frame
from .losses import total_loss
from .metrics import psnr, ssim, vmaf_external
from .model import FCVSR, NUM_FRAMES

log = logging.getLogger(__name__)

# ablation switches that take no argument
ABLATIONS = {
    "full": {},
    "no-mgaa": {"model": {"use_alignment": False}},
    "no-me": {"model": {"use_motion": False}},
    "no-mffr": {"model": {"use_refinement": False}},
    "no-fbe": {"model": {"use_feedback": False}},
    "no-ffe": {"model": {"use_feedforward": False}},
    "no-fc-loss": {"loss": {"alpha": 0.0}},
    "no-L1-term": {"loss": {"use_high_term": False}},
    "no-L2-term": {"loss": {"use_low_term": False}},
}
# sweeps take a value: "mask-variant:ideal", "Q-sweep:16", "alpha-sweep:0.4"
SWEEPS = ("mask-variant", "Q-sweep", "alpha-sweep")


def apply_variant(config: Config, variant: str) -> Config:
    if variant in ABLATIONS:
        updates = ABLATIONS[variant]
    else:
        name, sep, value = variant.partition(":")
        if not sep or name not in SWEEPS:
            known = sorted(ABLATIONS) + [f"{s}:<value>" for s in SWEEPS]
            raise ValueError(f"unknown variant {variant!r}; known: {known}")
        if name == "mask-variant":
            if value not in MASK_VARIANTS:
                raise ValueError(f"mask variant must be one of {MASK_VARIANTS}")
            updates = {"model": {"mask_variant": value}}
        elif name == "Q-sweep":
            updates = {"model": {"num_bands": int(value)}}
        else:
            updates = {"loss": {"alpha": float(value)}}
    out = config.with_updates(**updates)
    return Config(out.model, out.loss, out.train, out.preset, variant)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: FCVSR
    rows: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    step: int = 0


def _read_log(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def train(
    config: Config,
    data: Manifest | ClipDataset | str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    max_steps: int | None = None,
    stop_when=None,
) -> TrainResult:
    """Optimise the full objective and write ``train_log.jsonl`` and checkpoints.

    ``max_steps`` caps the run below the scheduled total. ``stop_when(step, model)``
    may return True to end early (a checkpoint is still written).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = config.train
    if isinstance(data, ClipDataset):
        dataset = data
    else:
        manifest = data if isinstance(data, Manifest) else load_manifest(data)
        dataset = ClipDataset(manifest, tc.patch_size, tc.augment, tc.seed)
    if dataset.channels != config.model.image_channels or dataset.scale != config.model.scale:
        raise ValueError("dataset channels/scale do not match the model config")

    torch.manual_seed(tc.seed)
    model = FCVSR(config.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tc.betas)
    step = 0
    log_path = out_dir / "train_log.jsonl"
    rows: list[dict] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.model.state_dict())
        ckpt.restore_optimizer(optimizer, model)
        step = ckpt.step
        rows = [r for r in _read_log(log_path) if r["step"] <= step]
    log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

    bpe = dataset.batches_per_epoch(tc.batch_size)
    total = tc.scaled_total if tc.schedule_unit == "step" else tc.scaled_total * bpe
    if max_steps is not None:
        total = min(total, max_steps)

    last_ckpt = None
    with open(log_path, "a") as log_file:
        while step < total:
            epoch, pos = divmod(step, bpe)
            lr = tc.lr_at(step if tc.schedule_unit == "step" else epoch)
            for g in optimizer.param_groups:
                g["lr"] = lr
            batch = dataset.batch(epoch, pos, tc.batch_size)
            model.train()
            sr = model(batch.lr)
            losses = total_loss(sr, batch.hr, batch.up, config.loss)
            if not torch.isfinite(losses.total):
                dump = out_dir / f"nonfinite_step{step + 1:07d}.npz"
                np.savez(dump, lr=batch.lr.numpy(), hr=batch.hr.numpy(), up=batch.up.numpy())
                raise NonFiniteLossError(f"non-finite loss at step {step + 1}; batch written to {dump}")
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            step += 1
            row = {"step": step, "epoch": epoch, "lr": lr, **losses.as_floats()}
            rows.append(row)
            log_file.write(json.dumps(row, sort_keys=True) + "\n")
            log_file.flush()
            stop = stop_when is not None and stop_when(step, model)
            if step % tc.checkpoint_every == 0 or step == total or stop:
                last_ckpt = save_checkpoint(out_dir / "checkpoints" / f"step_{step:07d}", model, config, step, epoch, optimizer)
                (out_dir / "checkpoints" / "latest").write_text(last_ckpt.name)
            if stop:
                break
    model.eval()
    return TrainResult(model, rows, last_ckpt, step)


def super_resolve(model: FCVSR, lr_frames: torch.Tensor) -> torch.Tensor:
    """SR every frame of a (T, C, h, w) sequence using mirrored 7-frame windows."""
    model.eval()
    out = []
    with torch.no_grad():
        for t in range(lr_frames.shape[0]):
            idx = sample_window(lr_frames.shape[0], t)
            out.append(model(lr_frames[idx][None])[0])
    return torch.stack(out)


def frame_metrics(ref: np.ndarray, dist: np.ndarray) -> dict[str, float]:
    return {"psnr": psnr(ref, dist, 1.0), "ssim": ssim(ref, dist)}


def evaluate(
    checkpoint: str | Path,
    manifest: str | Path | Manifest,
    out_dir: str | Path | None = None,
    vmaf_cmd: str | None = None,
) -> dict:
    """Per-frame, per-sequence and mean PSNR/SSIM (and VMAF if configured).

    Metrics use float SR output against the HR frame, both in [0, 1], over all
    image channels (the luma plane for single-channel data).
    """
    ckpt = load_checkpoint(checkpoint)
    model, cfg = ckpt.model, ckpt.config
    manifest = manifest if isinstance(manifest, Manifest) else load_manifest(manifest)
    rows, per_seq = [], {}
    for seq in manifest.ok():
        if seq.image_channels != cfg.model.image_channels or seq.degradation.scale != cfg.model.scale:
            raise ValueError(f"sequence {seq.name} does not match the checkpoint's channels/scale")
        lr = torch.from_numpy(np.stack([load_frame(manifest.resolve(p), seq.image_channels) for p in seq.lr_frames]))
        sr = super_resolve(model, lr).numpy().astype(np.float64)
        seq_rows = []
        for t, hr_path in enumerate(seq.hr_frames):
            hr = load_frame(manifest.resolve(hr_path), seq.image_channels).astype(np.float64)
            if hr.shape != sr[t].shape:
                raise ValueError(f"{seq.name} frame {t}: HR {hr.shape} vs SR {sr[t].shape}")
            seq_rows.append({"sequence": seq.name, "frame": t, **frame_metrics(hr, sr[t])})
        summary = {k: float(np.mean([r[k] for r in seq_rows])) for k in ("psnr", "ssim")}
        if vmaf_cmd:
            summary["vmaf"] = _sequence_vmaf(manifest, seq, sr, vmaf_cmd)
        per_seq[seq.name] = summary
        rows.extend(seq_rows)
    if not rows:
        raise ValueError("no frames evaluated")
    report = {
        "checkpoint": str(checkpoint),
        "variant": cfg.variant,
        "frames": len(rows),
        "mean": {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim")},
        "sequences": per_seq,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
        (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    report["rows"] = rows
    return report


def _sequence_vmaf(manifest: Manifest, seq, sr: np.ndarray, vmaf_cmd: str) -> float | None:
    tmp = Path(tempfile.mkdtemp(prefix="fcvsr_vmaf_"))
    try:
        ref_dir, dist_dir = tmp / "ref", tmp / "dist"
        ref_dir.mkdir()
        dist_dir.mkdir()
        for t, p in enumerate(seq.hr_frames):
            shutil.copy(manifest.resolve(p), ref_dir / f"{t:05d}.png")
            save_frame(dist_dir / f"{t:05d}.png", sr[t])
        return vmaf_external(ref_dir, dist_dir, vmaf_cmd)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def infer(checkpoint: str | Path, frames_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Write one SR PNG per LR frame in ``frames_dir``, keeping file names."""
    ckpt = load_checkpoint(checkpoint)
    paths = list_frames(frames_dir)
    if not paths:
        raise ValueError(f"no PNG frames in {frames_dir}")
    channels = ckpt.config.model.image_channels
    try:
        lr = torch.from_numpy(np.stack([load_frame(p, channels) for p in paths]))
    except (OSError, ValueError) as e:
        raise ValueError(f"could not read frames from {frames_dir}: {e}") from e
    sr = super_resolve(ckpt.model, lr)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p, frame in zip(paths, sr):
        save_frame(out_dir / p.name, frame)
        written.append(out_dir / p.name)
    return written


def ablate(
    config: Config,
    variant: str,
    manifest: str | Path | Manifest,
    out_dir: str | Path,
    eval_manifest: str | Path | Manifest | None = None,
    max_steps: int | None = None,
) -> dict:
    """Train (and optionally evaluate) one variant; the tag lands in the checkpoint manifest."""
    cfg = apply_variant(config, variant)
    result = train(cfg, manifest, out_dir, max_steps=max_steps)
    out = {"variant": variant, "steps": result.step, "checkpoint": str(result.checkpoint), "final": result.rows[-1]}
    if eval_manifest is not None:
        out["eval"] = {k: v for k, v in evaluate(result.checkpoint, eval_manifest, Path(out_dir) / "eval").items() if k != "rows"}
    return out


def sample_to_batch(sample: TrainSample) -> TrainSample:
    return TrainSample(sample.lr[None], sample.hr[None], sample.up[None])


__all__ = [
    "ABLATIONS",
    "NUM_FRAMES",
    "NonFiniteLossError",
    "TrainResult",
    "ablate",
    "apply_variant",
    "evaluate",
    "infer",
    "super_resolve",
    "train",
]
