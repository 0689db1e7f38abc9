"""Checkpoint directory format.

    <dir>/manifest.json   {"format", "config", "step", "epoch", "seed", "variant"}
    <dir>/index.json      {name: {"shape": [...], "offset": bytes, "nbytes": bytes}}
    <dir>/tensors.bin     concatenated little-endian float32 blobs

Model parameters are stored under their ``state_dict`` names. Adam state is
stored as ``optimizer.<param name>.<field>`` so training can resume exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .model import FCVSR

FORMAT = "fcvsr-checkpoint/1"
OPT_PREFIX = "optimizer."


def _write_tensors(path: Path, tensors: dict[str, torch.Tensor]) -> dict:
    index, offset = {}, 0
    with open(path / "tensors.bin", "wb") as f:
        for name, t in tensors.items():
            a = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            buf = np.ascontiguousarray(a).tobytes()
            f.write(buf)
            index[name] = {"shape": list(a.shape), "offset": offset, "nbytes": len(buf)}
            offset += len(buf)
    (path / "index.json").write_text(json.dumps(index, indent=1))
    return index


def _read_tensors(path: Path) -> dict[str, torch.Tensor]:
    index = json.loads((path / "index.json").read_text())
    raw = (path / "tensors.bin").read_bytes()
    out = {}
    for name, meta in index.items():
        chunk = raw[meta["offset"] : meta["offset"] + meta["nbytes"]]
        a = np.frombuffer(chunk, dtype="<f4").reshape(meta["shape"])
        out[name] = torch.from_numpy(a.astype(np.float32))
    return out


def save_checkpoint(
    path: str | Path,
    model: FCVSR,
    config: Config,
    step: int = 0,
    epoch: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key, value in st.items():
                tensors[f"{OPT_PREFIX}{names[id(p)]}.{key}"] = torch.as_tensor(value)
    _write_tensors(path, tensors)
    manifest = {
        "format": FORMAT,
        "config": config.to_dict(),
        "step": step,
        "epoch": epoch,
        "seed": config.train.seed,
        "variant": config.variant,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


@dataclass
class Checkpoint:
    config: Config
    model: FCVSR
    step: int
    epoch: int
    optimizer_state: dict[str, torch.Tensor]
    meta: dict

    def restore_optimizer(self, optimizer: torch.optim.Optimizer, model: FCVSR | None = None) -> None:
        """Load the stored Adam state into ``optimizer``, which must be built over
        the parameters of ``model`` (default: the checkpoint's own model)."""
        params = dict((model or self.model).named_parameters())
        for key, value in self.optimizer_state.items():
            pname, field = key[len(OPT_PREFIX) :].rsplit(".", 1)
            if pname not in params:
                raise ValueError(f"optimizer state for unknown parameter {pname}")
            p = params[pname]
            state = optimizer.state[p]
            state[field] = value.reshape(()) if field == "step" else value.clone()


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the model from the stored config and load its weights.

    Raises ValueError if the stored tensors do not match what the config builds.
    """
    path = Path(path)
    meta = json.loads((path / "manifest.json").read_text())
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} checkpoint")
    config = Config.from_dict(meta["config"])
    tensors = _read_tensors(path)
    weights = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIX)}
    opt_state = {k: v for k, v in tensors.items() if k.startswith(OPT_PREFIX)}
    model = FCVSR(config.model)
    expected = model.state_dict()
    missing = set(expected) - set(weights)
    unexpected = set(weights) - set(expected)
    if missing or unexpected:
        raise ValueError(
            f"checkpoint does not match its config: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
        )
    for name, t in weights.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(expected[name].shape)}")
    model.load_state_dict(weights)
    model.eval()
    return Checkpoint(config, model, int(meta["step"]), int(meta.get("epoch", 0)), opt_state, meta)
