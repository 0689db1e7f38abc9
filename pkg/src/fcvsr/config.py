"""Hyperparameter containers for the model, the training objective and the
training schedule, plus the two standard presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

MASK_VARIANTS = ("consecutive-difference", "literal-paper", "ideal", "butterworth")


@dataclass(frozen=True)
class ModelConfig:
    num_offsets: int = 6  # adaptive convolutions per alignment cascade
    num_bands: int = 8  # frequency subbands in the refinement stage
    num_groups: int = 10  # residual groups in the reconstruction head
    kernel_size: int = 5  # length of each 1-D adaptive kernel
    channels: int = 64
    image_channels: int = 3
    scale: int = 4
    gamma: float = 0.2  # residual scale of the enhancement blocks
    mask_variant: str = "consecutive-difference"
    butterworth_order: int = 2
    share_alignment: bool = True
    # ablation switches
    use_alignment: bool = True
    use_motion: bool = True
    use_refinement: bool = True
    use_feedforward: bool = True
    use_feedback: bool = True
    # replaces enhancement blocks and channel attention with identities
    identity_hooks: bool = False

    def __post_init__(self):
        if self.num_offsets < 1:
            raise ValueError(f"num_offsets must be >= 1, got {self.num_offsets}")
        if self.num_bands < 1:
            raise ValueError(f"num_bands must be >= 1, got {self.num_bands}")
        if self.num_groups < 1:
            raise ValueError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.image_channels not in (1, 3):
            raise ValueError(f"image_channels must be 1 or 3, got {self.image_channels}")
        if self.channels < 1 or self.scale < 1:
            raise ValueError("channels and scale must be positive")
        if self.mask_variant not in MASK_VARIANTS:
            raise ValueError(f"unknown mask variant {self.mask_variant!r}")
        if not (self.use_feedforward or self.use_feedback):
            raise ValueError("at least one enhancement branch must stay enabled")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    temperature: float = 1.0
    eps: float = 1e-4
    use_high_term: bool = True  # anchors on HH/HL/LH subbands
    use_low_term: bool = True  # anchor on the LL subband
    # "sum" adds the per-anchor InfoNCE terms; "mean" divides each set by its size
    term_reduction: str = "sum"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.temperature <= 0 or self.eps <= 0:
            raise ValueError("temperature and eps must be positive")
        if self.term_reduction not in ("sum", "mean"):
            raise ValueError(f"term_reduction must be 'sum' or 'mean', got {self.term_reduction!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 2e-4
    milestones: tuple[int, ...] = (2000, 8000, 12000)
    total: int = 30000
    # multiplies milestones and total; 0.01 turns 30K into 300 units
    schedule_scale: float = 1.0
    # "step": one unit per optimizer step, "epoch": one unit per pass over the data
    schedule_unit: str = "step"
    patch_size: int | None = 128  # HR crop side; None trains on full frames
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 1000
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.schedule_unit not in ("step", "epoch"):
            raise ValueError(f"schedule_unit must be 'step' or 'epoch', got {self.schedule_unit!r}")
        if self.batch_size < 1 or self.lr <= 0 or self.schedule_scale <= 0:
            raise ValueError("batch_size, lr and schedule_scale must be positive")

    @property
    def scaled_milestones(self) -> tuple[int, ...]:
        return tuple(max(1, round(m * self.schedule_scale)) for m in self.milestones)

    @property
    def scaled_total(self) -> int:
        return max(1, round(self.total * self.schedule_scale))

    def lr_at(self, unit: int) -> float:
        """Learning rate after ``unit`` schedule units; halves at every milestone reached."""
        drops = sum(1 for m in self.scaled_milestones if unit >= m)
        return self.lr * 0.5**drops


PRESETS: dict[str, dict[str, Any]] = {
    "FCVSR": {"num_offsets": 6, "num_bands": 8, "num_groups": 10},
    "FCVSR-S": {"num_offsets": 4, "num_bands": 4, "num_groups": 3},
}


def preset(name: str, **overrides) -> ModelConfig:
    if name == "custom":
        return ModelConfig(**overrides)
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)} or 'custom'") from None
    return ModelConfig(**{**base, **overrides})


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "FCVSR"
    variant: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["train"]["milestones"] = list(self.train.milestones)
        d["train"]["betas"] = list(self.train.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Config:
        _check_keys(cls, d, "config")
        name = d.get("preset", "FCVSR")
        model_d = dict(d.get("model", {}))
        _check_keys(ModelConfig, model_d, "model")
        loss_d = dict(d.get("loss", {}))
        _check_keys(LossConfig, loss_d, "loss")
        train_d = dict(d.get("train", {}))
        _check_keys(TrainConfig, train_d, "train")
        return cls(
            model=preset(name, **model_d),
            loss=LossConfig(**loss_d),
            train=TrainConfig(**train_d),
            preset=name,
            variant=d.get("variant"),
        )

    def with_updates(self, **sections: dict[str, Any]) -> Config:
        out = self
        for key, upd in sections.items():
            if upd:
                out = replace(out, **{key: replace(getattr(out, key), **upd)})
        return out


def _check_keys(cls, d: dict[str, Any], where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path: str | Path) -> Config:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    return Config.from_dict(data)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
