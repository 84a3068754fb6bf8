"""Training configuration, loss weights and the flat-key config file format.

Config files are flat JSON objects whose keys are the ``TrainConfig`` field
names, with the loss weights spelled out as ``lambda_d`` ... ``lambda_if``.
Precedence when building an effective config is flags > file > defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ACTIVATIONS = ("sigmoid", "leakyrelu")
IDENT_F_MODES = ("pixel", "feature")


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_g: float = 1.0
    lambda_cycle: float = 10.0
    lambda_im: float = 0.1
    lambda_if: float = 10.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigError(f"{f.name} must be non-negative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    The defaults are the full-scale setting (256x256, 400 epochs, batch 1,
    Adam with generator lr 1e-4 and discriminator lr 8e-5, halving at epoch
    200 and quartering at epoch 300, six RMI modules, 3:1 discriminator
    suppression). Channel widths are not fixed by the model description;
    ``ngf``/``ndf`` follow the usual CycleGAN widths and ``rmi_channels`` is
    a small recurrent state.
    """

    image_size: int = 256
    epochs: int = 400
    batch: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    lr_gen: float = 1e-4
    lr_dis: float = 8e-5
    decay_epoch_half: int = 200
    decay_epoch_quarter: int = 300
    n_rmi: int = 6
    suppression_ratio: int = 3
    activation: str = "sigmoid"
    use_labels: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ngf: int = 64
    ndf: int = 64
    rmi_channels: int = 32
    n_res_blocks: int = 5
    ident_f_mode: str = "pixel"
    feature_weights: str | None = None
    checkpoint_every: int = 1
    sample_every: int = 1
    history_tail: int = 50

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 4:
            raise ConfigError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.epochs < 1 or self.batch < 1:
            raise ConfigError("epochs and batch must be >= 1")
        if self.suppression_ratio < 1:
            raise ConfigError(f"suppression_ratio must be >= 1, got {self.suppression_ratio}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.ident_f_mode not in IDENT_F_MODES:
            raise ConfigError(f"unknown ident_f_mode {self.ident_f_mode!r}")
        if self.n_rmi < 1 or min(self.ngf, self.ndf, self.rmi_channels) < 1:
            raise ConfigError("n_rmi and channel widths must be >= 1")
        if not 0 < self.decay_epoch_half <= self.decay_epoch_quarter:
            raise ConfigError("decay epochs must satisfy 0 < half <= quarter")
        if self.checkpoint_every < 1 or self.sample_every < 1:
            raise ConfigError("checkpoint_every and sample_every must be >= 1")
        if isinstance(self.weights, Mapping):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    @property
    def image_channels_in(self) -> int:
        """Generator input channels: RGB + mask (+ label)."""
        return 5 if self.use_labels else 4

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "weights":
                out.update(self.weights.as_dict())
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Overlay ``flat`` onto ``base`` (defaults when omitted)."""
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)} - {"weights"}
        wkeys = {f.name for f in dataclasses.fields(LossWeights)}
        changes, wchanges = {}, {}
        for k, v in flat.items():
            if k in wkeys:
                wchanges[k] = float(v)
            elif k in known:
                changes[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        if wchanges:
            changes["weights"] = dataclasses.replace(base.weights, **wchanges)
        return dataclasses.replace(base, **changes)

    def hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    try:
        flat = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise ConfigError(f"config {path} must be a flat JSON object")
    return TrainConfig.from_flat(flat, base)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
