"""Networks: conditional generators, multi-scale patch discriminators, the
recurrent rain-mask identification (RMI) network and a frozen feature net.

All forwards take channel-major tensors either batched ``(N, C, H, W)`` or
single ``(C, H, W)``; single inputs come back single. Images live in model
space [-1, 1]; masks and label planes have one channel.
"""

from __future__ import annotations

import enum
import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ACTIVATIONS, TrainConfig
from .errors import ConfigError, LoadError, ShapeError


class RainIntensity(enum.IntEnum):
    SUNNY = 0
    LIGHT = 1
    MEDIUM = 2
    HEAVY = 3

    @classmethod
    def parse(cls, name: "str | int | RainIntensity") -> "RainIntensity":
        if isinstance(name, str):
            try:
                return cls[name.upper()]
            except KeyError:
                raise ValueError(f"unknown rain intensity {name!r}") from None
        return cls(int(name))

    @property
    def encoded(self) -> float:
        return encode_level(self)


RAIN_LEVELS = (RainIntensity.LIGHT, RainIntensity.MEDIUM, RainIntensity.HEAVY)


def encode_level(level) -> float:
    """Map a rain level onto {0, 1/3, 2/3, 1}."""
    return int(level) / 3.0


def label_plane(levels, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Constant 1-channel conditioning planes, shape ``(N, 1, H, W)``.

    ``levels`` is a single level or a sequence with one level per batch item.
    """
    if isinstance(levels, (int, RainIntensity)):
        levels = [levels]
    values = torch.tensor([encode_level(lv) for lv in levels], dtype=dtype)
    return values.view(-1, 1, 1, 1).expand(-1, 1, height, width).contiguous()


def _batched(t: torch.Tensor, name: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ShapeError(f"{name} must be (C,H,W) or (N,C,H,W), got {tuple(t.shape)}")


def _check_spatial(ref: torch.Tensor, other: torch.Tensor, name: str) -> None:
    if other.shape[0] != ref.shape[0] or other.shape[-2:] != ref.shape[-2:]:
        raise ShapeError(
            f"{name} shape {tuple(other.shape)} does not match image {tuple(ref.shape)}"
        )


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for key, t in module.state_dict().items():
        h.update(key.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# generator


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Encoder (7x7 conv + two stride-2 convs), ten-conv transformer as five
    residual blocks, decoder (two stride-2 upsamplings + 7x7 conv, tanh).

    The first encoder conv is not normalized: the label plane is spatially
    constant, and instance norm directly after it would subtract the label's
    contribution away.
    """

    def __init__(self, in_channels: int = 5, ngf: int = 64, n_res_blocks: int = 5):
        super().__init__()
        self.in_channels = in_channels
        self.use_labels = in_channels == 5
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, ngf, 7),
            nn.ReLU(inplace=True),
            nn.Conv2d(ngf, ngf * 2, 3, stride=2, padding=1),
            nn.InstanceNorm2d(ngf * 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(ngf * 2, ngf * 4, 3, stride=2, padding=1),
            nn.InstanceNorm2d(ngf * 4),
            nn.ReLU(inplace=True),
        )
        self.transformer = nn.Sequential(*[ResidualBlock(ngf * 4) for _ in range(n_res_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(ngf * 4, ngf * 2, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(ngf * 2),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(ngf * 2, ngf, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(ngf),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(3),
            nn.Conv2d(ngf, 3, 7),
            nn.Tanh(),
        )

    def forward(self, image: torch.Tensor, mask: torch.Tensor, label: torch.Tensor | None = None):
        x, single = _batched(image, "image")
        m, _ = _batched(mask, "mask")
        if x.shape[1] != 3 or m.shape[1] != 1:
            raise ShapeError(f"expected 3-channel image and 1-channel mask, got {x.shape[1]} and {m.shape[1]}")
        _check_spatial(x, m, "mask")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"spatial dims must be multiples of 4, got {h}x{w}")
        parts = [x, m]
        if self.use_labels:
            if label is None:
                raise ShapeError("label plane required by a label-conditioned generator")
            lab, _ = _batched(label, "label")
            if lab.shape[1] != 1:
                raise ShapeError("label plane must have one channel")
            _check_spatial(x, lab, "label")
            parts.append(lab)
        out = self.decoder(self.transformer(self.encoder(torch.cat(parts, dim=1))))
        return out[0] if single else out


def build_generator(config: TrainConfig, seed: int) -> Generator:
    if config.image_size <= 0 or config.image_size % 4:
        raise ConfigError(f"image_size must be a positive multiple of 4, got {config.image_size}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config.image_channels_in, config.ngf, config.n_res_blocks)


def generator_forward(g: Generator, image, mask, label=None) -> torch.Tensor:
    return g(image, mask, label)


# --------------------------------------------------------------------------
# discriminator


def _activation(name: str) -> nn.Module:
    if name == "sigmoid":
        return nn.Sigmoid()
    if name == "leakyrelu":
        return nn.LeakyReLU(0.2, inplace=True)
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


class PatchBranch(nn.Module):
    """Four stride-2 convs then a 3x3 conv to a one-channel patch map.

    Stride-2 convs use k=3, p=1 so each halves with ceiling; a 1x1 input stays
    1x1 and small training images still yield a map at the coarsest scale.
    No normalization: the coarsest maps can be 1x1.
    """

    def __init__(self, in_channels: int, ndf: int, activation: str):
        super().__init__()
        layers, ch = [], in_channels
        for k in range(4):
            out = ndf * 2**k
            layers += [nn.Conv2d(ch, out, 3, stride=2, padding=1), _activation(activation)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        if activation == "sigmoid":
            layers.append(nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Discriminator(nn.Module):
    """Three independent patch branches fed by 1x, 2x and 4x average-pooled input."""

    n_scales = 3

    def __init__(self, in_channels: int = 4, ndf: int = 64, activation: str = "sigmoid"):
        super().__init__()
        _activation(activation)
        self.in_channels = in_channels
        self.use_labels = in_channels == 4
        self.activation = activation
        self.branches = nn.ModuleList(
            PatchBranch(in_channels, ndf, activation) for _ in range(self.n_scales)
        )

    def scale_inputs(self, image: torch.Tensor, label: torch.Tensor | None = None) -> list[torch.Tensor]:
        x, _ = _batched(image, "image")
        if x.shape[1] != 3:
            raise ShapeError(f"expected a 3-channel image, got {x.shape[1]}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"spatial dims must be multiples of 4, got {tuple(x.shape[-2:])}")
        if self.use_labels:
            if label is None:
                raise ShapeError("label plane required by a label-conditioned discriminator")
            lab, _ = _batched(label, "label")
            _check_spatial(x, lab, "label")
            x = torch.cat([x, lab], dim=1)
        inputs = [x]
        for _ in range(self.n_scales - 1):
            inputs.append(F.avg_pool2d(inputs[-1], 2))
        return inputs

    def forward(self, image: torch.Tensor, label: torch.Tensor | None = None) -> list[torch.Tensor]:
        single = image.dim() == 3
        maps = [branch(x) for branch, x in zip(self.branches, self.scale_inputs(image, label))]
        return [m[0] for m in maps] if single else maps


def build_discriminator(config: TrainConfig, seed: int) -> Discriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(4 if config.use_labels else 3, config.ndf, config.activation)


def discriminator_forward(d: Discriminator, image, label=None) -> list[torch.Tensor]:
    return d(image, label)


# --------------------------------------------------------------------------
# rain mask identification


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, 3, padding=1)

    def forward(self, x, state):
        h, c = state
        i, f, o, g = torch.chunk(self.gates(torch.cat([x, h], dim=1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class RmiModule(nn.Module):
    """One RMI step: (image, previous mask) -> residual conv features ->
    ConvLSTM update -> sigmoid mask."""

    def __init__(self, channels: int):
        super().__init__()
        self.inp = nn.Sequential(nn.Conv2d(4, channels, 3, padding=1), nn.ReLU())
        self.res = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.cell = ConvLSTMCell(channels, channels)
        self.head = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, image, mask, state):
        x = self.inp(torch.cat([image, mask], dim=1))
        x = F.relu(x + self.res(x))
        h, c = self.cell(x, state)
        return torch.sigmoid(self.head(h)), (h, c)


class RmiNetwork(nn.Module):
    def __init__(self, n_rmi: int = 6, channels: int = 32):
        super().__init__()
        self.channels = channels
        self.stages = nn.ModuleList(RmiModule(channels) for _ in range(n_rmi))
        self.steps_run = 0

    def forward(self, image: torch.Tensor, return_all: bool = False):
        x, single = _batched(image, "image")
        if x.shape[1] != 3:
            raise ShapeError(f"expected a 3-channel image, got {x.shape[1]}")
        n, _, h, w = x.shape
        mask = x.new_zeros(n, 1, h, w)
        state = (x.new_zeros(n, self.channels, h, w), x.new_zeros(n, self.channels, h, w))
        masks = []
        self.steps_run = 0
        for stage in self.stages:
            mask, state = stage(x, mask, state)
            masks.append(mask)
            self.steps_run += 1
        if single:
            masks = [m[0] for m in masks]
        return masks if return_all else masks[-1]


def build_rmi(config: TrainConfig, seed: int) -> RmiNetwork:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RmiNetwork(config.n_rmi, config.rmi_channels)


def rmi_forward(rmi: RmiNetwork, image) -> torch.Tensor:
    return rmi(image)


# --------------------------------------------------------------------------
# frozen feature network

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureNetwork(nn.Module):
    """Frozen convolutional feature extractor.

    With ``weights`` it is VGG16 up to relu3_3 loaded from a state-dict file
    (plain ``features`` keys or a full VGG16 dict); otherwise a fixed-seed
    random conv stack of the same pooling depth stands in.
    """

    def __init__(self, weights: str | Path | None = None, seed: int = 1234):
        super().__init__()
        self.pretrained = weights is not None
        if self.pretrained:
            path = Path(weights)
            if not path.is_file():
                raise LoadError(f"feature weights not found: {path}")
            from torchvision.models import vgg16

            self.body = vgg16().features[:16]
            try:
                state = torch.load(path, map_location="cpu", weights_only=True)
                state = {k.removeprefix("features."): v for k, v in state.items()}
                state = {k: v for k, v in state.items() if k in self.body.state_dict()}
                self.body.load_state_dict(state, strict=True)
            except Exception as exc:
                raise LoadError(f"cannot load feature weights {path}: {exc}") from exc
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                self.body = nn.Sequential(
                    nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(),
                    nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
                    nn.AvgPool2d(2),
                    nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(),
                    nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(),
                    nn.AvgPool2d(2),
                )
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x, single = _batched(image, "image")
        if self.pretrained:
            x = ((x + 1) / 2 - self.mean) / self.std
        out = self.body(x)
        return out[0] if single else out


def build_feature_network(config: TrainConfig, seed: int = 1234) -> FeatureNetwork:
    return FeatureNetwork(config.feature_weights, seed)


def feature_forward(f: FeatureNetwork, image) -> torch.Tensor:
    return f(image)
