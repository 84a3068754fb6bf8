"""Adversarial training loop with staged lr decay and discriminator suppression.

Generator side (both generators and the RMI network) shares one Adam
optimizer; both discriminators share another. The feature network is frozen.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import metrics
from .config import TrainConfig, save_config
from .data import TrainingSet, model_to_pixel
from .errors import LoadError, NumericError
from .losses import (
    LossBreakdown,
    check_finite,
    cycle_loss_from,
    discriminator_adv_loss,
    feature_identity_loss_from,
    generator_adv_loss,
    generator_side_objective,
    mask_identity_loss_from,
)
from .models import (
    RAIN_LEVELS,
    Discriminator,
    FeatureNetwork,
    Generator,
    RainIntensity,
    RmiNetwork,
    build_discriminator,
    build_feature_network,
    build_generator,
    build_rmi,
    label_plane,
    param_checksum,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CSV_COLUMNS = ["step", "epoch", "dis", "gen", "cycle", "ident_m", "ident_f", "total",
               "lr_gen", "lr_dis", "d_updated"]


def lr_at(epoch: int, base_lr: float, cfg: TrainConfig) -> float:
    """Piecewise-constant rate: full, then half from ``decay_epoch_half``,
    then a quarter from ``decay_epoch_quarter``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch >= cfg.decay_epoch_quarter:
        return base_lr / 4
    if epoch >= cfg.decay_epoch_half:
        return base_lr / 2
    return base_lr


@dataclass(frozen=True)
class UpdateDecision:
    update_generator: bool
    update_discriminator: bool


def schedule_step(step: int, cfg: TrainConfig) -> UpdateDecision:
    """Generators step every time; discriminators on multiples of the ratio."""
    if step < 1:
        raise ValueError(f"steps are 1-based, got {step}")
    return UpdateDecision(True, step % cfg.suppression_ratio == 0)


@dataclass
class Networks:
    g_r: Generator
    g_n: Generator
    d_r: Discriminator
    d_n: Discriminator
    rmi: RmiNetwork
    feat: FeatureNetwork

    trainable = ("g_r", "g_n", "d_r", "d_n", "rmi")

    def generator_params(self):
        return [*self.g_r.parameters(), *self.g_n.parameters(), *self.rmi.parameters()]

    def discriminator_params(self):
        return [*self.d_r.parameters(), *self.d_n.parameters()]

    def checksums(self) -> dict[str, str]:
        return {k: param_checksum(getattr(self, k)) for k in (*self.trainable, "feat")}


def build_networks(cfg: TrainConfig) -> Networks:
    s = cfg.seed
    return Networks(
        g_r=build_generator(cfg, s * 8 + 1),
        g_n=build_generator(cfg, s * 8 + 2),
        d_r=build_discriminator(cfg, s * 8 + 3),
        d_n=build_discriminator(cfg, s * 8 + 4),
        rmi=build_rmi(cfg, s * 8 + 5),
        feat=build_feature_network(cfg),
    )


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Holds networks, optimizers, counters and the data-order RNG."""

    def __init__(self, cfg: TrainConfig, nets: Networks | None = None):
        self.cfg = cfg
        self.nets = nets or build_networks(cfg)
        self.opt_g = torch.optim.Adam(self.nets.generator_params(), lr=cfg.lr_gen,
                                      betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(self.nets.discriminator_params(), lr=cfg.lr_dis,
                                      betas=(cfg.beta1, cfg.beta2))
        self.epoch = 0
        self.global_step = 0
        self.data_rng = torch.Generator().manual_seed(cfg.seed)
        self.history: list[dict] = []

    # -- schedule ----------------------------------------------------------

    def set_epoch_lr(self, epoch: int) -> tuple[float, float]:
        lg, ld = lr_at(epoch, self.cfg.lr_gen, self.cfg), lr_at(epoch, self.cfg.lr_dis, self.cfg)
        for group in self.opt_g.param_groups:
            group["lr"] = lg
        for group in self.opt_d.param_groups:
            group["lr"] = ld
        return lg, ld

    def epoch_batches(self, data: TrainingSet):
        """Yield (sunny, rain, levels) batches for one epoch.

        Rain images are visited in a fresh permutation; sunny images follow
        their own permutation, cycling when there are fewer of them.
        """
        n_rain, n_sunny = len(data.rain), len(data.sunny)
        rain_perm = torch.randperm(n_rain, generator=self.data_rng).tolist()
        sunny_perm = torch.randperm(n_sunny, generator=self.data_rng).tolist()
        b = self.cfg.batch
        for k in range(0, n_rain, b):
            idx = rain_perm[k:k + b]
            s_idx = [sunny_perm[(k + j) % n_sunny] for j in range(len(idx))]
            yield (
                torch.stack([data.sunny[i] for i in s_idx]),
                torch.stack([data.rain[i] for i in idx]),
                [data.rain_levels[i] for i in idx],
            )

    # -- one step ----------------------------------------------------------

    def _labels(self, levels, h, w):
        if not self.cfg.use_labels:
            return None, None
        return label_plane(levels, h, w), label_plane([RainIntensity.SUNNY] * len(levels), h, w)

    def compute_terms(self, sunny, rain, levels):
        """Forward every network and return (terms, fakes).

        Cycle masks: rain->sunny->rain reuses the mask found on the real rain
        image; sunny->rain->sunny uses the mask found on the simulated rain.
        """
        n = self.nets
        h, w = sunny.shape[-2:]
        lab_r, lab_n = self._labels(levels, h, w)
        mask_r = n.rmi(rain)
        mask_n = n.rmi(sunny)
        fake_n = n.g_n(rain, mask_r, lab_n)
        fake_r = n.g_r(sunny, mask_n, lab_r)
        rec_r = n.g_r(fake_n, mask_r, lab_r)
        mask_fr = n.rmi(fake_r)
        rec_n = n.g_n(fake_r, mask_fr, lab_n)
        terms = {
            "gen": generator_adv_loss(n.d_r(fake_r, lab_r)) + generator_adv_loss(n.d_n(fake_n, lab_n)),
            "cycle": cycle_loss_from(rain, rec_r, sunny, rec_n),
            "ident_m": mask_identity_loss_from(sunny, mask_n, fake_r, mask_fr),
            "ident_f": feature_identity_loss_from(rain, mask_r, fake_n, n.feat, self.cfg.ident_f_mode),
        }
        return terms, (fake_r, fake_n, lab_r, lab_n)

    def discriminator_loss(self, sunny, rain, fake_r, fake_n, lab_r, lab_n):
        n = self.nets
        return (
            discriminator_adv_loss(n.d_r(rain, lab_r), n.d_r(fake_r.detach(), lab_r))
            + discriminator_adv_loss(n.d_n(sunny, lab_n), n.d_n(fake_n.detach(), lab_n))
        )

    def train_step(self, sunny, rain, levels) -> LossBreakdown:
        """One optimization step; returns the breakdown before the update."""
        cfg, nets = self.cfg, self.nets
        step = self.global_step + 1
        decision = schedule_step(step, cfg)
        for k in ("g_r", "g_n", "rmi", "d_r", "d_n"):
            getattr(nets, k).train()

        _set_requires_grad(nets.d_r, False)
        _set_requires_grad(nets.d_n, False)
        terms, (fake_r, fake_n, lab_r, lab_n) = self.compute_terms(sunny, rain, levels)
        _set_requires_grad(nets.d_r, True)
        _set_requires_grad(nets.d_n, True)
        ctx = contextlib.nullcontext() if decision.update_discriminator else torch.no_grad()
        with ctx:
            terms["dis"] = self.discriminator_loss(sunny, rain, fake_r, fake_n, lab_r, lab_n)
        check_finite(terms)

        self.opt_g.zero_grad(set_to_none=True)
        generator_side_objective(terms, cfg.weights).backward()
        self.opt_g.step()
        if decision.update_discriminator:
            self.opt_d.zero_grad(set_to_none=True)
            (cfg.weights.lambda_d * terms["dis"]).backward()
            self.opt_d.step()

        self.global_step = step
        bd = LossBreakdown.from_terms({k: v.item() for k, v in terms.items()}, cfg.weights)
        self.history.append({
            "step": step,
            "epoch": self.epoch,
            **bd.as_dict(),
            "lr_gen": self.opt_g.param_groups[0]["lr"],
            "lr_dis": self.opt_d.param_groups[0]["lr"],
            "d_updated": int(decision.update_discriminator),
        })
        self.history = self.history[-max(self.cfg.history_tail, 1):]
        return bd

    # -- inference ---------------------------------------------------------

    @torch.no_grad()
    def generate_rain(self, sunny: torch.Tensor, level) -> torch.Tensor:
        return generate_rain(self.nets, self.cfg, sunny, level)

    @torch.no_grad()
    def derain(self, rain: torch.Tensor) -> torch.Tensor:
        return derain(self.nets, self.cfg, rain)

    # -- persistence -------------------------------------------------------

    def state(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "config": json.dumps(self.cfg.to_flat(), sort_keys=True),
            "config_hash": self.cfg.hash(),
            "networks": {k: getattr(self.nets, k).state_dict() for k in (*Networks.trainable, "feat")},
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": {"data": self.data_rng.get_state(), "torch": torch.get_rng_state()},
            "history": json.dumps(self.history),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.state(), path)
        return path

    @classmethod
    def from_state(cls, state: dict, cfg: TrainConfig | None = None) -> "Trainer":
        saved_cfg = TrainConfig.from_flat(json.loads(state["config"]))
        cfg = cfg or saved_cfg
        t = cls(cfg)
        for k in (*Networks.trainable, "feat"):
            getattr(t.nets, k).load_state_dict(state["networks"][k])
        t.opt_g.load_state_dict(state["opt_g"])
        t.opt_d.load_state_dict(state["opt_d"])
        t.data_rng.set_state(state["rng"]["data"])
        torch.set_rng_state(state["rng"]["torch"])
        t.epoch = state["epoch"]
        t.global_step = state["global_step"]
        t.history = json.loads(state["history"])
        return t

    @classmethod
    def load(cls, path, cfg: TrainConfig | None = None) -> "Trainer":
        return cls.from_state(load_checkpoint(path), cfg)


def save_checkpoint(state: dict, path) -> None:
    """Binary container plus a JSON sidecar manifest next to it.

    Serialized through a buffer so the bytes do not depend on the file name;
    config and history travel as JSON text so pickle memoization cannot make
    a reloaded state serialize differently.
    """
    path = Path(path)
    buf = io.BytesIO()
    torch.save(state, buf)
    path.write_bytes(buf.getvalue())
    manifest = {
        "format_version": state["format_version"],
        "epoch": state["epoch"],
        "global_step": state["global_step"],
        "seed": json.loads(state["config"])["seed"],
        "config_hash": state["config_hash"],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise LoadError(f"cannot read checkpoint {path}: {type(exc).__name__}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path} is not a format-{FORMAT_VERSION} checkpoint")
    return state


# --------------------------------------------------------------------------
# inference helpers


def _mask_and_label(nets: Networks, cfg: TrainConfig, image: torch.Tensor, level):
    x = image.unsqueeze(0) if image.dim() == 3 else image
    mask = nets.rmi(x)
    label = label_plane([level] * x.shape[0], *x.shape[-2:]) if cfg.use_labels else None
    return x, mask, label


@torch.no_grad()
def generate_rain(nets: Networks, cfg: TrainConfig, sunny: torch.Tensor, level) -> torch.Tensor:
    level = RainIntensity.parse(level)
    if level == RainIntensity.SUNNY:
        raise ValueError("the rain generator targets Light, Medium or Heavy")
    for m in (nets.g_r, nets.rmi):
        m.eval()
    x, mask, label = _mask_and_label(nets, cfg, sunny, level)
    out = nets.g_r(x, mask, label)
    return out[0] if sunny.dim() == 3 else out


@torch.no_grad()
def derain(nets: Networks, cfg: TrainConfig, rain: torch.Tensor) -> torch.Tensor:
    for m in (nets.g_n, nets.rmi):
        m.eval()
    x, mask, label = _mask_and_label(nets, cfg, rain, RainIntensity.SUNNY)
    out = nets.g_n(x, mask, label)
    return out[0] if rain.dim() == 3 else out


# --------------------------------------------------------------------------
# runs


def _save_grid(trainer: Trainer, data: TrainingSet, path: Path) -> None:
    from PIL import Image

    sunny, rain = data.sunny[0], data.rain[0]
    tiles = [sunny] + [trainer.generate_rain(sunny, lv) for lv in RAIN_LEVELS]
    tiles += [rain, trainer.derain(rain)]
    row = np.concatenate([model_to_pixel(t) for t in tiles], axis=1)
    Image.fromarray(row).save(path)


def _truncate_csv(path: Path, last_step: int) -> None:
    if not path.exists():
        return
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= last_step]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


@dataclass
class RunResult:
    trainer: Trainer
    checkpoint: Path
    loss_csv: Path
    checkpoints: list[Path] = field(default_factory=list)


def run_training(cfg: TrainConfig, dataset: TrainingSet, out_dir, resume=None,
                 max_steps: int | None = None) -> RunResult:
    """Train for ``cfg.epochs`` epochs, writing losses, checkpoints and samples.

    Output layout: ``config.json`` (effective config), ``losses.csv``,
    ``checkpoints/epoch_XXXX.pt`` (+ ``.json``), ``samples/epoch_XXXX.png``.
    ``max_steps`` stops early after that many global steps (desk runs).
    """
    dataset.validate()
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(exist_ok=True)
    save_config(cfg, out / "config.json")

    trainer = Trainer.load(resume, cfg) if resume else Trainer(cfg)
    csv_path = out / "losses.csv"
    if resume:
        _truncate_csv(csv_path, trainer.global_step)
    new_file = not csv_path.exists()
    last_ckpt: Path | None = Path(resume) if resume else None
    saved: list[Path] = []

    with open(csv_path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if new_file:
            writer.writeheader()
        try:
            while trainer.epoch < cfg.epochs:
                epoch = trainer.epoch
                trainer.set_epoch_lr(epoch)
                for sunny, rain, levels in trainer.epoch_batches(dataset):
                    try:
                        trainer.train_step(sunny, rain, levels)
                    except NumericError as exc:
                        fh.flush()
                        raise NumericError(exc.term, exc.value,
                                           str(last_ckpt) if last_ckpt else None) from exc
                    writer.writerow({k: trainer.history[-1][k] for k in CSV_COLUMNS})
                    fh.flush()
                    if max_steps is not None and trainer.global_step >= max_steps:
                        break
                trainer.epoch = epoch + 1
                done = trainer.epoch == cfg.epochs or (
                    max_steps is not None and trainer.global_step >= max_steps)
                if trainer.epoch % cfg.checkpoint_every == 0 or done:
                    last_ckpt = trainer.save(out / "checkpoints" / f"epoch_{trainer.epoch:04d}.pt")
                    saved.append(last_ckpt)
                if trainer.epoch % cfg.sample_every == 0 or done:
                    _save_grid(trainer, dataset, out / "samples" / f"epoch_{trainer.epoch:04d}.png")
                if done:
                    break
        except OSError:
            fh.flush()
            raise
    if last_ckpt is None:
        last_ckpt = trainer.save(out / "checkpoints" / f"epoch_{trainer.epoch:04d}.pt")
        saved.append(last_ckpt)
    return RunResult(trainer, last_ckpt, csv_path, saved)


# --------------------------------------------------------------------------
# ablation ladder

ABLATION_STAGES = (
    ("labels", dict(use_labels=True, activation="leakyrelu", suppression_ratio=1)),
    ("sigmoid", dict(use_labels=True, activation="sigmoid", suppression_ratio=1)),
    ("suppression", dict(use_labels=True, activation="sigmoid", suppression_ratio=3)),
)


def ablation_configs(cfg: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The cumulative ladder: +labels, +sigmoid discriminator, +3:1 suppression."""
    return [(name, cfg.replace(**changes)) for name, changes in ABLATION_STAGES]


def evaluate_generator(trainer: Trainer, data: TrainingSet) -> tuple[float, float]:
    """Mean PSNR / windowed SSIM of simulated rain against paired references."""
    if not data.pairs:
        return math.nan, math.nan
    ps, ss = [], []
    for sunny, rain, level, _ in data.pairs:
        fake = model_to_pixel(trainer.generate_rain(sunny, level)).transpose(2, 0, 1)
        ref = model_to_pixel(rain).transpose(2, 0, 1)
        ps.append(metrics.psnr(fake, ref))
        ss.append(metrics.ssim(fake, ref))
    finite = [p for p in ps if math.isfinite(p)]
    return (float(np.mean(finite)) if finite else math.inf), float(np.mean(ss))


ABLATION_COLUMNS = ["stage", "name", "use_labels", "activation", "suppression_ratio",
                    "final_total", "psnr_db", "ssim"]


def run_ablation(cfg: TrainConfig, dataset: TrainingSet, out_dir,
                 max_steps: int | None = None) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (name, stage_cfg) in enumerate(ablation_configs(cfg), start=1):
        res = run_training(stage_cfg, dataset, out / f"stage{i}_{name}", max_steps=max_steps)
        p, s = evaluate_generator(res.trainer, dataset)
        rows.append({
            "stage": i,
            "name": name,
            "use_labels": int(stage_cfg.use_labels),
            "activation": stage_cfg.activation,
            "suppression_ratio": stage_cfg.suppression_ratio,
            "final_total": res.trainer.history[-1]["total"],
            "psnr_db": p,
            "ssim": s,
        })
        log.info("ablation stage %d (%s): psnr %.3f ssim %.4f", i, name, p, s)
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows

