"""Command-line entry point.

Exit codes: 0 success, 1 partial result (skipped pairs), 2 validation or
usage error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .config import TrainConfig, load_config
from .data import (
    IMAGE_SUFFIXES,
    TrainingSet,
    load_dataset,
    load_image,
    make_synthetic_dataset,
    save_png,
)
from .errors import ConfigError, DecodeError, LoadError, NumericError, ValidationError
from .metrics import evaluate_pairs
from .trainer import Trainer, derain, generate_rain, run_ablation, run_training

log = logging.getLogger("rccyclegan")

EXIT_OK, EXIT_PARTIAL, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--data", type=Path, help="dataset root (NMRD layout)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--no-labels", action="store_const", const=False, dest="use_labels")
    p.add_argument("--activation", choices=["sigmoid", "leakyrelu"])
    p.add_argument("--suppression-ratio", type=int, dest="suppression_ratio")
    p.add_argument("--max-steps", type=int, dest="max_steps",
                   help="stop after this many steps (desk-scale runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rccyclegan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("generate", help="sunny -> rain at a chosen intensity")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory")
    p.add_argument("--intensity", choices=["light", "medium", "heavy"], required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("derain", help="rain -> sunny")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="PSNR/SSIM over same-named image pairs")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out", type=Path, help="CSV report path")

    p = sub.add_parser("synth", help="write a synthetic NMRD-layout dataset")
    p.add_argument("--n", type=int, default=4, help="images per class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="run the three-stage ablation ladder")
    _add_train_flags(p)
    return parser


OVERRIDE_KEYS = ("seed", "epochs", "image_size", "use_labels", "activation", "suppression_ratio")


def effective_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults < base (e.g. a checkpoint) < config file < flags."""
    cfg = base or TrainConfig()
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    flags = {k: getattr(args, k) for k in OVERRIDE_KEYS if getattr(args, k, None) is not None}
    return TrainConfig.from_flat(flags, cfg) if flags else cfg


def _training_set(data: Path | None, cfg: TrainConfig) -> TrainingSet:
    if data is None:
        raise ValidationError("--data is required")
    return TrainingSet.from_manifest(load_dataset(data, "train"), cfg.image_size)


def cmd_train(args) -> int:
    base = None
    if args.resume is not None:
        base = Trainer.load(args.resume).cfg
    cfg = effective_config(args, base)
    data = _training_set(args.data, cfg)
    res = run_training(cfg, data, args.out, resume=args.resume, max_steps=args.max_steps)
    last = res.trainer.history[-1] if res.trainer.history else None
    print(f"trained to epoch {res.trainer.epoch}, step {res.trainer.global_step}; "
          f"checkpoint {res.checkpoint}")
    if last:
        print(f"last total loss {last['total']:.6f}")
    return EXIT_OK


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = [p for p in sorted(path.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    elif path.is_file():
        files = [path]
    else:
        raise ValidationError(f"input not found: {path}")
    if not files:
        raise ValidationError(f"no images under {path}")
    return files


def _translate(args, fn, suffix: str) -> int:
    trainer = Trainer.load(args.checkpoint)
    images = [(p, load_image(p)) for p in _inputs(args.input)]
    outputs = [(p, fn(trainer, img)) for p, img in images]
    args.out.mkdir(parents=True, exist_ok=True)
    for p, out in outputs:
        dest = args.out / f"{p.stem}_{suffix}.png"
        save_png(out, dest)
        print(dest)
    return EXIT_OK


def cmd_generate(args) -> int:
    return _translate(args, lambda t, x: generate_rain(t.nets, t.cfg, x, args.intensity), args.intensity)


def cmd_derain(args) -> int:
    return _translate(args, lambda t, x: derain(t.nets, t.cfg, x), "derained")


def cmd_evaluate(args) -> int:
    for d in (args.generated, args.reference):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    report = evaluate_pairs(args.generated, args.reference, args.out)
    if not report.pairs:
        print("no matched image pairs", file=sys.stderr)
        return EXIT_INVALID
    p = report.mean_psnr
    print(f"pairs: {len(report.pairs)}")
    print(f"mean PSNR: {'inf' if math.isinf(p) else f'{p:.4f}'} dB")
    print(f"mean SSIM: {report.mean_ssim:.6f}")
    if report.skipped:
        print("skipped: " + ", ".join(report.skipped), file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_synth(args) -> int:
    m = make_synthetic_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {args.out}: {m.counts}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    data = _training_set(args.data, cfg)
    rows = run_ablation(cfg, data, args.out, max_steps=args.max_steps)
    for r in rows:
        print(f"stage {r['stage']} {r['name']:<12} psnr {r['psnr_db']:.3f} dB  ssim {r['ssim']:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "derain": cmd_derain,
    "evaluate": cmd_evaluate,
    "synth": cmd_synth,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValidationError, DecodeError, LoadError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
