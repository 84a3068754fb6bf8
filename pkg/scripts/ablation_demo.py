"""Run the three-stage ablation ladder on a freshly synthesized dataset.

    python scripts/ablation_demo.py --n 4 --steps 60 --out runs/ablation
"""

import argparse
from pathlib import Path

from rccyclegan.config import load_config
from rccyclegan.data import TrainingSet, load_dataset, make_synthetic_dataset
from rccyclegan.trainer import run_ablation

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    ap.add_argument("--n", type=int, default=4, help="images per class")
    ap.add_argument("--steps", type=int, default=60, help="training steps per stage")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()

    cfg = load_config(args.config).replace(seed=args.seed)
    make_synthetic_dataset(args.n, cfg.image_size, args.seed, args.out / "data")
    data = TrainingSet.from_manifest(load_dataset(args.out / "data", "train"), cfg.image_size)
    rows = run_ablation(cfg, data, args.out, max_steps=args.steps)
    print(f"{'stage':<6}{'name':<13}{'labels':<8}{'act':<11}{'ratio':<7}{'total':>9}{'psnr':>9}{'ssim':>8}")
    for r in rows:
        print(f"{r['stage']:<6}{r['name']:<13}{r['use_labels']:<8}{r['activation']:<11}"
              f"{r['suppression_ratio']:<7}{r['final_total']:>9.3f}{r['psnr_db']:>9.3f}{r['ssim']:>8.4f}")


if __name__ == "__main__":
    main()
