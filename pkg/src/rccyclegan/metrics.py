"""Full-reference image quality: MSE, PSNR and SSIM on pixel-space arrays.

Arrays are ``(C, H, W)`` or ``(H, W)`` with values in [0, 255]. Identical
images have PSNR ``math.inf``; the CSV writes it as ``"inf"``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

K1, K2 = 0.01, 0.03
DATA_RANGE = 255.0
C1 = (K1 * DATA_RANGE) ** 2
C2 = (K2 * DATA_RANGE) ** 2
LUMA_BT601 = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _as_float(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Per-channel mean over all r*c pixels, then the channel mean."""
    a, b = _pair(a, b)
    d2 = (a - b) ** 2
    if d2.ndim == 2:
        return float(d2.mean())
    return float(d2.reshape(d2.shape[0], -1).mean(axis=1).mean())


def psnr(g, o, bit_depth: int = 8) -> float:
    err = mse(g, o)
    if err == 0:
        return math.inf
    return 10.0 * math.log10((2**bit_depth - 1) ** 2 / err)


def to_luma(img: np.ndarray) -> np.ndarray:
    img = _as_float(img)
    if img.ndim == 2:
        return img
    if img.shape[0] == 1:
        return img[0]
    if img.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {img.shape[0]}")
    r, g, b = LUMA_BT601
    return r * img[0] + g * img[1] + b * img[2]


def _ssim_stats(mu_x, mu_y, xx, yy, xy):
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * cov + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (var_x + var_y + C2)
    return num / den


def ssim_global(x: np.ndarray, y: np.ndarray) -> float:
    """The SSIM formula evaluated once over whole 2-D images."""
    return float(_ssim_stats(x.mean(), y.mean(), (x * x).mean(), (y * y).mean(), (x * y).mean()))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_windowed(x: np.ndarray, y: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over every valid ``size``x``size`` Gaussian-weighted window.

    Images smaller than the window shrink it to the largest odd size that fits.
    """
    size = min(size, x.shape[0], x.shape[1])
    if size % 2 == 0:
        size -= 1
    w = gaussian_window(size, sigma)

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (size, size)), w)

    smap = _ssim_stats(filt(x), filt(y), filt(x * x), filt(y * y), filt(x * y))
    return float(smap.mean())


def ssim(x, y, mode: str = "windowed", color: str = "luma") -> float:
    """SSIM with K1=0.01, K2=0.03, L=255.

    ``color="luma"`` converts RGB with BT.601 weights first; ``"mean"``
    averages per-channel SSIM.
    """
    x, y = _pair(x, y)
    if mode not in ("global", "windowed"):
        raise ValueError(f"unknown SSIM mode {mode!r}")
    fn = ssim_global if mode == "global" else ssim_windowed
    if color == "luma":
        value = fn(to_luma(x), to_luma(y))
    elif color == "mean":
        if x.ndim == 2:
            value = fn(x, y)
        else:
            value = float(np.mean([fn(xc, yc) for xc, yc in zip(x, y)]))
    else:
        raise ValueError(f"unknown color handling {color!r}")
    return float(np.clip(value, -1.0, 1.0))


# --------------------------------------------------------------------------
# paired directory evaluation


@dataclass
class PairResult:
    pair_id: str
    psnr_db: float
    ssim: float


@dataclass
class MetricReport:
    pairs: list[PairResult] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [p.psnr_db for p in self.pairs]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_ssim(self) -> float:
        vals = [p.ssim for p in self.pairs]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def min_psnr(self) -> float:
        return min((p.psnr_db for p in self.pairs), default=math.nan)

    @property
    def max_psnr(self) -> float:
        return max((p.psnr_db for p in self.pairs), default=math.nan)

    @property
    def min_ssim(self) -> float:
        return min((p.ssim for p in self.pairs), default=math.nan)

    @property
    def max_ssim(self) -> float:
        return max((p.ssim for p in self.pairs), default=math.nan)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "psnr_db", "ssim"])
            for p in self.pairs:
                w.writerow([p.pair_id, _fmt_db(p.psnr_db), repr(p.ssim)])
            w.writerow(["aggregate", _fmt_db(self.mean_psnr), repr(self.mean_ssim)])


def _fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else repr(v)


def read_rgb(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)


def _image_files(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_pairs(gen_dir, ref_dir, out_csv=None, ssim_mode: str = "windowed") -> MetricReport:
    """PSNR/SSIM for every same-named file present in both directories.

    Names present on only one side land in ``report.skipped``.
    """
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    gen, ref = _image_files(gen_dir), _image_files(ref_dir)
    report = MetricReport()
    for name in sorted(set(gen) | set(ref)):
        if name not in gen or name not in ref:
            report.skipped.append(name)
            log.warning("no counterpart for %s; skipped", name)
            continue
        g, r = read_rgb(gen[name]), read_rgb(ref[name])
        if g.shape != r.shape:
            report.skipped.append(name)
            log.warning("resolution mismatch for %s; skipped", name)
            continue
        report.pairs.append(PairResult(name, psnr(g, r), ssim(g, r, mode=ssim_mode)))
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
