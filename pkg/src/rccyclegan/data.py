"""Dataset layout, preprocessing and the procedural rain oracle.

On-disk layout::

    root/sunny/*.png  root/light/*.png  root/medium/*.png  root/heavy/*.png
    root/pairs.csv    (sunny_file, rain_file, intensity; test role)
    root/masks/*.png  (8-bit grayscale ground-truth masks, synthetic only)

The oracle composes ``rain = clamp(background + 2 * mask, -1, 1)`` in model
space, with a single-channel mask in [0, 1] broadcast over RGB.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ValidationError
from .models import RAIN_LEVELS, RainIntensity

log = logging.getLogger(__name__)

CLASSES = ("sunny", "light", "medium", "heavy")
ROLES = ("train", "test", "validation")
CROP_W, CROP_H = 1080, 700
MASK_AMPLITUDE = 2.0
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


# --------------------------------------------------------------------------
# preprocessing


def _open_rgb(raw) -> Image.Image:
    try:
        if isinstance(raw, (str, Path)):
            with Image.open(raw) as im:
                return im.convert("RGB")
        if isinstance(raw, np.ndarray):
            arr = raw
            if arr.dtype != np.uint8:
                arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
            return Image.fromarray(arr).convert("RGB")
        if isinstance(raw, Image.Image):
            return raw.convert("RGB")
    except (OSError, ValueError, TypeError, UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    raise DecodeError(f"unsupported image input of type {type(raw).__name__}")


def preprocess(raw, target_size: int) -> torch.Tensor:
    """Decode -> center-crop to 1080x700 (when large enough) -> bilinear
    resize to ``target_size`` squared -> map [0, 255] onto [-1, 1].

    A tensor input is taken to be model-space already: only the resize is
    applied, so preprocessing a preprocessed tensor is a no-op.
    """
    if target_size <= 0 or target_size % 4:
        raise ValueError(f"target_size must be a positive multiple of 4, got {target_size}")
    if isinstance(raw, torch.Tensor):
        if raw.shape[-2:] == (target_size, target_size):
            return raw
        out = F.interpolate(raw.unsqueeze(0), size=(target_size, target_size),
                            mode="bilinear", align_corners=False)
        return out[0]
    im = _open_rgb(raw)
    w, h = im.size
    if w >= CROP_W and h >= CROP_H:
        left, top = (w - CROP_W) // 2, (h - CROP_H) // 2
        im = im.crop((left, top, left + CROP_W, top + CROP_H))
    if im.size != (target_size, target_size):
        im = im.resize((target_size, target_size), Image.BILINEAR)
    return pixel_to_model(np.asarray(im))


def pixel_to_model(arr: np.ndarray) -> torch.Tensor:
    """HWC uint8 -> CHW float32 in [-1, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    if t.dim() == 2:
        t = t.unsqueeze(-1)
    return (t / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def model_to_pixel(t: torch.Tensor) -> np.ndarray:
    """CHW model-space tensor -> HWC (or HW for one channel) uint8."""
    arr = ((t.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).cpu().numpy()
    arr = arr.transpose(1, 2, 0)
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def load_image(path, round_to: int = 4) -> torch.Tensor:
    """Decode a file at native resolution, cropping bottom/right to a
    multiple of ``round_to``."""
    im = _open_rgb(path)
    w, h = im.size
    w4, h4 = w - w % round_to, h - h % round_to
    if (w4, h4) != (w, h):
        log.warning("%s: %dx%d rounded down to %dx%d", path, w, h, w4, h4)
        im = im.crop((0, 0, w4, h4))
    return pixel_to_model(np.asarray(im))


def save_png(t: torch.Tensor, path) -> None:
    Image.fromarray(model_to_pixel(t)).save(path)


def save_mask_png(mask: torch.Tensor, path) -> None:
    """[0, 1] single-channel mask -> 8-bit grayscale PNG."""
    arr = (mask.detach()[0].clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path)


# --------------------------------------------------------------------------
# rain oracle


@dataclass(frozen=True)
class StreakParams:
    count: int = 40
    length_px: tuple[float, float] = (4.0, 12.0)
    angle_deg: tuple[float, float] = (-20.0, 20.0)
    width_px: float = 1.0
    intensity_gain: dict = field(
        default_factory=lambda: {RainIntensity.LIGHT: 0.3, RainIntensity.MEDIUM: 0.5, RainIntensity.HEAVY: 0.7}
    )
    occlusion_density: float = 2.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        gains = [self.intensity_gain[lv] for lv in RAIN_LEVELS]
        if not gains[0] < gains[1] < gains[2]:
            raise ValueError(f"intensity_gain must increase Light < Medium < Heavy, got {gains}")

    def gain(self, level: RainIntensity) -> float:
        return float(self.intensity_gain[RainIntensity(level)])


@dataclass
class PairedSample:
    sunny: torch.Tensor
    rain: torch.Tensor
    intensity: RainIntensity
    mask: torch.Tensor | None = None


def _draw_streaks(h: int, w: int, p: StreakParams, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased segments; coverage falls off linearly over one pixel
    beyond the half-width, segments combine by maximum."""
    out = np.zeros((h, w), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    for _ in range(p.count):
        length = rng.uniform(*p.length_px)
        theta = np.deg2rad(rng.uniform(*p.angle_deg))
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        brightness = rng.uniform(0.6, 1.0)
        dx, dy = np.sin(theta) * length / 2, np.cos(theta) * length / 2
        x0, y0, x1, y1 = cx - dx, cy - dy, cx + dx, cy + dy
        vx, vy = x1 - x0, y1 - y0
        t = ((xx - x0) * vx + (yy - y0) * vy) / (vx * vx + vy * vy)
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(xx - (x0 + t * vx), yy - (y0 + t * vy))
        cov = np.clip(p.width_px / 2 + 0.5 - dist, 0.0, 1.0) * brightness
        np.maximum(out, cov.astype(np.float32), out=out)
    return out


def _draw_blobs(h: int, w: int, p: StreakParams, rng: np.random.Generator) -> np.ndarray:
    """Soft round raindrop occlusions; ``occlusion_density`` is blobs per 1024 px."""
    out = np.zeros((h, w), dtype=np.float32)
    n = int(rng.poisson(p.occlusion_density * h * w / 1024.0))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    scale = max(h, w) / 64.0
    for _ in range(n):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(1.0, 3.0) * scale
        amp = rng.uniform(0.4, 0.8)
        blob = amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        np.maximum(out, blob.astype(np.float32), out=out)
    return out


def render_mask(h: int, w: int, params: StreakParams, intensity) -> torch.Tensor:
    intensity = RainIntensity(intensity)
    if intensity == RainIntensity.SUNNY:
        raise ValueError("cannot render rain for the Sunny level")
    if params.count == 0:
        return torch.zeros(1, h, w)
    streaks = _draw_streaks(h, w, params, np.random.default_rng([params.rng_seed, 0]))
    blobs = _draw_blobs(h, w, params, np.random.default_rng([params.rng_seed, 1]))
    m = np.clip(np.maximum(streaks, blobs), 0.0, 1.0) * np.float32(params.gain(intensity))
    return torch.from_numpy(m.astype(np.float32)).unsqueeze(0)


def composite(background: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.clamp(background + MASK_AMPLITUDE * mask, -1.0, 1.0)


def synthesize_rain(background: torch.Tensor, params: StreakParams, intensity) -> PairedSample:
    """Render a seeded rain mask and add it to a model-space background.

    With ``params.count == 0`` the mask is empty and the rain image equals
    the background.
    """
    intensity = RainIntensity(intensity)
    if intensity == RainIntensity.SUNNY:
        raise ValueError("synthesize_rain needs a rain level, got Sunny")
    _, h, w = background.shape
    mask = render_mask(h, w, params, intensity)
    return PairedSample(background, composite(background, mask), intensity, mask)


def procedural_background(size: int, rng: np.random.Generator) -> torch.Tensor:
    """Road-ish scene: sky/ground vertical gradient plus random rectangles
    and discs, model space."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    top, bottom = rng.uniform(0.4, 0.9, 3), rng.uniform(0.1, 0.5, 3)
    img = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
    img = img + 0.1 * rng.uniform(-1, 1, 3)[:, None, None] * xx
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.0, 1.0, 3)[:, None, None]
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(0, 0.8, 2)
            bw, bh = rng.uniform(0.1, 0.4, 2)
            sel = (xx >= x0) & (xx < x0 + bw) & (yy >= y0) & (yy < y0 + bh)
        else:
            cx, cy, r = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2)
            sel = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img = np.where(sel[None], color, img)
    img = np.clip(img, 0.0, 1.0)
    return torch.from_numpy((img * 2 - 1).astype(np.float32))


def synthetic_pairs(n: int, size: int, seed: int, params: StreakParams | None = None) -> list[PairedSample]:
    """``n`` in-memory oracle pairs cycling Light, Medium, Heavy."""
    rng = np.random.default_rng(seed)
    params = params or StreakParams(count=max(2, size // 4), length_px=(size / 16, size / 5))
    out = []
    for i in range(n):
        bg = procedural_background(size, rng)
        level = RAIN_LEVELS[i % len(RAIN_LEVELS)]
        out.append(synthesize_rain(bg, dataclasses.replace(params, rng_seed=seed * 1000 + i), level))
    return out


# --------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    root: Path
    role: str
    files: dict[str, list[Path]]
    pairs: list[tuple[Path, Path, RainIntensity]] = field(default_factory=list)
    bad_files: list[Path] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(self.files.get(c, [])) for c in CLASSES}


def _decodes(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def _list_class(d: Path, bad: list[Path]) -> list[Path]:
    good = []
    for p in sorted(d.iterdir()):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if _decodes(p):
            good.append(p)
        else:
            log.warning("undecodable image excluded: %s", p)
            bad.append(p)
    return good


def load_dataset(root, role: str = "train") -> DatasetManifest:
    """Scan a dataset root and validate it for ``role``.

    train: every class directory must exist and be non-empty.
    test: ``pairs.csv`` must exist and every listed file must decode.
    validation: ``sunny/`` must exist and be non-empty.
    """
    root = Path(root)
    if role not in ROLES:
        raise ValidationError(f"unknown role {role!r}; expected one of {ROLES}")
    if not root.is_dir():
        raise ValidationError(f"dataset root not found: {root}")
    bad: list[Path] = []
    files: dict[str, list[Path]] = {}
    for cls in CLASSES:
        d = root / cls
        if not d.is_dir():
            if role == "train" or (role == "validation" and cls == "sunny"):
                raise ValidationError(f"missing class directory: {cls}/")
            continue
        files[cls] = _list_class(d, bad)
        if not files[cls] and (role == "train" or (role == "validation" and cls == "sunny")):
            raise ValidationError(f"class directory {cls}/ has no decodable images")
    pairs = read_pairs(root) if (root / "pairs.csv").is_file() else []
    if role == "test":
        if not pairs:
            raise ValidationError(f"test role needs a non-empty {root / 'pairs.csv'}")
        for s, r, _ in pairs:
            for p in (s, r):
                if not p.is_file() or not _decodes(p):
                    raise ValidationError(f"pairing references missing or undecodable file: {p}")
    manifest = DatasetManifest(root, role, files, pairs, bad)
    log.info("dataset %s (%s): %s", root, role, manifest.counts)
    return manifest


def read_pairs(root: Path) -> list[tuple[Path, Path, RainIntensity]]:
    out = []
    with open(root / "pairs.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append((root / row["sunny_file"], root / row["rain_file"],
                        RainIntensity.parse(row["intensity"])))
    return out


def make_synthetic_dataset(n_per_class: int, size: int, seed: int, out_dir,
                           params: StreakParams | None = None) -> DatasetManifest:
    """Write a seeded NMRD-layout dataset built from the rain oracle.

    Each index i gets one procedural background, saved as ``sunny/i.png``;
    every rain class renders its mask over that same background with the
    streak count scaled by the level (1x, 2x, 3x).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if size <= 0 or size % 4:
        raise ValueError(f"size must be a positive multiple of 4, got {size}")
    params = params or StreakParams(count=max(4, size // 4), length_px=(size / 16, size / 5))
    out = Path(out_dir)
    for sub in (*CLASSES, "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_per_class):
        bg = procedural_background(size, rng)
        name = f"{i:04d}.png"
        save_png(bg, out / "sunny" / name)
        for level in RAIN_LEVELS:
            p = _replace(params, count=params.count * int(level), rng_seed=seed * 100003 + i)
            sample = synthesize_rain(bg, p, level)
            cls = level.name.lower()
            save_png(sample.rain, out / cls / name)
            save_mask_png(sample.mask, out / "masks" / f"{cls}_{name}")
            rows.append((f"sunny/{name}", f"{cls}/{name}", cls))
    with open(out / "pairs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sunny_file", "rain_file", "intensity"])
        w.writerows(rows)
    return load_dataset(out, "train")


def _replace(p: StreakParams, **kw) -> StreakParams:
    return dataclasses.replace(p, **kw)


# --------------------------------------------------------------------------
# in-memory training set


@dataclass
class TrainingSet:
    """Preprocessed tensors for unpaired training plus optional test pairs."""

    sunny: list[torch.Tensor]
    rain: list[torch.Tensor]
    rain_levels: list[RainIntensity]
    pairs: list[tuple[torch.Tensor, torch.Tensor, RainIntensity, str]] = field(default_factory=list)

    def validate(self) -> None:
        if not self.sunny:
            raise ValidationError("training set has no sunny images")
        if not self.rain:
            raise ValidationError("training set has no rain images")
        if len(self.rain) != len(self.rain_levels):
            raise ValidationError("every rain image needs an intensity level")

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, image_size: int) -> "TrainingSet":
        sunny = [preprocess(p, image_size) for p in manifest.files.get("sunny", [])]
        rain, levels = [], []
        for cls_name in CLASSES[1:]:
            for p in manifest.files.get(cls_name, []):
                rain.append(preprocess(p, image_size))
                levels.append(RainIntensity[cls_name.upper()])
        pairs = [
            (preprocess(s, image_size), preprocess(r, image_size), lv, f"{r.parent.name}_{r.name}")
            for s, r, lv in manifest.pairs
        ]
        ts = cls(sunny, rain, levels, pairs)
        ts.validate()
        return ts

    @classmethod
    def from_samples(cls, samples: list[PairedSample]) -> "TrainingSet":
        return cls(
            [s.sunny for s in samples],
            [s.rain for s in samples],
            [s.intensity for s in samples],
            [(s.sunny, s.rain, s.intensity, f"pair_{i:04d}") for i, s in enumerate(samples)],
        )
