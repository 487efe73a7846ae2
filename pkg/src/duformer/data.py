"""Synthetic aerial power-line scenes, sample files, manifests and batching.

Randomness: every sample draws from its own numpy ``PCG64`` stream seeded
with ``SeedSequence([seed, index])``.  Only ``Generator.random``,
``integers`` and ``uniform`` are used, which numpy keeps stream-stable, so a
(config, seed) pair reproduces the same corpus bytes on any machine.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import netpbm
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: tuple[int, int] = (64, 64)
    lines_per_image: tuple[int, int] = (1, 2)
    line_thickness_px: tuple[int, int] = (1, 2)
    contrast: tuple[float, float] = (0.25, 0.5)
    clutter_count: tuple[int, int] = (2, 6)
    clutter_size: tuple[int, int] = (3, 14)
    noise_sigma: float = 0.02
    seed: int = 0
    max_foreground: float = 0.10
    supersample: int = 4

    def __post_init__(self):
        for name in ("image_size", "lines_per_image", "line_thickness_px", "clutter_count", "clutter_size"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "contrast", tuple(float(v) for v in self.contrast))
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        for name in ("lines_per_image", "line_thickness_px", "clutter_count", "clutter_size"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be an ordered non-negative range, got {(lo, hi)}")
        if self.line_thickness_px[0] < 1:
            raise ValueError("line thickness must be at least 1 px")
        if self.line_thickness_px[1] > min(h, w):
            raise ValueError("line thickness exceeds the image extent")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "lines_per_image": list(self.lines_per_image),
            "line_thickness_px": list(self.line_thickness_px),
            "contrast": list(self.contrast),
            "clutter_count": list(self.clutter_count),
            "clutter_size": list(self.clutter_size),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "max_foreground": self.max_foreground,
            "supersample": self.supersample,
        }


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    split: str = "train"
    # analytic lines used for rendering: (x0, y0, x1, y1, thickness)
    segments: list[tuple[float, float, float, float, float]] = field(default_factory=list)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 5) -> np.ndarray:
    coarse = rng.random((cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    rows = np.stack([np.interp(xs, np.arange(cells), coarse[i]) for i in range(cells)])
    return np.stack([np.interp(ys, np.arange(cells), rows[:, j]) for j in range(w)], axis=1)


def _clip_line(cx, cy, theta, w, h):
    """Endpoints where the infinite line through (cx, cy) at ``theta`` leaves the frame."""
    dx, dy = math.cos(theta), math.sin(theta)
    ts = []
    for lo, hi, c, d in ((0.0, w, cx, dx), (0.0, h, cy, dy)):
        if abs(d) < 1e-12:
            continue
        ts.extend(((lo - c) / d, (hi - c) / d))
    ts.sort()
    # the two middle crossings bound the in-frame part
    t0, t1 = ts[len(ts) // 2 - 1], ts[len(ts) // 2]
    return cx + t0 * dx, cy + t0 * dy, cx + t1 * dx, cy + t1 * dy


def segment_distance(px: np.ndarray, py: np.ndarray, seg) -> np.ndarray:
    x0, y0, x1, y1 = seg[:4]
    vx, vy = x1 - x0, y1 - y0
    length2 = vx * vx + vy * vy
    if length2 == 0:
        return np.hypot(px - x0, py - y0)
    t = np.clip(((px - x0) * vx + (py - y0) * vy) / length2, 0.0, 1.0)
    return np.hypot(px - (x0 + t * vx), py - (y0 + t * vy))


def line_coverage(seg, h: int, w: int, supersample: int) -> np.ndarray:
    """Fraction of each pixel's sub-samples within ``thickness / 2`` of the segment."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    inside = segment_distance(xs[None, :], ys[:, None], seg) <= seg[4] / 2.0
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _render(cfg: GeneratorConfig, rng: np.random.Generator):
    h, w = cfg.image_size
    base = rng.uniform(0.25, 0.75, size=3)
    img = base[None, None, :] + 0.25 * (_smooth_field(rng, h, w)[..., None] - 0.5)
    img = img + 0.08 * (rng.random((h, w, 3)) - 0.5) * _smooth_field(rng, h, w)[..., None]

    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(int(rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(cfg.clutter_size[0], cfg.clutter_size[1] + 1, size=2) / 2
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        alpha = rng.uniform(0.4, 0.9)
        img[region] = (1 - alpha) * img[region] + alpha * color

    mask = np.zeros((h, w), dtype=bool)
    segments = []
    for _ in range(int(rng.integers(cfg.lines_per_image[0], cfg.lines_per_image[1] + 1))):
        thickness = float(rng.integers(cfg.line_thickness_px[0], cfg.line_thickness_px[1] + 1))
        theta = rng.uniform(0.0, math.pi)
        cx, cy = rng.uniform(0.15 * w, 0.85 * w), rng.uniform(0.15 * h, 0.85 * h)
        seg = (*_clip_line(cx, cy, theta, w, h), thickness)
        cov = line_coverage(seg, h, w, cfg.supersample)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        contrast = rng.uniform(*cfg.contrast)
        shade = rng.uniform(0.8, 1.0, size=3)
        target = np.clip(img.mean(axis=2, keepdims=True) + sign * contrast * shade, 0.0, 1.0)
        img = img * (1 - cov[..., None]) + target * cov[..., None]
        mask |= cov >= 0.5
        segments.append(tuple(float(v) for v in seg))

    img = img + cfg.noise_sigma * (rng.random((h, w, 3)) - 0.5) * math.sqrt(12.0)
    image = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image, mask.astype(np.uint8), segments


def generate_sample(cfg: GeneratorConfig, index: int, max_attempts: int = 100) -> SampleRecord:
    """Render sample ``index``; resamples until the foreground fraction is below the cap."""
    rng = sample_rng(cfg.seed, index)
    for _ in range(max_attempts):
        image, mask, segments = _render(cfg, rng)
        if mask.mean() < cfg.max_foreground:
            return SampleRecord(image, mask, f"s{index:05d}", segments=segments)
    raise ValueError(
        f"could not keep foreground below {cfg.max_foreground:.0%} in {max_attempts} attempts"
    )


# -- files ---------------------------------------------------------------------


def write_sample(sample: SampleRecord, directory: str | os.PathLike) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    image_path, mask_path = d / f"{sample.id}.ppm", d / f"{sample.id}.pgm"
    netpbm.write(image_path, sample.image)
    netpbm.write(mask_path, (sample.mask * 255).astype(np.uint8))
    return image_path, mask_path


def read_sample(image_path, mask_path, sample_id: Optional[str] = None, split: str = "train") -> SampleRecord:
    image = netpbm.read(image_path)
    mask = netpbm.read(mask_path)
    if image.ndim != 3:
        raise ValueError(f"{image_path} is not a P6 image")
    if mask.ndim != 2:
        raise ValueError(f"{mask_path} is not a P5 mask")
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} extents differ")
    if not np.isin(mask, (0, 255)).all():
        raise ValueError(f"{mask_path} holds values other than 0 and 255")
    sid = sample_id if sample_id is not None else Path(image_path).stem
    return SampleRecord(image, (mask // 255).astype(np.uint8), sid, split)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    split: str


def _id_rank(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode("utf-8")).hexdigest()


def assign_splits(ids: Sequence[str], split_ratio: float) -> dict[str, str]:
    """Hash-ranked split: the ``round(ratio * n)`` ids with the smallest digests train."""
    if not 0.0 <= split_ratio <= 1.0:
        raise ValueError("split_ratio must lie in [0, 1]")
    ranked = sorted(ids, key=lambda i: (_id_rank(i), i))
    n_train = int(round(split_ratio * len(ranked)))
    return {sid: ("train" if k < n_train else "val") for k, sid in enumerate(ranked)}


def format_manifest(entries: Iterable[ManifestEntry]) -> str:
    return "".join(f"{e.id}\t{e.image_path}\t{e.mask_path}\t{e.split}\n" for e in entries)


def parse_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4 or fields[3] not in ("train", "val"):
            raise ValueError(f"{path}:{lineno}: expected id, image, mask, train|val")
        entries.append(ManifestEntry(*fields))
    return entries


def build_manifest(directory: str | os.PathLike, split_ratio: float = 0.8, name: str = "manifest.tsv") -> Path:
    """Pair ``<id>.ppm`` with ``<id>.pgm`` in ``directory`` and write a TSV manifest."""
    d = Path(directory)
    images = {p.stem for p in d.glob("*.ppm")}
    masks = {p.stem for p in d.glob("*.pgm")}
    orphans = sorted(f"{i}.ppm" for i in images - masks) + sorted(f"{m}.pgm" for m in masks - images)
    if orphans:
        raise ValueError(f"unpaired files: {', '.join(orphans)}")
    ids = sorted(images)
    splits = assign_splits(ids, split_ratio)
    entries = [ManifestEntry(i, f"{i}.ppm", f"{i}.pgm", splits[i]) for i in ids]
    out = d / name
    out.write_text(format_manifest(entries))
    return out


def load_split(manifest: str | os.PathLike, split: Optional[str]) -> list[SampleRecord]:
    """Read every sample of ``split`` (``None`` for all) from a manifest."""
    root = Path(manifest).parent
    out = []
    for e in parse_manifest(manifest):
        if split is None or e.split == split:
            out.append(read_sample(root / e.image_path, root / e.mask_path, e.id, e.split))
    return out


def generate_corpus(
    cfg: GeneratorConfig, out_dir: str | os.PathLike, count: int, split_ratio: float = 0.8
) -> dict:
    """Write ``count`` samples plus a manifest; return foreground-fraction statistics."""
    fractions = []
    for i in range(count):
        s = generate_sample(cfg, i)
        write_sample(s, out_dir)
        fractions.append(float(s.mask.mean()))
    manifest = build_manifest(out_dir, split_ratio)
    fr = np.array(fractions) if fractions else np.zeros(1)
    return {
        "count": count,
        "manifest": str(manifest),
        "foreground_mean": float(fr.mean()),
        "foreground_p99": float(np.percentile(fr, 99)),
        "foreground_max": float(fr.max()),
    }


# -- model plumbing ---------------------------------------------------------------


def images_to_tensor(images: Sequence[np.ndarray], dtype=np.float32) -> Tensor:
    """Stack (H, W, 3) uint8 images into a [N, 3, H, W] tensor scaled to [-1, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(dtype)
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2) / 127.5 - 1.0, dtype=dtype))


def pad_to_multiple(images: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Symmetric zero padding of [N, C, H, W] up to multiples of ``multiple``."""
    h, w = images.shape[2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    top, left = ph // 2, pw // 2
    padded = np.pad(images, ((0, 0), (0, 0), (top, ph - top), (left, pw - left)))
    return padded, (top, left)


def predict_proba(model, images: Sequence[np.ndarray], batch_size: int = 4) -> list[np.ndarray]:
    """Foreground probability per image, padding any extent the model cannot take."""
    out: list[np.ndarray] = []
    m = model.config.max_downsample
    dtype = model.store.dtype
    runs: list[list[np.ndarray]] = []
    for im in images:
        if runs and runs[-1][0].shape == im.shape and len(runs[-1]) < batch_size:
            runs[-1].append(im)
        else:
            runs.append([im])
    for run in runs:
        x = images_to_tensor(run, dtype).data
        h, w = x.shape[2:]
        padded, (top, left) = pad_to_multiple(x, m)
        prob = model.predict_proba(Tensor(padded))
        out.extend(prob[:, top : top + h, left : left + w])
    return out


def predict_masks(model, images: Sequence[np.ndarray], batch_size: int = 4) -> list[np.ndarray]:
    """Argmax masks (H, W) in {0, 1}: foreground where its logit strictly wins."""
    return [(p > 0.5).astype(np.uint8) for p in predict_proba(model, images, batch_size)]
