"""Two-domain image datasets: on-disk ingestion, a synthetic shapes benchmark, batching.

Pixels are kept as uint8 RGB and normalized on demand with the ImageNet
constants below: ``(value / 255 - MEAN) / STD`` per channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CategoryMismatch, EmptyClassError, EmptyDomain, SampleDecodeError

PIXEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
PIXEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
SOURCE, TARGET = "source", "target"

SHAPE_FAMILIES = ("circle", "square", "triangle", "cross", "flower", "ring", "diamond", "bars")


def normalize(rgb: np.ndarray) -> np.ndarray:
    """uint8 (..., S, S, 3) -> float32 (..., 3, S, S)."""
    x = (rgb.astype(np.float32) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    return np.moveaxis(x, -1, -3).copy()


def denormalize(pixels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded back to uint8."""
    x = np.moveaxis(pixels, -3, -1) * PIXEL_STD + PIXEL_MEAN
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class ImageSample:
    """One image. Target samples never expose a label through ``label``;
    a known target label is held out and only reachable via
    :meth:`DomainPair.eval_target_labels`.
    """

    id: str
    rgb: np.ndarray
    label: int | None
    domain: str
    mask: np.ndarray | None = None
    heldout_label: int | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == SOURCE and self.label is None:
            raise ValueError(f"source sample {self.id} has no label")
        if self.domain == TARGET and self.label is not None:
            raise ValueError("target labels must be passed as heldout_label")
        if self.rgb.dtype != np.uint8 or self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"sample {self.id}: expected uint8 HxWx3, got {self.rgb.dtype} {self.rgb.shape}")
        self.rgb.setflags(write=False)
        if self.mask is not None:
            self.mask.setflags(write=False)

    @property
    def size(self) -> int:
        return self.rgb.shape[0]

    @property
    def pixels(self) -> np.ndarray:
        return normalize(self.rgb)


@dataclass(frozen=True)
class DomainPair:
    source: tuple[ImageSample, ...]
    target: tuple[ImageSample, ...]
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "categories", tuple(self.categories))
        c = len(self.categories)
        if c < 1:
            raise ValueError("at least one category required")
        if len(self.source) < c:
            raise EmptyClassError(f"n_s={len(self.source)} < c={c}")
        for s in self.source:
            if s.domain != SOURCE or not 0 <= s.label < c:
                raise ValueError(f"bad source sample {s.id}")
        for s in self.target:
            if s.domain != TARGET or (s.heldout_label is not None and not 0 <= s.heldout_label < c):
                raise ValueError(f"bad target sample {s.id}")
        missing = set(range(c)) - {s.label for s in self.source}
        if missing:
            raise EmptyClassError(f"categories without source samples: {sorted(self.categories[i] for i in missing)}")
        ids = [s.id for s in self.source] + [s.id for s in self.target]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique across both domains")

    @property
    def c(self) -> int:
        return len(self.categories)

    @property
    def n_s(self) -> int:
        return len(self.source)

    @property
    def n_t(self) -> int:
        return len(self.target)

    def domain(self, name: str) -> tuple[ImageSample, ...]:
        return self.source if name == SOURCE else self.target

    def source_labels(self) -> np.ndarray:
        return np.array([s.label for s in self.source], dtype=np.int64)

    @property
    def has_target_labels(self) -> bool:
        return bool(self.target) and all(s.heldout_label is not None for s in self.target)

    def eval_target_labels(self) -> np.ndarray:
        """Held-out target labels. Evaluation only, never a training signal."""
        if not self.has_target_labels:
            raise ValueError("target labels are not available")
        return np.array([s.heldout_label for s in self.target], dtype=np.int64)

    def images(self, name: str, idx: Sequence[int], flip: Sequence[bool] | None = None) -> np.ndarray:
        """Normalized float32 batch (N, 3, S, S), optionally mirrored per sample."""
        samples = self.domain(name)
        rgb = np.stack([samples[i].rgb for i in idx])
        if flip is not None:
            flip = np.asarray(flip, dtype=bool)
            rgb[flip] = rgb[flip][:, :, ::-1]
        return normalize(rgb)


# ---------------------------------------------------------------- on-disk layout

def _category_dirs(root: Path) -> dict[str, Path]:
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    return {p.name: p for p in sorted(root.iterdir()) if p.is_dir()}


def _read_image(path: Path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise SampleDecodeError(path, str(exc)) from exc


def load_directory_pair(source_root, target_root, image_size: int = 224) -> DomainPair:
    """Read ``<root>/<category>/<image>.{png,jpg}`` trees for both domains.

    Category indices follow the lexicographic order of the directory names;
    samples are ordered by path. Target labels taken from the directory names
    are held out for evaluation.
    """
    source_root, target_root = Path(source_root), Path(target_root)
    src_dirs, tgt_dirs = _category_dirs(source_root), _category_dirs(target_root)
    if set(src_dirs) != set(tgt_dirs):
        only_s = sorted(set(src_dirs) - set(tgt_dirs))
        only_t = sorted(set(tgt_dirs) - set(src_dirs))
        raise CategoryMismatch(f"category sets differ: source-only {only_s}, target-only {only_t}")
    categories = sorted(src_dirs)

    def collect(dirs: dict[str, Path], domain: str) -> list[ImageSample]:
        out = []
        for label, name in enumerate(categories):
            root = dirs[name]
            files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
            for path in files:
                rgb = _read_image(path, image_size)
                sid = f"{domain}/{name}/{path.name}"
                if domain == SOURCE:
                    out.append(ImageSample(sid, rgb, label, SOURCE))
                else:
                    out.append(ImageSample(sid, rgb, None, TARGET, heldout_label=label))
        return out

    return DomainPair(collect(src_dirs, SOURCE), collect(tgt_dirs, TARGET), categories)


# ---------------------------------------------------------------- synthetic benchmark

@dataclass(frozen=True)
class TargetShift:
    hue_degrees: float = 0.0
    noise_sigma: float = 0.0
    background_texture: bool = False

    @property
    def is_zero(self) -> bool:
        return self.hue_degrees == 0.0 and self.noise_sigma == 0.0 and not self.background_texture


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 5
    per_class: int = 40
    seed: int = 0
    target_shift: TargetShift = TargetShift(hue_degrees=60.0, noise_sigma=0.06, background_texture=True)
    image_size: int = 32


def _shape_mask(family: str, yy, xx, cx, cy, r, theta) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(theta), math.sin(theta)
    u, v = c * dx + s * dy, -s * dx + c * dy
    d = np.hypot(dx, dy)
    if family == "circle":
        return d <= r
    if family == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if family == "triangle":
        # equilateral, apex up, rotated by theta
        h = 1.5 * r
        top = -r
        rel = (v - top) / h  # 0 at apex, 1 at base
        return (rel >= 0) & (rel <= 1) & (np.abs(u) <= rel * r * 0.95)
    if family == "cross":
        w = 0.3 * r
        return ((np.abs(u) <= w) & (np.abs(v) <= r)) | ((np.abs(v) <= w) & (np.abs(u) <= r))
    if family == "flower":
        m = d <= 0.38 * r
        for k in range(5):
            a = theta + 2 * math.pi * k / 5
            px, py = cx + 0.62 * r * math.cos(a), cy + 0.62 * r * math.sin(a)
            m |= np.hypot(xx - px, yy - py) <= 0.38 * r
        return m
    if family == "ring":
        return (d <= r) & (d >= 0.55 * r)
    if family == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1 * r
    if family == "bars":
        w = 0.22 * r
        return (np.abs(u) <= r) & ((np.abs(v - 0.5 * r) <= w) | (np.abs(v + 0.5 * r) <= w))
    raise ValueError(f"unknown shape family {family!r}")


def _hue_rotation(deg: float) -> np.ndarray:
    # rotation about the gray axis of RGB space
    a = math.radians(deg)
    k = np.ones(3) / math.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(a) * kx + (1 - math.cos(a)) * (kx @ kx)


def _render(rng: np.random.Generator, family: str, size: int, shift: TargetShift | None):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx, cy = rng.uniform(0.4, 0.6, size=2) * size
    r = rng.uniform(0.30, 0.38) * size
    theta = rng.uniform(-0.3, 0.3)
    mask = _shape_mask(family, yy, xx, cx, cy, r, theta)

    bg = rng.uniform(0.15, 0.3)
    img = np.full((size, size, 3), bg) + rng.normal(0.0, 0.015, size=(size, size, 3))
    hue = rng.uniform(0, 1)
    fg = np.array([abs(math.sin(math.pi * (hue + k / 3))) for k in range(3)]) * 0.6 + 0.35
    img[mask] = fg + rng.normal(0.0, 0.015, size=(int(mask.sum()), 3))

    if shift is not None:
        if shift.background_texture:
            phase = rng.uniform(0, 2 * math.pi)
            stripes = 0.12 * np.sin(2 * math.pi * (xx + yy) / 6.0 + phase)
            img[~mask] += stripes[~mask][:, None]
        if shift.hue_degrees:
            img = img @ _hue_rotation(shift.hue_degrees).T
        if shift.noise_sigma:
            img = img + rng.normal(0.0, shift.noise_sigma, size=img.shape)
    rgb = np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)
    return rgb, mask


def generate_synthetic_pair(spec: SyntheticSpec) -> DomainPair:
    """Source: clean shapes, one shape family per class. Target: fresh draws of
    the same shapes under ``spec.target_shift``. Both domains carry foreground
    masks; target labels are held out.
    """
    if spec.n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if spec.n_classes > len(SHAPE_FAMILIES):
        raise ValueError(f"at most {len(SHAPE_FAMILIES)} classes are available")
    if spec.per_class < 4:
        raise ValueError("per_class must be >= 4")
    families = SHAPE_FAMILIES[: spec.n_classes]
    src_seq, tgt_seq = np.random.SeedSequence(spec.seed).spawn(2)
    src_rng, tgt_rng = np.random.default_rng(src_seq), np.random.default_rng(tgt_seq)

    source, target = [], []
    for label, family in enumerate(families):
        for i in range(spec.per_class):
            rgb, mask = _render(src_rng, family, spec.image_size, None)
            source.append(ImageSample(f"source/{family}/{i:04d}", rgb, label, SOURCE, mask=mask))
    for label, family in enumerate(families):
        for i in range(spec.per_class):
            rgb, mask = _render(tgt_rng, family, spec.image_size, spec.target_shift)
            target.append(ImageSample(f"target/{family}/{i:04d}", rgb, None, TARGET, mask=mask, heldout_label=label))
    return DomainPair(source, target, families)


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class Batch:
    source_idx: np.ndarray
    source_flip: np.ndarray
    target_idx: np.ndarray
    target_flip: np.ndarray

    def source_images(self, pair: DomainPair) -> np.ndarray:
        return pair.images(SOURCE, self.source_idx, self.source_flip)

    def target_images(self, pair: DomainPair) -> np.ndarray:
        return pair.images(TARGET, self.target_idx, self.target_flip)


def _cycled_order(rng: np.random.Generator, n: int, length: int) -> np.ndarray:
    reps = [rng.permutation(n) for _ in range(math.ceil(length / n))]
    return np.concatenate(reps)[:length]


def _epoch_length(n: int, bs: int, n_batches: int) -> int:
    # the domain that sets the batch count is covered exactly once; a shorter one is cycled
    return n if math.ceil(n / bs) == n_batches else n_batches * bs


def batches(pair: DomainPair, batch_size: int, seed: int, flip: bool, epoch: int = 0,
            batch_mix: float = 1.0) -> Iterator[Batch]:
    """One epoch of mixed batches.

    ``batch_size`` is the source sub-batch size; the target sub-batch holds
    ``round(batch_size * batch_mix)`` samples. The epoch runs until the longer
    domain is exhausted; the shorter one is cycled with a fresh permutation
    per pass. Shuffling and flips come from a generator seeded by
    ``(seed, epoch)``.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if pair.n_s == 0 or pair.n_t == 0:
        raise EmptyDomain("both domains need at least one sample")
    bs_s = batch_size
    bs_t = max(1, int(round(batch_size * batch_mix)))
    n_batches = max(math.ceil(pair.n_s / bs_s), math.ceil(pair.n_t / bs_t))
    rng = np.random.default_rng([seed, epoch])
    src = _cycled_order(rng, pair.n_s, _epoch_length(pair.n_s, bs_s, n_batches))
    tgt = _cycled_order(rng, pair.n_t, _epoch_length(pair.n_t, bs_t, n_batches))
    src_flip = rng.random(len(src)) < 0.5 if flip else np.zeros(len(src), dtype=bool)
    tgt_flip = rng.random(len(tgt)) < 0.5 if flip else np.zeros(len(tgt), dtype=bool)
    for b in range(n_batches):
        ss = slice(b * bs_s, min((b + 1) * bs_s, len(src)))
        ts = slice(b * bs_t, min((b + 1) * bs_t, len(tgt)))
        yield Batch(src[ss], src_flip[ss], tgt[ts], tgt_flip[ts])
