"""Dataset loading, preprocessing/augmentation, stratified folds and synthetic glyphs."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class Dataset:
    items: list
    class_names: list
    image_size: tuple | None = None
    errors: list = field(default_factory=list)
    skipped: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.items)

    @property
    def labels(self):
        return np.array([label for _, label in self.items], dtype=np.int64)

    @property
    def num_classes(self):
        return len(self.class_names)

    def image(self, index):
        """Decoded H x W x 3 uint8 array for item ``index`` (cached)."""
        if index not in self._cache:
            src = self.items[index][0]
            if isinstance(src, np.ndarray):
                self._cache[index] = src
            else:
                with Image.open(src) as im:
                    self._cache[index] = np.asarray(im.convert("RGB"))
        return self._cache[index]

    def subset(self, indices):
        return [(i, self.items[i][1]) for i in indices]


def load_dataset(root_dir) -> Dataset:
    """Read ``root/<CLASS>/<file>.png|jpg|jpeg``; classes sorted, labels 0..K-1."""
    root = Path(root_dir)
    if not root.is_dir():
        raise InputError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise InputError(f"dataset root {root} has no class subdirectories")
    ds = Dataset(items=[], class_names=[p.name for p in class_dirs])
    for label, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file())
        n_before = len(ds.items)
        for f in files:
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                ds.skipped += 1
                continue
            try:
                with Image.open(f) as im:
                    im.verify()
                    size = im.size
            except Exception as exc:  # PIL raises a zoo of types for bad files
                ds.errors.append((str(f), str(exc)))
                continue
            if ds.image_size is None:
                ds.image_size = (size[1], size[0])
            ds.items.append((str(f), label))
        if len(ds.items) == n_before:
            logger.warning("class directory %s contains no images", d)
    if ds.skipped:
        logger.warning("skipped %d non-image files under %s", ds.skipped, root)
    if ds.errors:
        logger.warning("%d images could not be decoded", len(ds.errors))
    return ds


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    saturation_jitter: float = 0.1
    max_translate_frac: float = 0.1
    target_size: int = 224

    def __post_init__(self):
        for name in ("flip_prob", "brightness_jitter", "contrast_jitter", "saturation_jitter",
                     "max_translate_frac"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        if not 0 <= self.max_rotation_deg <= 180:
            raise ConfigurationError(f"max_rotation_deg must be in [0, 180], got {self.max_rotation_deg}")
        if self.target_size < 1:
            raise ConfigurationError(f"target_size must be positive, got {self.target_size}")

    @classmethod
    def no_augmentation(cls, target_size=224):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, target_size)


def image_rng(seed, index, epoch):
    """Independent stream per (run seed, image index, epoch)."""
    return np.random.default_rng([seed, index, epoch])


def resize_bilinear(img, size):
    """Half-pixel-centre bilinear resize of an H x W x C float image to size x size."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(img.dtype)

    r0, r1, fr = axis_weights(h, size)
    c0, c1, fc = axis_weights(w, size)
    rows = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def _rotate_translate(img, angle_deg, tx, ty):
    """Rotate about the centre then shift by (tx, ty) pixels; bilinear, zero fill."""
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # inverse map, output (row, col) -> input (row, col)
    inv = np.array([[cos, -sin], [sin, cos]])
    offset = np.array([cy, cx]) - inv @ np.array([cy + ty, cx + tx])
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[..., ch] = ndimage.affine_transform(img[..., ch], inv, offset=offset, order=1,
                                                mode="constant", cval=0.0)
    return out


def _color_jitter(img, brightness, contrast, saturation):
    if brightness != 1.0:
        img = np.clip(img * brightness, 0, 1)
    if contrast != 1.0:
        m = img.mean()
        img = np.clip(m + contrast * (img - m), 0, 1)
    if saturation != 1.0:
        gray = (img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype))[..., None]
        img = np.clip(gray + saturation * (img - gray), 0, 1)
    return img


def preprocess(image, mode="eval", cfg: AugmentConfig | None = None, rng=None):
    """Decoded H x W x 3 uint8 image -> normalized float32 3 x S x S tensor data.

    Train mode applies flip, rotation, translation and colour jitter, in that
    order, before the resize. Eval mode only resizes and normalizes.
    """
    cfg = cfg or AugmentConfig()
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InputError(f"expected a nonempty H x W x 3 image, got shape {img.shape}")
    img = img.astype(np.float32) / 255.0 if img.dtype == np.uint8 else img.astype(np.float32)
    if mode == "train":
        if rng is None:
            raise ConfigurationError("train-mode preprocessing needs an rng stream")
        # fixed draw order keeps stream consumption independent of cfg
        flip = rng.random() < cfg.flip_prob
        angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
        tx = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * img.shape[1]
        ty = rng.uniform(-cfg.max_translate_frac, cfg.max_translate_frac) * img.shape[0]
        b = 1.0 + rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
        c = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter)
        s = 1.0 + rng.uniform(-cfg.saturation_jitter, cfg.saturation_jitter)
        if flip:
            img = img[:, ::-1]
        if angle != 0 or tx != 0 or ty != 0:
            img = _rotate_translate(img, angle, tx, ty)
        img = _color_jitter(img, b, c, s)
    elif mode != "eval":
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    img = resize_bilinear(img, cfg.target_size)
    img = (img - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple

    def test_indices(self, i):
        return np.array(self.folds[i], dtype=np.int64)

    def train_indices(self, i):
        return np.array(sorted(itertools.chain.from_iterable(
            f for j, f in enumerate(self.folds) if j != i)), dtype=np.int64)

    def to_dict(self):
        return {"k": self.k, "seed": self.seed, "folds": [list(map(int, f)) for f in self.folds]}


def stratified_kfold(labels, k=5, seed=42) -> FoldPlan:
    """Per class: shuffle with a seeded RNG, then deal round-robin into ``k`` folds.

    Dealing continues across classes from where the previous class stopped so
    that overall fold sizes also differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InputError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise InputError(f"class {c} has {n} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for c in classes:
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            folds[(offset + j) % k].append(int(i))
        offset = (offset + len(idx)) % k
    return FoldPlan(k=k, seed=seed, folds=tuple(tuple(sorted(f)) for f in folds))


# Each primitive is mirror-symmetric (so horizontal-flip augmentation never
# turns one class into another) and has a distinct local texture, so classes
# stay separable after global pooling.
def _draw_primitive(draw, idx, s, width, color):
    def box(c, r):
        return [c[0] - r, c[1] - r, c[0] + r, c[1] + r]

    mid = (0.5 * s, 0.5 * s)
    if idx == 0:
        draw.line([(0.15 * s, 0.5 * s), (0.85 * s, 0.5 * s)], fill=color, width=width)
    elif idx == 1:
        draw.line([(0.5 * s, 0.15 * s), (0.5 * s, 0.85 * s)], fill=color, width=width)
    elif idx == 2:
        draw.line([(0.22 * s, 0.22 * s), (0.78 * s, 0.78 * s)], fill=color, width=width)
        draw.line([(0.78 * s, 0.22 * s), (0.22 * s, 0.78 * s)], fill=color, width=width)
    elif idx == 3:
        draw.ellipse(box(mid, 0.3 * s), outline=color, width=width)
    elif idx == 4:
        draw.ellipse(box(mid, 0.11 * s), fill=color)
    elif idx == 5:
        draw.rectangle([0.2 * s, 0.2 * s, 0.8 * s, 0.8 * s], outline=color, width=width)
    else:
        for cx in (0.1 * s, 0.9 * s):
            for cy in (0.1 * s, 0.9 * s):
                draw.ellipse(box((cx, cy), 0.06 * s), fill=color)


def glyph_codes(num_classes):
    """Primitive subsets per class: even-weight codes first (pairwise distance >= 2)."""
    subsets = [c for r in range(1, 8) for c in itertools.combinations(range(7), r)]
    subsets.sort(key=lambda c: (len(c) % 2, len(c), c))
    return subsets[:num_classes]


def render_glyph(code, image_size, rng):
    ss = 4
    s = image_size * ss
    bg = rng.uniform(0, 60, size=3)
    fg = rng.uniform(180, 255, size=3)
    canvas = Image.new("RGB", (s, s), tuple(int(v) for v in bg))
    draw = ImageDraw.Draw(canvas)
    width = max(1, int(round(0.06 * s)))
    for idx in code:
        _draw_primitive(draw, idx, s, width, tuple(int(v) for v in fg))
    angle = rng.uniform(-10, 10)
    tx, ty = rng.uniform(-0.08, 0.08, size=2) * s
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, translate=(tx, ty),
                           fillcolor=tuple(int(v) for v in bg))
    small = np.asarray(canvas.resize((image_size, image_size), Image.BOX), dtype=np.float64)
    small = small + rng.normal(0, 12, size=small.shape)
    return np.clip(np.rint(small), 0, 255).astype(np.uint8)


def synth_generate(num_classes=26, per_class=40, image_size=64, seed=42, out_dir="synth") -> Dataset:
    """Write a procedural glyph dataset in the ``load_dataset`` layout and load it back."""
    if not 2 <= num_classes <= 64:
        raise InputError(f"num_classes must be in [2, 64], got {num_classes}")
    if per_class < 1 or image_size < 8:
        raise InputError(f"need per_class >= 1 and image_size >= 8, got {per_class}, {image_size}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # glyphs left by an earlier run with other sizes or counts would be loaded too
    for stale in out.glob("C[0-9][0-9]/[0-9][0-9][0-9][0-9].png"):
        stale.unlink()
    for d in out.glob("C[0-9][0-9]"):
        if d.is_dir() and not any(d.iterdir()):
            d.rmdir()
    codes = glyph_codes(num_classes)
    for c, code in enumerate(codes):
        d = out / f"C{c:02d}"
        d.mkdir(exist_ok=True)
        for i in range(per_class):
            img = render_glyph(code, image_size, np.random.default_rng([seed, c, i]))
            Image.fromarray(img).save(d / f"{i:04d}.png", optimize=False)
    return load_dataset(out)


def dataset_from_arrays(images, labels, class_names=None) -> Dataset:
    """In-memory dataset, mainly for tests and programmatic use."""
    labels = [int(v) for v in labels]
    if class_names is None:
        class_names = [str(i) for i in range(max(labels) + 1)]
    items = [(np.asarray(img), lab) for img, lab in zip(images, labels)]
    size = tuple(np.asarray(images[0]).shape[:2]) if len(items) else None
    return Dataset(items=items, class_names=list(class_names), image_size=size)

