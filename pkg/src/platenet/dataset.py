"""Directory-based image datasets and the synthetic plated-surface generator.

Layout convention: ``{root}/{ok,bad}/*.png`` for one split directory, and
``{data_root}/{train,test}/{ok,bad}/*.png`` for a whole corpus. Labels come
only from the parent directory name (``ok`` -> 0, ``bad`` -> 1).
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from PIL import Image, UnidentifiedImageError

from platenet import augment as aug
from platenet.errors import DatasetError

log = logging.getLogger(__name__)

CLASSES = {"ok": 0, "bad": 1}
CLASS_NAMES = {v: k for k, v in CLASSES.items()}
SUPPORTED_EXTENSIONS = (".png", ".pgm")
TRAINING, VALIDATION = "training", "validation"
MANIFEST_NAME = "manifest.tsv"
THREADS_ENV = "PLATENET_THREADS"


class ImageLoadError(DatasetError, OSError):
    pass


@dataclass
class Entry:
    path: str
    label: int
    split: str = TRAINING


@dataclass
class DatasetIndex:
    entries: list
    seed: int = 123
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def subset(self, split):
        return [e for e in self.entries if e.split == split]

    def counts(self, split=None):
        """``{label: count}`` over all entries or one split."""
        out = {label: 0 for label in CLASS_NAMES}
        for e in self.entries:
            if split is None or e.split == split:
                out[e.label] += 1
        return out


@dataclass
class Batch:
    inputs: np.ndarray  # (N, H, W, 1) float32 in [0, 1]
    labels: np.ndarray  # (N,) float32 in {0, 1}
    paths: list = field(default_factory=list)

    def __len__(self):
        return self.labels.shape[0]


def scan(root, seed=123):
    """Index every supported image under ``root/ok`` and ``root/bad``.

    Entries are ordered by class (ok first) and then by file name.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"data directory not found: {root}")
    entries, skipped = [], 0
    for name, label in sorted(CLASSES.items(), key=lambda kv: kv[1]):
        class_dir = os.path.join(root, name)
        if not os.path.isdir(class_dir):
            continue
        for fname in sorted(os.listdir(class_dir)):
            path = os.path.join(class_dir, fname)
            if not os.path.isfile(path):
                continue
            if os.path.splitext(fname)[1].lower() not in SUPPORTED_EXTENSIONS:
                skipped += 1
                continue
            entries.append(Entry(path, label))
    if skipped:
        log.warning("skipped %d file(s) with unsupported extensions under %s", skipped, root)
    if not entries:
        raise DatasetError(f"no images found under {root} (expected ok/ and bad/ subdirectories)")
    return DatasetIndex(entries, seed, skipped)


def _round_half_up(x):
    return math.floor(x + Fraction(1, 2))


def validation_count(n, fraction):
    """Per-class validation size: ``fraction * n`` rounded half-up, in exact arithmetic."""
    return _round_half_up(Fraction(str(float(fraction))) * n)


def split(index, validation_fraction=0.2, seed=None):
    """Tag the last ``round(fraction * n_c)`` entries of each class as validation."""
    if not 0 <= validation_fraction < 1:
        raise ValueError(f"validation_fraction must be in [0, 1), got {validation_fraction}")
    entries = []
    for label in sorted(CLASS_NAMES):
        members = [e for e in index.entries if e.label == label]
        n_val = validation_count(len(members), validation_fraction)
        for i, e in enumerate(members):
            entries.append(Entry(e.path, e.label, VALIDATION if i >= len(members) - n_val else TRAINING))
    if not any(e.split == TRAINING for e in entries):
        raise DatasetError(f"validation_fraction {validation_fraction} leaves no training images")
    return DatasetIndex(entries, index.seed if seed is None else seed, index.skipped)


# ---------------------------------------------------------------- image loading


def _nearest_indices(n_in, n_out):
    i = np.arange(n_out)
    return ((2 * i + 1) * n_in) // (2 * n_out)


def resize_nearest(pixels, size):
    """Nearest-neighbour resize of a 2-D array to ``size = (height, width)``."""
    h, w = size
    if pixels.shape == (h, w):
        return pixels
    return pixels[_nearest_indices(pixels.shape[0], h)][:, _nearest_indices(pixels.shape[1], w)]


def to_gray(img):
    """8-bit grayscale array from a PIL image; colour is reduced by rounded Rec.601 luma."""
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8)
    if img.mode == "LA":
        return np.asarray(img, dtype=np.uint8)[:, :, 0]
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode in ("RGB", "RGBA"):
        rgb = np.asarray(img, dtype=np.int64)[:, :, :3]
        luma = (299 * rgb[:, :, 0] + 587 * rgb[:, :, 1] + 114 * rgb[:, :, 2] + 500) // 1000
        return luma.astype(np.uint8)
    raise DatasetError(f"unsupported image mode {img.mode!r}")


def load_image(path, target_size=(300, 300)):
    """Load ``path`` as a raw-intensity ``(H, W, 1)`` float32 array (values 0-255)."""
    if isinstance(target_size, int):
        target_size = (target_size, target_size)
    try:
        with Image.open(path) as img:
            img.load()
            gray = to_gray(img)
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageLoadError(f"cannot read image {path}: {exc}") from None
    except DatasetError as exc:
        raise ImageLoadError(f"cannot read image {path}: {exc}") from None
    return resize_nearest(gray, target_size).astype(np.float32)[:, :, None]


def preprocess(path, target_size=(300, 300), config=None, rng=None):
    """Load one image and map it to [0, 1]; augments when ``config`` is given."""
    raw = load_image(path, target_size)
    if config is None:
        return aug.passthrough(raw)
    params = aug.sample(config, rng, raw.shape)
    return aug.apply(raw, params, config.rescale)


def _worker_count(workers):
    if workers is None:
        workers = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, workers)


def batches(index, split, batch_size=64, shuffle=False, augment=None, epoch=0, seed=None,
            target_size=(300, 300), workers=None):
    """Yield :class:`Batch` objects covering every entry of ``split`` exactly once.

    With ``shuffle`` the order is a permutation drawn from ``(seed, epoch)``.
    With an :class:`AugmentConfig` each image gets its own transform drawn from
    ``(seed, epoch, entry position)``, so results do not depend on ``workers``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    seed = index.seed if seed is None else seed
    positions = [i for i, e in enumerate(index.entries) if e.split == split]
    if not positions:
        raise DatasetError(f"split {split!r} is empty")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(positions))
        positions = [positions[i] for i in order]

    def load(pos):
        entry = index.entries[pos]
        rng = np.random.default_rng([seed, epoch, pos]) if augment is not None else None
        return preprocess(entry.path, target_size, augment, rng)

    n_workers = _worker_count(workers)
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
    try:
        for start in range(0, len(positions), batch_size):
            chunk = positions[start:start + batch_size]
            images = list(pool.map(load, chunk)) if pool else [load(p) for p in chunk]
            labels = np.array([index.entries[p].label for p in chunk], dtype=np.float32)
            yield Batch(np.stack(images), labels, [index.entries[p].path for p in chunk])
    finally:
        if pool:
            pool.shutdown()


# ---------------------------------------------------------------- synthetic corpus

DEFECT_TYPES = ("scratch", "void", "blotch")
GRIT_DENSITY = 0.004
GRIT_LEVELS = (40, 70)
VOID_DEPTH = 95.0
BLOTCH_AXES = (0.15, 0.3)
DEFECT_WEIGHTS = (0.55, 0.35, 0.10)


def _grit(rng, h, w, density):
    """Bright speckle layer: Poisson-many small blobs at uniform positions."""
    layer = np.zeros((h, w))
    n = rng.poisson(density * h * w)
    ys, xs = rng.integers(0, h, n), rng.integers(0, w, n)
    levels = rng.uniform(*GRIT_LEVELS, n)
    big = rng.random(n) < 0.4
    layer[ys, xs] = levels
    # larger grains cover a plus-shaped 5-pixel footprint
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        yy, xx = np.clip(ys[big] + dy, 0, h - 1), np.clip(xs[big] + dx, 0, w - 1)
        layer[yy, xx] = np.maximum(layer[yy, xx], levels[big] * 0.7)
    return layer


def _segment_distance(yy, xx, p, q):
    d = q - p
    length2 = float(d @ d) or 1.0
    t = np.clip(((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / length2, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def _scratch_mask(rng, h, w):
    """One to three dark polylines, each 1-3 px wide, wandering across the part."""
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w), dtype=bool)
    size = max(h, w)
    for _ in range(int(rng.integers(1, 4))):
        pts = [rng.uniform(0.1, 0.9, 2) * [h, w]]
        heading = rng.uniform(0, 2 * math.pi)
        for _ in range(int(rng.integers(3, 7))):
            heading += rng.uniform(-math.pi / 3, math.pi / 3)
            step = rng.uniform(0.12, 0.3) * size
            nxt = pts[-1] + step * np.array([math.sin(heading), math.cos(heading)])
            pts.append(np.clip(nxt, 0, [h - 1, w - 1]))
        half_width = rng.integers(1, 4) / 2.0
        dist = np.full((h, w), np.inf)
        for p, q in zip(pts[:-1], pts[1:]):
            dist = np.minimum(dist, _segment_distance(yy, xx, p, q))
        mask |= dist <= half_width
    return mask


def _disk_mask(rng, h, w, radius):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(radius, h - radius), rng.uniform(radius, w - radius)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _ellipse_mask(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    a, b = rng.uniform(*BLOTCH_AXES) * w, rng.uniform(*BLOTCH_AXES) * h
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    theta = rng.uniform(0, math.pi)
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def render_surface(rng, size, defects=()):
    """One synthetic plated-surface image as uint8, with the named defects injected."""
    h, w = size
    base = rng.uniform(132, 148) + rng.normal(0, 4, (h, w))
    grit = _grit(rng, h, w, density=GRIT_DENSITY)
    dark = np.zeros((h, w), dtype=bool)
    for kind in defects:
        if kind == "void":
            radius = rng.uniform(0.08, 0.15) * min(h, w)
            hole = _disk_mask(rng, h, w, radius)
            grit[hole] = 0.0
            base[hole] -= VOID_DEPTH
        elif kind == "blotch":
            base[_ellipse_mask(rng, h, w)] += rng.choice([-40.0, 40.0])
        elif kind == "scratch":
            dark |= _scratch_mask(rng, h, w)
        else:
            raise ValueError(f"unknown defect type {kind!r}")
    img = base + grit
    if dark.any():
        img[dark] = rng.uniform(35, 60) + rng.normal(0, 3, int(dark.sum()))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthesize(n_ok, n_bad, image_size=300, seed=123, out_root="."):
    """Write a labelled synthetic corpus and return the manifest path.

    Each class is split 80/20 into ``train/`` and ``test/``. Bad images carry
    one to three defects drawn from scratch, void and blotch. The manifest
    lists ``path<TAB>label<TAB>defect_type`` with paths relative to
    ``out_root`` and multiple defects joined by ``+`` (``none`` for ok parts).
    """
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    for part in ("train", "test"):
        for name in CLASSES:
            os.makedirs(os.path.join(out_root, part, name), exist_ok=True)
    lines = []
    for name, count in (("ok", n_ok), ("bad", n_bad)):
        label = CLASSES[name]
        n_test = count // 5
        for i in range(count):
            rng = np.random.default_rng([seed, label, i])
            defects = ()
            if label:
                k = int(rng.integers(1, 4))
                defects = tuple(str(d) for d in rng.choice(DEFECT_TYPES, size=k, p=DEFECT_WEIGHTS))
            pixels = render_surface(rng, image_size, defects)
            part = "train" if i < count - n_test else "test"
            rel = f"{part}/{name}/{name}_{i:05d}.png"
            Image.fromarray(pixels, mode="L").save(os.path.join(out_root, rel))
            lines.append(f"{rel}\t{label}\t{'+'.join(defects) or 'none'}\n")
    manifest = os.path.join(out_root, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.writelines(lines)
    return manifest


def read_manifest(path):
    """Parse a synthetic manifest into ``(relative path, label, defect types)`` tuples."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rel, label, defects = line.rstrip("\n").split("\t")
            rows.append((rel, int(label), tuple(defects.split("+")) if defects != "none" else ()))
    return rows
