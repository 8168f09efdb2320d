"""Dataset scanning, splitting, batch loading and the synthetic generator.

Expected on-disk layout (the EBHI-Seg release uses it)::

    root/<class>/image/<name>.png
    root/<class>/label/<name>.png

Class directory names are normalised to lower-case with dashes, so
``High-grade IN`` becomes ``high-grade-in``.
"""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")
EBHI_CLASSES = ("normal", "polyp", "high-grade-in", "low-grade-in",
                "adenocarcinoma", "serrated-adenoma")


class DataError(Exception):
    pass


def normalize_class(name: str) -> str:
    return "-".join(name.strip().lower().replace("_", " ").split())


@dataclass(frozen=True)
class Sample:
    image_path: Path
    mask_path: Path
    class_name: str


@dataclass
class DatasetIndex:
    samples: dict[str, list[Sample]] = field(default_factory=dict)
    dropped: list[Path] = field(default_factory=list)

    def all_samples(self) -> list[Sample]:
        return [s for cls in sorted(self.samples) for s in self.samples[cls]]

    def __len__(self):
        return sum(len(v) for v in self.samples.values())


def _list_images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            return im.size
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def scan_dataset(root) -> DatasetIndex:
    """Pair images with labels by file stem for every class directory."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    index = DatasetIndex()
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    for cdir in class_dirs:
        img_dir, lbl_dir = cdir / "image", cdir / "label"
        for d in (img_dir, lbl_dir):
            if not d.is_dir():
                raise DataError(f"missing directory {d}")
        cls = normalize_class(cdir.name)
        images, labels = _list_images(img_dir), _list_images(lbl_dir)
        entries = []
        for stem, ipath in images.items():
            lpath = labels.get(stem)
            if lpath is None:
                index.dropped.append(ipath)
                log.warning("no label for %s; dropped", ipath)
                continue
            isz, lsz = _image_size(ipath), _image_size(lpath)
            if isz != lsz:
                raise DataError(f"size mismatch: {ipath} is {isz}, {lpath} is {lsz}")
            entries.append(Sample(ipath, lpath, cls))
        for stem in sorted(set(labels) - set(images)):
            log.warning("label without image: %s", labels[stem])
        if not entries:
            log.warning("class %s has no usable samples", cls)
        index.samples[cls] = entries
    return index


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def split(index: DatasetIndex, spec: SplitSpec = SplitSpec()) -> tuple[list[Sample], list[Sample]]:
    """Stratified split: per class, seeded shuffle, first floor(f*n) go to train."""
    train, test = [], []
    for offset, cls in enumerate(sorted(index.samples)):
        samples = index.samples[cls]
        rng = np.random.default_rng([spec.seed, offset])
        order = rng.permutation(len(samples))
        cut = int(np.floor(spec.train_fraction * len(samples)))
        train.extend(samples[i] for i in order[:cut])
        test.extend(samples[i] for i in order[cut:])
    return train, test


def read_image(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def to_tensors(images_u8: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(b, H, W, 3)`` uint8 and ``(b, H, W)`` masks -> float32 NCHW arrays."""
    x = images_u8.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    y = (masks > 0).astype(np.float32)[:, None]
    return np.ascontiguousarray(x), y


def load_batch(samples: list[Sample], start: int, batch_size: int):
    if not 0 <= start < len(samples):
        raise IndexError(f"batch start {start} outside 0..{len(samples) - 1}")
    chunk = samples[start:start + batch_size]
    images = np.stack([read_image(s.image_path, "RGB") for s in chunk])
    masks = np.stack([read_image(s.mask_path, "L") for s in chunk])
    return to_tensors(images, masks)


class SampleDataset:
    """Disk-backed dataset over a list of samples."""

    def __init__(self, samples: list[Sample]):
        self.samples = list(samples)
        self.class_labels = [s.class_name for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def batch(self, start, size):
        return load_batch(self.samples, start, size)


class ArrayDataset:
    """In-memory dataset of uint8 images ``(n, H, W, 3)`` and masks ``(n, H, W)``."""

    def __init__(self, images: np.ndarray, masks: np.ndarray, class_name: str = "synthetic"):
        self.images = images
        self.masks = masks
        self.class_labels = [class_name] * len(images)

    def __len__(self):
        return len(self.images)

    def batch(self, start, size):
        return to_tensors(self.images[start:start + size], self.masks[start:start + size])


def iter_batches(dataset, batch_size: int, prefetch: int = 0):
    """Yield ``(images, masks)`` in dataset order, optionally from a loader thread."""
    starts = range(0, len(dataset), batch_size)
    if prefetch <= 0:
        for s in starts:
            yield dataset.batch(s, batch_size)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()

    def worker():
        try:
            for s in starts:
                q.put(dataset.batch(s, batch_size))
        except Exception as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while (item := q.get()) is not done:
        if isinstance(item, Exception):
            raise item
        yield item


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float      # semi-axis along the rotated x direction
    b: float
    theta: float

    def contains(self, y, x):
        dy, dx = y - self.cy, x - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0


@dataclass
class SynthDataset:
    images: np.ndarray   # (n, S, S, 3) uint8
    masks: np.ndarray    # (n, S, S) bool
    ellipses: list[Ellipse]

    def as_dataset(self) -> ArrayDataset:
        return ArrayDataset(self.images, self.masks)


def _texture(rng, size, base, amp):
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(2, 8, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    field_ /= 3
    noise = rng.normal(0, 0.35, size=(size, size))
    return np.clip(base[None, None, :] + amp * (field_ + noise)[..., None], 0, 1)


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> SynthDataset:
    """Random filled ellipses on a textured background, with exact masks.

    The foreground covers 5-50% of each image; identical seeds give
    bit-identical output.
    """
    if size < 16:
        raise ValueError(f"synthetic images need size >= 16, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    masks = np.empty((n, size, size), dtype=bool)
    ellipses = []
    for i in range(n):
        while True:
            frac = rng.uniform(0.08, 0.35)
            aspect = rng.uniform(1.0, 1.6)
            area = frac * size * size
            a = np.sqrt(area * aspect / np.pi)
            b = area / (np.pi * a)
            margin = a + 1
            cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
            ell = Ellipse(float(cy), float(cx), float(a), float(b), float(rng.uniform(0, np.pi)))
            mask = ell.contains(yy, xx)
            if 0.05 <= mask.mean() <= 0.5:
                break
        bg = _texture(rng, size, np.array([0.92, 0.72, 0.80]), 0.08)
        fg = _texture(rng, size, np.array([0.45, 0.25, 0.60]), 0.10)
        img = np.where(mask[..., None], fg, bg)
        images[i] = np.round(img * 255).astype(np.uint8)
        masks[i] = mask
        ellipses.append(ell)
    return SynthDataset(images, masks, ellipses)


def write_dataset(ds: SynthDataset, root, class_name: str = "synthetic") -> Path:
    """Write ``ds`` in the class/image + class/label layout as PNG files."""
    base = Path(root) / class_name
    (base / "image").mkdir(parents=True, exist_ok=True)
    (base / "label").mkdir(parents=True, exist_ok=True)
    for i, (img, mask) in enumerate(zip(ds.images, ds.masks)):
        name = f"{i:05d}.png"
        Image.fromarray(img, "RGB").save(base / "image" / name)
        Image.fromarray(mask.astype(np.uint8) * 255, "L").save(base / "label" / name)
    return base
