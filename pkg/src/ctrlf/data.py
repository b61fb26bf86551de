"""Image-folder ingestion, stratified splitting, preprocessing and augmentation.

Layout: ``root/<class_name>/<image>`` (split by ratio), or
``root/train/<class_name>/...`` + ``root/test/<class_name>/...`` (explicit).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm"}
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


class DataError(RuntimeError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    classes: list[str]
    train: list[tuple[str, int]]
    test: list[tuple[str, int]]
    resolution: int = 224
    mean: tuple = DEFAULT_MEAN
    std: tuple = DEFAULT_STD

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[tuple[str, int]]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception as exc:  # PIL raises a zoo of types for bad files
        log.warning("skipping unreadable image %s: %s", path, exc)
        return False


def _class_dirs(folder: Path) -> list[str]:
    return sorted(d.name for d in folder.iterdir() if d.is_dir() and not d.name.startswith("."))


def _collect(root: Path, folder: Path, classes: list[str]) -> dict[int, list[str]]:
    out = {}
    for label, name in enumerate(classes):
        files = [p for p in _list_images(folder / name) if _readable(p)]
        if not files:
            raise DataError(f"class directory {folder / name} contains no readable images (class {name!r})")
        out[label] = [p.relative_to(root).as_posix() for p in files]
    return out


def scan_dataset(root, train_ratio: float = 0.8, seed: int = 0, resolution: int = 224,
                 cache_dir=None, compute_stats: bool = True) -> DatasetManifest:
    """Build a manifest from an image-folder tree.

    Class ids follow the sorted class-directory names.  Without explicit
    ``train``/``test`` directories each class is shuffled with ``seed`` and its
    first ``round(train_ratio * n)`` files go to training.  If ``cache_dir``
    holds a manifest from an earlier scan it is reused as-is.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if cache_dir is not None and (Path(cache_dir) / "classes.txt").exists():
        return load_manifest(root, cache_dir, resolution)

    explicit = (root / "train").is_dir() and (root / "test").is_dir()
    if explicit:
        classes = _class_dirs(root / "train")
        if _class_dirs(root / "test") != classes:
            raise DataError("train/ and test/ directories hold different class sets")
        tr = _collect(root, root / "train", classes)
        te = _collect(root, root / "test", classes)
        train = [(f, c) for c in range(len(classes)) for f in tr[c]]
        test = [(f, c) for c in range(len(classes)) for f in te[c]]
    else:
        classes = _class_dirs(root)
        if not classes:
            raise DataError(f"no class directories under {root}")
        per_class = _collect(root, root, classes)
        rng = np.random.default_rng(seed)
        train, test = [], []
        for c in range(len(classes)):
            files = per_class[c]
            order = rng.permutation(len(files))
            n_train = int(round(train_ratio * len(files)))
            train += [(files[i], c) for i in order[:n_train]]
            test += [(files[i], c) for i in order[n_train:]]

    manifest = DatasetManifest(root, classes, train, test, resolution)
    if compute_stats and train:
        manifest.mean, manifest.std = channel_stats(manifest)
    if cache_dir is not None:
        save_manifest(manifest, cache_dir)
    return manifest


def _write_index(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, label in rows:
            fh.write(f"{rel}\t{label}\n")


def _read_index(path: Path) -> list[tuple[str, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                rel, label = line.split("\t")
                rows.append((rel, int(label)))
    return rows


def save_manifest(manifest: DatasetManifest, cache_dir) -> None:
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    _write_index(cache / "train.tsv", manifest.train)
    _write_index(cache / "test.tsv", manifest.test)
    with open(cache / "classes.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{c}\n" for c in manifest.classes))
    with open(cache / "stats.txt", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mean=" + ",".join(repr(float(v)) for v in manifest.mean) + "\n")
        fh.write("std=" + ",".join(repr(float(v)) for v in manifest.std) + "\n")


def load_manifest(root, cache_dir, resolution: int = 224) -> DatasetManifest:
    cache = Path(cache_dir)
    classes = (cache / "classes.txt").read_text(encoding="utf-8").splitlines()
    stats = dict(line.split("=", 1) for line in (cache / "stats.txt").read_text(encoding="utf-8").splitlines())
    mean = tuple(float(v) for v in stats["mean"].split(","))
    std = tuple(float(v) for v in stats["std"].split(","))
    return DatasetManifest(Path(root), classes, _read_index(cache / "train.tsv"),
                           _read_index(cache / "test.tsv"), resolution, mean, std)


def decode(path, resolution: int) -> np.ndarray:
    """Read an image as float32 HWC in [0, 1], bilinearly resized to resolution²."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def channel_stats(manifest: DatasetManifest) -> tuple[tuple, tuple]:
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for rel, _ in manifest.train:
        img = decode(manifest.root / rel, manifest.resolution).astype(np.float64)
        total += img.sum(axis=(0, 1))
        total_sq += (img * img).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean * mean, 1e-12))
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


# -- augmentation (operate on CHW float arrays) ------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a CHW image about its centre, reflecting at the borders."""
    if degrees == 0:
        return img.copy()
    return ndimage.rotate(img, degrees, axes=(2, 1), reshape=False, order=1, mode="reflect").astype(img.dtype)


@dataclass
class Augment:
    flip_prob: float = 0.5
    max_rotation: float = 15.0

    def __call__(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if rng.random() < self.flip_prob:
            img = hflip(img)
        if self.max_rotation > 0:
            img = rotate(img, rng.uniform(-self.max_rotation, self.max_rotation))
        return img


def load_batch(manifest: DatasetManifest, indices, split: str = "train", augment: bool = False,
               rng: np.random.Generator | None = None, aug: Augment | None = None) -> Batch:
    rows = manifest.split(split)
    mean = np.asarray(manifest.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(manifest.std, dtype=np.float32).reshape(3, 1, 1)
    aug = aug or Augment()
    if augment and rng is None:
        raise ValueError("augmentation needs an rng")
    images, labels = [], []
    for i in indices:
        rel, label = rows[i]
        img = decode(manifest.root / rel, manifest.resolution).transpose(2, 0, 1)
        if augment:
            img = aug(img, rng)
        images.append((img - mean) / std)
        labels.append(label)
    return Batch(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64))


# -- dataset views consumed by the trainer -----------------------------------------

class ImageFolderData:
    def __init__(self, manifest: DatasetManifest, split: str, aug: Augment | None = None):
        self.manifest = manifest
        self.split = split
        self.aug = aug or Augment()

    def __len__(self):
        return len(self.manifest.split(self.split))

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([c for _, c in self.manifest.split(self.split)], dtype=np.int64)

    def batch(self, indices, augment: bool = False, rng=None) -> Batch:
        return load_batch(self.manifest, indices, self.split, augment, rng, self.aug)


@dataclass
class ArrayData:
    """In-memory images (N, 3, R, R) with integer labels."""

    images: np.ndarray
    label_array: np.ndarray
    classes: int = 0
    aug: Augment = field(default_factory=Augment)

    def __post_init__(self):
        if not self.classes:
            self.classes = int(self.label_array.max()) + 1

    def __len__(self):
        return len(self.label_array)

    @property
    def num_classes(self) -> int:
        return self.classes

    @property
    def labels(self) -> np.ndarray:
        return self.label_array

    def batch(self, indices, augment: bool = False, rng=None) -> Batch:
        idx = np.asarray(indices)
        imgs = self.images[idx]
        if augment:
            imgs = np.stack([self.aug(im, rng) for im in imgs])
        return Batch(imgs.astype(np.float32), self.label_array[idx].astype(np.int64))


def make_synthetic(num_classes: int = 8, per_class: int = 8, size: int = 32, seed: int = 0,
                   noise: float = 1.0) -> ArrayData:
    """Gaussian noise images shifted by a per-class random offset pattern."""
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, 1.0, size=(num_classes, 3, 1, 1))
    labels = np.repeat(np.arange(num_classes), per_class)
    images = offsets[labels] + noise * rng.normal(size=(len(labels), 3, size, size))
    return ArrayData(images.astype(np.float32), labels.astype(np.int64), num_classes)


def write_synthetic_folder(root, num_classes: int = 4, per_class: int = 10, size: int = 16, seed: int = 0) -> Path:
    """Write a tiny PNG image-folder dataset (used by tests and demos)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        d = root / f"class_{c:02d}"
        d.mkdir(parents=True, exist_ok=True)
        base = rng.integers(0, 256, size=3)
        for i in range(per_class):
            px = np.clip(base + rng.normal(0, 30, size=(size, size, 3)), 0, 255).astype(np.uint8)
            Image.fromarray(px).save(d / f"img_{i:03d}.png")
    return root
