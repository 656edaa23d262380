"""Datasets: class-folder image loading, preprocessing, synthetic tasks.

A dataset maps integer class ids to arrays of examples [ch, H, W] with
values in [0, 1].  Every class carries a split tag (train / val / test);
episode sampling draws only within a split, so the three label spaces
never overlap.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# Rec. 601 luminance weights for collapsing color to grayscale.
_LUMA = np.array([0.299, 0.587, 0.114])

_GOLDEN = 2.399963229728653  # golden angle in radians, spreads class parameters


@dataclass
class Dataset:
    """Immutable-by-convention image dataset with per-class split tags."""

    classes: dict  # class id -> float64 array [n, ch, H, W]
    splits: dict = field(default_factory=dict)  # class id -> split tag
    note: str = ""
    outliers: dict = field(default_factory=dict)  # class id -> bool array [n]

    def class_ids(self, split: str | None = None) -> list:
        if split is None:
            return sorted(self.classes)
        return sorted(c for c, s in self.splits.items() if s == split)

    def examples(self, class_id: int) -> np.ndarray:
        return self.classes[class_id]

    def outlier_flags(self, class_id: int) -> np.ndarray:
        if class_id in self.outliers:
            return self.outliers[class_id]
        return np.zeros(len(self.classes[class_id]), dtype=bool)

    @property
    def example_shape(self):
        first = next(iter(self.classes.values()))
        return first.shape[1:]

    def tag_all(self, split: str) -> None:
        for c in self.classes:
            self.splits[c] = split


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [ch, H, W] image.

    Source coordinates follow the half-pixel convention
    ``src = (dst + 0.5) * (in / out) - 0.5`` clamped to the valid range,
    and each output pixel blends its four nearest source neighbors.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    ch, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def load_image_dataset(
    root_path,
    target_size: int,
    grayscale: bool = True,
    invert: bool = False,
) -> Dataset:
    """Load a ``root/<class>/<image>.png`` tree into a dataset.

    Classes are numbered in lexicographic directory order.  Undecodable
    files are skipped with a warning; an empty class is an error.
    """
    from pathlib import Path

    from PIL import Image

    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"dataset root {root} contains no class directories")

    classes = {}
    skipped = 0
    for cid, cdir in enumerate(class_dirs):
        examples = []
        for f in sorted(cdir.iterdir()):
            if not f.is_file():
                continue
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception:
                skipped += 1
                log.warning("skipping undecodable image %s", f)
                continue
            arr = arr.transpose(2, 0, 1)  # [3, H, W]
            if grayscale:
                arr = (arr * _LUMA[:, None, None]).sum(axis=0, keepdims=True)
            if invert:
                arr = 1.0 - arr
            arr = resize_bilinear(arr, target_size, target_size)
            examples.append(np.clip(arr, 0.0, 1.0))
        if not examples:
            raise DataError(f"class directory {cdir} holds no decodable images")
        classes[cid] = np.stack(examples)
    if skipped:
        log.warning("skipped %d undecodable files under %s", skipped, root)
    ds = Dataset(classes=classes, note=f"images:{root}")
    ds.tag_all("train")
    return ds


def augment_rotations(ds: Dataset) -> Dataset:
    """Spawn 4 classes per class: 0/90/180/270-degree rotated copies.

    Rotated variants are distinct classes (class id c becomes 4c..4c+3) and
    inherit the parent's split tag, so a class and its rotations always live
    in the same split.
    """
    ch, h, w = ds.example_shape
    if h != w:
        raise DataError(f"rotation augmentation needs square images, got {h}x{w}")
    classes = {}
    splits = {}
    outliers = {}
    for cid in ds.class_ids():
        arr = ds.classes[cid]
        for r in range(4):
            new_id = 4 * cid + r
            classes[new_id] = np.rot90(arr, k=r, axes=(2, 3)).copy() if r else arr.copy()
            if cid in ds.splits:
                splits[new_id] = ds.splits[cid]
            if cid in ds.outliers:
                outliers[new_id] = ds.outliers[cid].copy()
    return Dataset(classes=classes, splits=splits, note=ds.note + "+rot90", outliers=outliers)


def split_classes(ds: Dataset, counts, rng: np.random.Generator) -> Dataset:
    """Randomly assign every class to train/val/test with the given counts."""
    n_train, n_val, n_test = counts
    ids = ds.class_ids()
    if n_train + n_val + n_test != len(ids):
        raise DataError(
            f"split counts {counts} do not sum to the {len(ids)} available classes"
        )
    perm = rng.permutation(len(ids))
    splits = {}
    for rank, pos in enumerate(perm):
        cid = ids[pos]
        if rank < n_train:
            splits[cid] = "train"
        elif rank < n_train + n_val:
            splits[cid] = "val"
        else:
            splits[cid] = "test"
    return Dataset(classes=ds.classes, splits=splits, note=ds.note, outliers=ds.outliers)


def _class_pattern(index: int, image_size: int, jitter: np.ndarray) -> np.ndarray:
    """Deterministic pattern for one class: an oriented bar or a blob.

    Orientation and position walk a golden-angle sequence so patterns stay
    well separated however many classes are requested.
    """
    s = image_size
    angle = (index * _GOLDEN + jitter[0] * 0.2) % np.pi
    ring = 0.18 + 0.10 * ((index * 0.6180339887) % 1.0)
    pos_angle = index * _GOLDEN * 1.7 + jitter[1] * 0.3
    cy = s * (0.5 + ring * np.sin(pos_angle))
    cx = s * (0.5 + ring * np.cos(pos_angle))
    if index % 2 == 0:  # bar
        sig_major, sig_minor = 0.28 * s, 0.055 * s
    else:  # blob, slightly elongated
        sig_major, sig_minor = 0.13 * s, 0.085 * s
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    img = 0.95 * np.exp(-0.5 * ((u / sig_major) ** 2 + (v / sig_minor) ** 2))
    return img[None, :, :]  # [1, s, s]


def synth_dataset(
    num_classes: int,
    per_class: int,
    image_size: int,
    noise_sd: float,
    outlier_rate: float,
    seed: int,
) -> Dataset:
    """Procedural dataset of noisy oriented-bar / blob classes.

    With probability ``outlier_rate`` an example is drawn from a uniformly
    random other class's pattern instead; such planted outliers keep their
    nominal label and are flagged per example.
    """
    if num_classes < 1 or per_class < 1 or image_size < 1:
        raise ValueError("num_classes, per_class and image_size must be positive")
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError(f"outlier_rate must lie in [0, 1), got {outlier_rate}")
    rng = np.random.default_rng(seed)
    jitters = rng.normal(size=(num_classes, 2))
    patterns = [_class_pattern(i, image_size, jitters[i]) for i in range(num_classes)]

    classes = {}
    outliers = {}
    for cid in range(num_classes):
        examples = np.empty((per_class, 1, image_size, image_size))
        flags = np.zeros(per_class, dtype=bool)
        for i in range(per_class):
            src = cid
            if outlier_rate > 0.0 and rng.random() < outlier_rate:
                src = int(rng.integers(num_classes - 1))
                if src >= cid:
                    src += 1
                flags[i] = True
            img = patterns[src]
            if noise_sd > 0.0:
                img = img + rng.normal(0.0, noise_sd, size=img.shape)
            examples[i] = np.clip(img, 0.0, 1.0)
        classes[cid] = examples
        outliers[cid] = flags
    note = (
        f"synth(classes={num_classes}, per_class={per_class}, size={image_size}, "
        f"noise_sd={noise_sd}, outlier_rate={outlier_rate}, seed={seed})"
    )
    ds = Dataset(classes=classes, note=note, outliers=outliers)
    ds.tag_all("train")
    return ds
