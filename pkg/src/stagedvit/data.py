"""Dataset ingestion, seeded subsampling/splitting, and synthetic data.

Folder layouts:

* unlabeled      — flat directory of PNG/JPEG files
* classification — one subdirectory per class; class index = lexicographic
                   rank of the subdirectory name
* segmentation   — ``images/`` plus ``trimaps/`` with matching file stems;
                   trimap pixel values are mapped {1 -> 0 fg, 2 -> 1 bg,
                   3 -> 2 unknown}

Images are resized to the working resolution bilinearly and scaled to
[0, 1]; trimaps are resized nearest-neighbor so the label set survives.
No mean/std standardization and no augmentation anywhere. File lists are
sorted lexicographically before any seeded operation, so every pipeline
(load -> subsample -> split) is a pure function of (folder, seeds).

The synthetic generator produces deterministic procedural images for the
same three kinds, which is what the offline tests and the desk-scale
experiment grid run on.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_dilation, binary_erosion

from .errors import DataError

log = logging.getLogger(__name__)

IMAGE_SIZE = 128
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
KINDS = ("unlabeled", "classification", "segmentation")
# raw trimap pixel -> class index {fg, bg, unknown}
TRIMAP_FILE_VALUES = {1: 0, 2: 1, 3: 2}


@dataclass
class Sample:
    """One item: image (3, S, S) float32 in [0,1]; label is None, an int
    class id, or a (S, S) uint8 trimap with values in {0,1,2}."""

    image: np.ndarray
    label: object = None
    name: str = ""


@dataclass(frozen=True)
class DatasetSpec:
    source: str  # directory path, or "synthetic"
    kind: str
    size_limit: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.size_limit is not None and self.size_limit < 0:
            raise DataError("size_limit must be non-negative")


def data_root() -> Path:
    return Path(os.environ.get("DATA_ROOT", "."))


def resolve_source(source) -> Path:
    """Resolve a dataset path, treating relative paths against $DATA_ROOT."""
    p = Path(source)
    return p if p.is_absolute() else data_root() / p


def _load_image(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_trimap(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L").resize((size, size), Image.NEAREST)
        raw = np.asarray(im)
    values = set(np.unique(raw).tolist())
    if not values <= set(TRIMAP_FILE_VALUES):
        raise DataError(f"trimap {path} holds pixel values {sorted(values)}, expected subset of {{1,2,3}}")
    out = np.zeros(raw.shape, dtype=np.uint8)
    for file_value, cls in TRIMAP_FILE_VALUES.items():
        out[raw == file_value] = cls
    return out


def _image_files(folder: Path):
    return sorted(p for p in folder.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def load_folder(spec: DatasetSpec, size: int = IMAGE_SIZE):
    """Load a dataset folder per ``spec``; see the module docstring for layouts.

    Unreadable files are skipped with a warning (and counted in the log);
    an empty result is an error. If ``spec.size_limit`` is set the loaded
    list is subsampled with ``spec.seed``.
    """
    root = resolve_source(spec.source)
    if not root.is_dir():
        raise DataError(f"dataset folder {root} does not exist")
    samples = []
    skipped = 0

    def try_load(fn, name):
        nonlocal skipped
        try:
            return fn()
        except (OSError, DataError) as e:
            skipped += 1
            log.warning("skipping unreadable sample %s: %s", name, e)
            return None

    if spec.kind == "unlabeled":
        for path in _image_files(root):
            image = try_load(lambda: _load_image(path, size), path.name)
            if image is not None:
                samples.append(Sample(image=image, name=path.stem))
    elif spec.kind == "classification":
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise DataError(f"classification folder {root} has no class subdirectories")
        for cls, cdir in enumerate(class_dirs):
            for path in _image_files(cdir):
                image = try_load(lambda: _load_image(path, size), f"{cdir.name}/{path.name}")
                if image is not None:
                    samples.append(Sample(image=image, label=cls, name=f"{cdir.name}/{path.stem}"))
    else:  # segmentation
        images_dir, trimaps_dir = root / "images", root / "trimaps"
        if not images_dir.is_dir() or not trimaps_dir.is_dir():
            raise DataError(f"segmentation folder {root} needs images/ and trimaps/ subdirectories")
        for path in _image_files(images_dir):
            tri_path = _find_trimap(trimaps_dir, path.stem)

            def load_pair():
                if tri_path is None:
                    raise DataError("no trimap with a matching stem")
                return _load_image(path, size), _load_trimap(tri_path, size)

            pair = try_load(load_pair, path.name)
            if pair is not None:
                samples.append(Sample(image=pair[0], label=pair[1], name=path.stem))

    if skipped:
        log.warning("skipped %d unreadable samples under %s", skipped, root)
    if not samples:
        raise DataError(f"no usable samples under {root}")
    if spec.size_limit is not None:
        samples = subsample(samples, spec.size_limit, spec.seed)
    return samples


def _find_trimap(trimaps_dir: Path, stem: str):
    for ext in sorted(IMAGE_EXTENSIONS):
        candidate = trimaps_dir / f"{stem}{ext}"
        if candidate.is_file():
            return candidate
    return None


def subsample(samples, n: int, seed: int):
    """n samples drawn uniformly without replacement, order-stable in the input.

    Draws are the first n entries of a seeded permutation, so for a fixed
    seed the subsets are nested across sizes: growing n only adds samples.
    """
    if n > len(samples):
        raise DataError(f"requested {n} samples but only {len(samples)} available")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(len(samples))[:n])
    return [samples[i] for i in keep]


def split_holdout(samples, n_test: int = 1000, seed: int = 42):
    """Disjoint, exhaustive (train, test) split with exactly n_test test samples."""
    if len(samples) <= n_test:
        raise DataError(f"cannot hold out {n_test} of {len(samples)} samples")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


# ---------------------------------------------------------------------------
# synthetic data


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy / size, xx / size


def _contrasting_color(rng, other, min_gap=0.3):
    # rejection-sample a color far enough from `other` that the foreground
    # is always separable from the background it sits on
    for _ in range(64):
        c = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        if np.abs(c - other).mean() >= min_gap:
            return c
    return np.clip(1.0 - other, 0.05, 0.95).astype(np.float32)


def _synth_scene(rng, size):
    """One shaded-background image with a single ellipse or rectangle, plus
    its {fg, bg, unknown} trimap (unknown = 2-pixel boundary band)."""
    yy, xx = _grid(size)
    base = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
    slope = rng.uniform(-0.3, 0.3, size=2).astype(np.float32)
    image = base[:, None, None] + (slope[0] * (xx - 0.5) + slope[1] * (yy - 0.5))[None]

    cx, cy = rng.uniform(0.3, 0.7, size=2)
    ax, bx = rng.uniform(0.15, 0.35, size=2)
    theta = rng.uniform(0.0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
    if rng.random() < 0.5:
        mask = (u / ax) ** 2 + (v / bx) ** 2 <= 1.0
    else:
        mask = (np.abs(u) <= ax) & (np.abs(v) <= bx)

    fg = _contrasting_color(rng, base)
    image = np.where(mask[None], fg[:, None, None], image)
    image = image + rng.normal(0.0, 0.02, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    band = binary_dilation(mask) & ~binary_erosion(mask)
    trimap = np.ones((size, size), dtype=np.uint8)  # background
    trimap[mask] = 0
    trimap[band] = 2
    return image, trimap


def _synth_texture(rng, cls, size):
    yy, xx = _grid(size)
    c0 = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    c1 = _contrasting_color(rng, c0)
    freq = rng.uniform(3.0, 7.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    two_pi = 2.0 * np.pi
    if cls == 0:
        t = np.sin(two_pi * freq * xx + phase)
    elif cls == 1:
        t = np.sin(two_pi * freq * yy + phase)
    elif cls == 2:
        t = np.sin(two_pi * freq * (xx + yy) / np.sqrt(2.0) + phase)
    elif cls == 3:
        t = np.sign(np.sin(two_pi * freq * xx + phase) * np.sin(two_pi * freq * yy + phase))
    elif cls == 4:
        r = np.hypot(xx - rng.uniform(0.35, 0.65), yy - rng.uniform(0.35, 0.65))
        t = np.sin(two_pi * freq * r + phase)
    elif cls == 5:
        cells = np.sign(rng.normal(size=(8, 8)))
        t = np.kron(cells, np.ones((size // 8 + 1, size // 8 + 1)))[:size, :size]
    else:
        raise ValueError(f"no texture class {cls}")
    w = ((t + 1.0) / 2.0).astype(np.float32)
    image = c0[:, None, None] * w[None] + c1[:, None, None] * (1.0 - w[None])
    image = image + rng.normal(0.0, 0.02, image.shape).astype(np.float32)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def synth_generate(kind: str, n: int, seed: int, size: int = IMAGE_SIZE):
    """Deterministic procedural dataset of the given kind.

    Segmentation scenes always contain all three trimap classes (checked;
    a scene failing the check is redrawn from the same stream).
    Classification labels are assigned round-robin over the 6 texture
    classes. Unlabeled reuses the scene images without their trimaps.
    """
    if kind not in KINDS:
        raise DataError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        name = f"synth-{kind}-{i:06d}"
        if kind == "classification":
            cls = i % 6
            samples.append(Sample(image=_synth_texture(rng, cls, size), label=cls, name=name))
            continue
        for _ in range(64):
            image, trimap = _synth_scene(rng, size)
            counts = np.bincount(trimap.ravel(), minlength=3)
            if counts.min() >= 8:
                break
        else:  # pragma: no cover - generator parameters keep shapes in frame
            raise DataError("could not draw a scene containing all three trimap classes")
        if kind == "segmentation":
            samples.append(Sample(image=image, label=trimap, name=name))
        else:
            samples.append(Sample(image=image, name=name))
    return samples


def load_dataset(spec: DatasetSpec, size: int = IMAGE_SIZE):
    """Materialize a DatasetSpec from a folder or the synthetic generator."""
    if spec.source == "synthetic":
        if spec.size_limit is None:
            raise DataError("synthetic datasets need size_limit to say how many samples to draw")
        return synth_generate(spec.kind, spec.size_limit, spec.seed, size=size)
    return load_folder(spec, size=size)
