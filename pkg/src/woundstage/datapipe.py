"""Manifest handling, stratified splitting, x12 augmentation, oversampling, resizing."""
from __future__ import annotations

import csv
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DataError, ManifestError

CLASSES = ("Control", "Day0", "Day3", "Day7", "Day10", "DelayDay10")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class Sample:
    image_path: str
    label: str
    dataset_id: int = 1

    @property
    def label_index(self) -> int:
        return CLASS_INDEX[self.label]


@dataclass
class Manifest:
    samples: List[Sample] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def counts(self) -> Dict[str, int]:
        c = Counter(s.label for s in self.samples)
        return {name: c.get(name, 0) for name in CLASSES}

    def by_class(self) -> Dict[str, List[Sample]]:
        groups: Dict[str, List[Sample]] = {name: [] for name in CLASSES}
        for s in self.samples:
            groups[s.label].append(s)
        return groups

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.image_path)
        return p if p.is_absolute() else self.root / p

    def labels(self) -> np.ndarray:
        return np.array([s.label_index for s in self.samples], dtype=np.int64)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    samples = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label", "dataset_id"]:
            raise ManifestError(f"{path}:1: header must be 'path,label,dataset_id', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            image_path, label, dataset_id = (x.strip() for x in row)
            if label not in CLASS_INDEX:
                raise ManifestError(f"{path}:{lineno}: unknown label {label!r}")
            try:
                ds = int(dataset_id)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: dataset_id {dataset_id!r} is not an integer") from None
            samples.append(Sample(image_path, label, ds))
    return Manifest(samples, root=path.parent)


def write_manifest(manifest: Manifest | Sequence[Sample], path, root: Optional[Path] = None) -> Path:
    """Write ``path,label,dataset_id``; relative paths are re-based onto ``path``'s directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(manifest, Manifest):
        samples, root = manifest.samples, manifest.root
    else:
        samples = list(manifest)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "dataset_id"])
        for s in samples:
            p = Path(s.image_path)
            if root is not None and not p.is_absolute():
                p = Path(_relpath(root / p, path.parent))
            w.writerow([p.as_posix(), s.label, s.dataset_id])
    return path


def _relpath(target: Path, start: Path) -> str:
    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


# --------------------------------------------------------------------------
# splitting


def allocate(n: int, ratios: Sequence[float]) -> List[int]:
    """Floor of each share, then hand out the remainder by largest fraction.

    Ties go to the earlier part (train before validation before test).
    """
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    parts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - parts[i]), i))
    for i in order[: n - sum(parts)]:
        parts[i] += 1
    return parts


@dataclass
class SplitResult:
    train: Manifest
    validation: Manifest
    test: Manifest
    seed: int

    def parts(self) -> Tuple[Manifest, Manifest, Manifest]:
        return self.train, self.validation, self.test


def stratified_split(manifest: Manifest, ratios: Sequence[float] = (6, 2, 2), seed: int = 0) -> SplitResult:
    """Per-class seeded shuffle, then :func:`allocate` the class into the parts.

    Classes smaller than the number of parts simply leave some parts empty.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    rng = np.random.default_rng(seed)
    out: List[List[Sample]] = [[], [], []]
    for name, members in manifest.by_class().items():
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        start = 0
        for part, size in zip(out, allocate(len(members), ratios)):
            part.extend(shuffled[start:start + size])
            start += size
    return SplitResult(*(Manifest(p, root=manifest.root) for p in out), seed=seed)


# --------------------------------------------------------------------------
# augmentation and balancing

AUGMENT_NAMES = tuple(f"rot{r}_{f}" for r in (0, 90, 180, 270) for f in ("id", "hflip", "vflip"))


def augment_one(image: np.ndarray, index: int) -> np.ndarray:
    """Transform ``index`` of :data:`AUGMENT_NAMES`: rotate (counter-clockwise), then flip."""
    rot, flip = divmod(index, 3)
    out = np.rot90(image, k=rot, axes=(0, 1))
    if flip == 1:
        out = out[:, ::-1]
    elif flip == 2:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


def augment12(image: np.ndarray) -> List[np.ndarray]:
    """All four rotations times {identity, horizontal flip, vertical flip}.

    Dihedral duplicates (e.g. rot180+hflip == vflip) are kept on purpose so
    every image yields exactly twelve outputs.
    """
    return [augment_one(image, i) for i in range(12)]


def oversample_balance(per_class: Dict[str, list], seed: int = 0) -> Dict[str, list]:
    """Top each class up to the largest class by uniform draws with replacement."""
    if not per_class or all(len(v) == 0 for v in per_class.values()):
        raise DataError("oversample_balance needs at least one non-empty class")
    empty = [k for k, v in per_class.items() if len(v) == 0]
    if empty:
        raise DataError(f"cannot oversample empty classes: {empty}")
    target = max(len(v) for v in per_class.values())
    rng = np.random.default_rng(seed)
    out = {}
    for name, members in per_class.items():
        extra = rng.integers(0, len(members), size=target - len(members))
        out[name] = list(members) + [members[i] for i in extra]
    return out


def split_summary(split: SplitResult, seed: int = 0) -> Dict[str, Dict[str, int]]:
    """Per-class counts at each stage: split parts, augmented and balanced training set."""
    train = split.train.counts()
    augmented = {k: 12 * v for k, v in train.items()}
    present = {k: list(range(v)) for k, v in augmented.items() if v}
    balanced = {k: len(v) for k, v in oversample_balance(present, seed).items()} if present else {}
    val, test = split.validation.counts(), split.test.counts()
    return {name: {"train": train[name], "validation": val[name], "test": test[name],
                   "augmented_train": augmented[name], "balanced_train": balanced.get(name, 0)}
            for name in CLASSES}


# --------------------------------------------------------------------------
# pixels


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``[H, W]`` or ``[H, W, C]`` array.

    Integer input is rounded and clipped back to its dtype.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    src = np.asarray(image)
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return src.copy()
    data = src.astype(np.float64)

    def coords(n_out, n_in):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(out_h, h)
    x0, x1, fx = coords(out_w, w)
    if data.ndim == 3:
        fy, fx = fy[:, None, None], fx[None, :, None]
    else:
        fy, fx = fy[:, None], fx[None, :]
    top = data[y0][:, x0] * (1 - fx) + data[y0][:, x1] * fx
    bottom = data[y1][:, x0] * (1 - fx) + data[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(src.dtype)
    return out.astype(src.dtype if np.issubdtype(src.dtype, np.floating) else np.float64)


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD, dtype=np.float32) -> np.ndarray:
    """8-bit ``[H, W, 3]`` RGB to channel-first ``(x/255 - mean)/std``."""
    x = np.asarray(image, dtype=np.float64) / 255.0
    x = (x - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(x.transpose(2, 0, 1)).astype(dtype)


def read_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(image: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if image.ndim == 2 else "RGB"
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode=mode).save(path, optimize=False)
    return path


def load_arrays(manifest: Manifest, size: int, mean=IMAGENET_MEAN, std=IMAGENET_STD,
                dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """Read, resize and normalise every image into ``X[N,3,size,size]`` and ``y[N]``."""
    X = np.empty((len(manifest), 3, size, size), dtype=dtype)
    cache: Dict[Path, np.ndarray] = {}
    for i, s in enumerate(manifest):
        p = manifest.resolve(s)
        if p not in cache:
            cache[p] = normalize(resize_bilinear(read_rgb(p), size, size), mean, std, dtype)
        X[i] = cache[p]
    return X, manifest.labels()


def prepare_training_set(split: SplitResult, out_dir, size: int, seed: int = 0) -> Manifest:
    """Augment x12 (writing PNGs), then oversample to balance; returns the balanced manifest.

    Images are resized after augmentation so rotated rectangles line up.
    """
    out_dir = Path(out_dir)
    per_class: Dict[str, List[Sample]] = {}
    for name, members in split.train.by_class().items():
        if not members:
            continue
        expanded = []
        for s in members:
            img = read_rgb(split.train.resolve(s))
            stem = Path(s.image_path).stem
            for k, aug in enumerate(augment12(img)):
                rel = Path("augmented") / name / f"{stem}_{AUGMENT_NAMES[k]}.png"
                write_png(resize_bilinear(aug, size, size), out_dir / rel)
                expanded.append(Sample(rel.as_posix(), s.label, s.dataset_id))
        per_class[name] = expanded
    balanced = oversample_balance(per_class, seed)
    samples = [s for name in CLASSES if name in balanced for s in balanced[name]]
    return Manifest(samples, root=out_dir)


def write_split(split: SplitResult, out_dir, seed: int = 0) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {name: write_manifest(part, out_dir / f"{name}.csv")
             for name, part in zip(("train", "validation", "test"), split.parts())}
    summary = out_dir / "split_summary.json"
    summary.write_text(json.dumps({"seed": split.seed, "classes": split_summary(split, seed)}, indent=2) + "\n")
    paths["summary"] = summary
    return paths
