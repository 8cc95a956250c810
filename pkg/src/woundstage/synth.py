"""Synthetic stand-ins for trichrome-stained histology.

No real stained sections ship with the package, so the desk-scale
experiments run on generated textures:

* ``target``: six classes of blue "fibres" on a pink/red background. The class
  index raises both the angular concentration of the fibre field (isotropic
  noise at class 0, near-parallel bundles at class 5) and the stripe
  frequency, mimicking rising coherency through the healing stages.
* ``source``: a disjoint six-class texture task (oriented or isotropic
  texture, crossed with three frequency bands, in random colours) used only
  for pretraining.

Nothing generated here is, or should be reported as, real tissue data.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .datapipe import CLASSES, Manifest, Sample, write_manifest, write_png

BACKGROUND = np.array([214.0, 120.0, 140.0])
CYTOPLASM = np.array([190.0, 55.0, 75.0])
COLLAGEN = np.array([45.0, 75.0, 185.0])

# per target class: von Mises concentration on the doubled angle, radial frequency (cycles/pixel)
TARGET_KAPPA = (0.0, 0.7, 1.6, 3.0, 6.0, 14.0)
TARGET_FREQ = (0.07, 0.09, 0.11, 0.13, 0.15, 0.17)
TARGET_BANDWIDTH = 0.025


@dataclass
class SynthResult:
    manifest_path: Path
    manifest: Manifest


def oriented_field(rng: np.random.Generator, size: int, freq: float, kappa: float,
                   theta: float, bandwidth: float = TARGET_BANDWIDTH) -> np.ndarray:
    """White noise filtered by a radial band-pass and an angular von Mises window.

    Returns a zero-mean, unit-variance field.
    """
    noise = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fx, fy)
    phi = np.arctan2(fy, fx)
    radial = np.exp(-0.5 * ((radius - freq) / bandwidth) ** 2)
    angular = np.exp(kappa * (np.cos(2.0 * (phi - theta)) - 1.0))
    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * radial * angular))
    field -= field.mean()
    return field / (field.std() + 1e-12)


def _stain(rng: np.random.Generator, density: np.ndarray) -> np.ndarray:
    size = density.shape[0]
    cyto = np.clip(oriented_field(rng, size, 0.04, 0.0, 0.0, 0.03), 0, None)[..., None] * 0.35
    base = BACKGROUND * (1 - cyto) + CYTOPLASM * cyto
    a = density[..., None]
    rgb = base * (1 - a) + COLLAGEN * a + rng.normal(0.0, 6.0, size=base.shape)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def target_image(rng: np.random.Generator, label: int, size: int = 64) -> np.ndarray:
    theta = rng.uniform(0, np.pi)
    field = oriented_field(rng, size, TARGET_FREQ[label], TARGET_KAPPA[label], theta)
    density = 1.0 / (1.0 + np.exp(-3.0 * (field - 0.2)))
    return _stain(rng, density)


SOURCE_CLASSES = ("oriented_low", "oriented_mid", "oriented_high",
                  "isotropic_low", "isotropic_mid", "isotropic_high")
# radial frequency band (cycles/pixel) per source slot, shared by the oriented and isotropic halves
SOURCE_BANDS = ((0.05, 0.08), (0.10, 0.14), (0.17, 0.22))


def source_image(rng: np.random.Generator, label: int, size: int = 64) -> np.ndarray:
    """Oriented-vs-isotropic texture at one of three frequency bands, random colours."""
    lo, hi = SOURCE_BANDS[label % 3]
    freq = rng.uniform(lo, hi)
    if label < 3:
        yy, xx = np.mgrid[0:size, 0:size].astype(float)
        angle = rng.uniform(0, np.pi)
        u = xx * np.cos(angle) + yy * np.sin(angle)
        value = 0.5 + 0.5 * np.sin(2 * np.pi * freq * u + rng.uniform(0, 2 * np.pi))
        value = np.clip(value + 0.25 * oriented_field(rng, size, freq, 0.0, 0.0, 0.02), 0, 1)
    else:
        field = oriented_field(rng, size, freq, 0.0, 0.0, 0.02)
        value = 1.0 / (1.0 + np.exp(-2.0 * field))
    dark, light = rng.uniform(0, 120, 3), rng.uniform(135, 255, 3)
    rgb = dark * (1 - value[..., None]) + light * value[..., None] + rng.normal(0, 8.0, (size, size, 3))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def generate(kind: str, n_per_class: int, seed: int, out_dir, size: int = 64) -> SynthResult:
    """Write ``n_per_class`` PNGs per class and a ``manifest.csv`` under ``out_dir``.

    Source-task labels reuse the six class names only as slots; the texture
    behind each slot is listed in :data:`SOURCE_CLASSES`.
    """
    if kind not in ("source", "target"):
        raise ValueError(f"kind must be 'source' or 'target', got {kind!r}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    out_dir = Path(out_dir)
    make = target_image if kind == "target" else source_image
    samples: List[Sample] = []
    for label, name in enumerate(CLASSES):
        rng = np.random.default_rng([seed, label, 0 if kind == "target" else 1])
        for i in range(n_per_class):
            rel = Path("images") / f"{name}_{i:04d}.png"
            write_png(make(rng, label, size), out_dir / rel)
            samples.append(Sample(rel.as_posix(), name, 1))
    manifest = Manifest(samples, root=out_dir)
    path = write_manifest(manifest, out_dir / "manifest.csv")
    return SynthResult(path, manifest)


def generate_arrays(kind: str, n_per_class: int, seed: int, size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """In-memory variant of :func:`generate`: uint8 images ``[N, H, W, 3]`` and labels."""
    make = target_image if kind == "target" else source_image
    images, labels = [], []
    for label in range(len(CLASSES)):
        rng = np.random.default_rng([seed, label, 0 if kind == "target" else 1])
        for _ in range(n_per_class):
            images.append(make(rng, label, size))
            labels.append(label)
    return np.stack(images), np.array(labels, dtype=np.int64)
