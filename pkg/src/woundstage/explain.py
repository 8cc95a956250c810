"""LayerCAM, guided backpropagation, their fusion and heat-map overlays.

All gradients are of the pre-softmax logit ``y_c``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .datapipe import resize_bilinear, write_png
from .errors import DimensionError, UsageError
from .network import ModelGraph


@dataclass
class ActivationMap:
    class_id: int
    values: np.ndarray
    layer_id: int


@dataclass
class SaliencyImage:
    values: np.ndarray
    raw_min: float
    raw_max: float


def default_layer(model: ModelGraph) -> int:
    """The layer feeding the final max-pool, i.e. the rectified output of the last conv."""
    pools = [i for i, s in enumerate(model.layers) if s.kind == "maxpool"]
    if not pools or pools[-1] == 0:
        convs = [i for i, s in enumerate(model.layers) if s.kind == "conv"]
        if not convs:
            raise UsageError("model has no convolutional layer to explain")
        return convs[-1]
    return pools[-1] - 1


def _check_spatial(model: ModelGraph, layer_id: int) -> None:
    if not 0 <= layer_id < len(model.layers):
        raise UsageError(f"layer_id {layer_id} outside [0, {len(model.layers)})")
    flat = [i for i, s in enumerate(model.layers) if s.kind == "flatten"]
    if flat and layer_id >= flat[0]:
        raise UsageError(f"layer {layer_id} ({model.layers[layer_id].kind}) has no spatial extent")


def _single(x) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3:
        raise DimensionError(f"expected one [C, H, W] image, got shape {x.shape}")
    return x


def feature_gradients(model: ModelGraph, x, class_id: Optional[int], layer_id: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Feature maps ``A`` at ``layer_id`` and ``dy_c/dA``; returns (A, g, c)."""
    _check_spatial(model, layer_id)
    capture: Dict[int, T.Tensor] = {layer_id: None}
    logits = model.forward(_single(x), capture=capture)
    c = int(np.argmax(logits.data)) if class_id is None else int(class_id)
    if not 0 <= c < logits.shape[-1]:
        raise UsageError(f"class_id {c} outside [0, {logits.shape[-1]})")
    feat = capture[layer_id]
    logits[c].backward()
    grad = feat.grad if feat.grad is not None else np.zeros_like(feat.data)
    return feat.data, grad, c


def layercam_from_gradients(A: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``relu(sum_k relu(g_k) * A_k)`` over the channel axis."""
    if A.shape != g.shape or A.ndim != 3:
        raise DimensionError(f"feature maps {A.shape} and gradients {g.shape} must be matching [K, h, w]")
    m = np.maximum(g, 0) * A
    return np.maximum(m.sum(axis=0), 0)


def layercam(model: ModelGraph, x, class_id: Optional[int] = None, layer_id: Optional[int] = None) -> ActivationMap:
    layer_id = default_layer(model) if layer_id is None else layer_id
    A, g, c = feature_gradients(model, x, class_id, layer_id)
    return ActivationMap(c, layercam_from_gradients(A, g), layer_id)


def guided_backprop(model: ModelGraph, x, class_id: Optional[int] = None) -> np.ndarray:
    """Input gradient of ``y_c`` where every ReLU passes only positive gradient at positive input."""
    xt = T.Tensor(_single(x).astype(model.dtype), requires_grad=True)
    logits = model.forward(xt)
    c = int(np.argmax(logits.data)) if class_id is None else int(class_id)
    logits[c].backward(guided=True)
    return xt.grad


def fuse(amap: ActivationMap | np.ndarray, gbp: np.ndarray) -> SaliencyImage:
    """Upsampled activation map times the positive guided gradient, min-max scaled.

    A colour gradient ``[C, H, W]`` is reduced by the per-pixel maximum of its
    positive parts.
    """
    cam = amap.values if isinstance(amap, ActivationMap) else np.asarray(amap, dtype=np.float64)
    gbp = np.asarray(gbp, dtype=np.float64)
    positive = np.maximum(gbp, 0)
    if positive.ndim == 3:
        positive = positive.max(axis=0)
    h, w = positive.shape
    up = resize_bilinear(cam.astype(np.float64), h, w)
    if up.shape != positive.shape:
        raise DimensionError(f"upsampled map {up.shape} does not match gradient image {positive.shape}")
    prod = up * positive
    lo, hi = float(prod.min()), float(prod.max())
    values = (prod - lo) / (hi - lo) if hi > lo else np.zeros_like(prod)
    return SaliencyImage(values, lo, hi)


# fixed blue -> green -> red ramp
COLORMAP_STOPS = np.array([0.0, 0.5, 1.0])
COLORMAP_RGB = np.array([[0.0, 0.0, 255.0], [0.0, 255.0, 0.0], [255.0, 0.0, 0.0]])


def colormap(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, COLORMAP_STOPS, COLORMAP_RGB[:, ch]) for ch in range(3)], axis=-1)


def render_overlay(image: np.ndarray, saliency: SaliencyImage | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the colour-mapped saliency over an 8-bit RGB image."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    s = saliency.values if isinstance(saliency, SaliencyImage) else np.asarray(saliency)
    image = np.asarray(image)
    if image.shape[:2] != s.shape:
        raise DimensionError(f"image {image.shape[:2]} and saliency {s.shape} differ in size")
    out = (1.0 - alpha) * image.astype(np.float64) + alpha * colormap(s)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def write_explanation(out_dir, image_id: str, image: np.ndarray, amap: ActivationMap,
                      saliency: SaliencyImage, alpha: float = 0.5) -> Dict[str, Path]:
    """Raw map as PNG + CSV, fused saliency PNG and overlay PNG."""
    out_dir = Path(out_dir)
    stem = f"{image_id}_c{amap.class_id}_l{amap.layer_id}"
    cam = amap.values
    scaled = cam / cam.max() if cam.max() > 0 else cam
    paths = {
        "cam_png": write_png(np.rint(255 * scaled), out_dir / f"{stem}_layercam.png"),
        "saliency_png": write_png(np.rint(255 * saliency.values), out_dir / f"{stem}_saliency.png"),
        "overlay_png": write_png(render_overlay(image, saliency, alpha), out_dir / f"{stem}_overlay.png"),
    }
    csv_path = out_dir / f"{stem}_layercam.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in cam:
            w.writerow([repr(float(v)) for v in row])
    paths["cam_csv"] = csv_path
    return paths
