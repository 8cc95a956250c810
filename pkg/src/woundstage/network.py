"""VGG-style models: construction, fine-tuning surgery and checkpoints."""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .errors import CorruptHeaderError, DimensionError, PayloadLengthError, ShapeMismatchError, UsageError

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "linear")

VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
VGG16_HIDDEN = (4096, 4096)
TINY_BLOCKS = ((8,), (16,), (32,), (64,))
TINY_HIDDEN = (64,)

PRESETS = {
    "vgg16_shape": (VGG16_BLOCKS, VGG16_HIDDEN, 224),
    "vgg_tiny": (TINY_BLOCKS, TINY_HIDDEN, 64),
}


@dataclass
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_features: int = 0
    out_features: int = 0
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise UsageError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self) -> Dict[str, tuple]:
        if self.kind == "conv":
            return {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                    "bias": (self.out_channels,)}
        if self.kind == "linear":
            return {"weight": (self.out_features, self.in_features), "bias": (self.out_features,)}
        return {}


def conv(cin, cout, k=3, padding=1) -> LayerSpec:
    return LayerSpec("conv", in_channels=cin, out_channels=cout, kernel=k, padding=padding)


def pool(k=2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=k, stride=k)


def dense(fin, fout) -> LayerSpec:
    return LayerSpec("linear", in_features=fin, out_features=fout)


@dataclass
class ModelConfig:
    preset: str = "vgg_tiny"
    input_size: Optional[int] = None
    num_classes: int = 6

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.input_size is None:
            self.input_size = PRESETS[self.preset][2]
        if self.num_classes < 2:
            raise UsageError("num_classes must be at least 2")

    def layer_specs(self) -> List[LayerSpec]:
        blocks, hidden, _ = PRESETS[self.preset]
        size = self.input_size
        if size % (2 ** len(blocks)):
            raise DimensionError(
                f"input size {size} is not divisible by 2**{len(blocks)} required by the pooling cascade")
        layers, cin = [], 3
        for widths in blocks:
            for cout in widths:
                layers += [conv(cin, cout), LayerSpec("relu")]
                cin = cout
            layers.append(pool())
        layers.append(LayerSpec("flatten"))
        fin = cin * (size // 2 ** len(blocks)) ** 2
        for width in hidden:
            layers += [dense(fin, width), LayerSpec("relu")]
            fin = width
        layers.append(dense(fin, self.num_classes))
        return layers


class ModelGraph:
    """Ordered layer list plus one parameter dict per layer.

    ``forward(x, start, stop)`` runs layers ``[start, stop)`` which lets
    callers feed an intermediate feature map back in (saliency oracles,
    cached frozen prefixes).
    """

    def __init__(self, layers: List[LayerSpec], params: List[Dict[str, T.Tensor]], *,
                 preset: str = "custom", input_size: int = 0, seed: int = 0, epoch: int = 0):
        if len(layers) != len(params):
            raise UsageError("layers and params differ in length")
        self.layers = layers
        self.params = params
        self.preset = preset
        self.input_size = input_size
        self.seed = seed
        self.epoch = epoch
        self._sync_trainable()

    def _sync_trainable(self) -> None:
        for spec, p in zip(self.layers, self.params):
            for t in p.values():
                t.requires_grad = spec.trainable

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    @property
    def dtype(self) -> np.dtype:
        for p in self.params:
            for t in p.values():
                return t.dtype
        return T.get_default_dtype()

    def conv_blocks(self) -> List[List[int]]:
        """Conv layer indices grouped by the max-pool that closes each block."""
        blocks, current = [], []
        for i, spec in enumerate(self.layers):
            if spec.kind == "conv":
                current.append(i)
            elif spec.kind == "maxpool" and current:
                blocks.append(current)
                current = []
        if current:
            blocks.append(current)
        return blocks

    def parameters(self, trainable_only: bool = True) -> List[T.Tensor]:
        out = []
        for spec, p in zip(self.layers, self.params):
            if trainable_only and not spec.trainable:
                continue
            out += [p[name] for name in ("weight", "bias") if name in p]
        return out

    def num_parameters(self, kinds=("conv", "linear")) -> int:
        return sum(t.data.size for spec, p in zip(self.layers, self.params)
                   if spec.kind in kinds for t in p.values())

    def forward(self, x, start: int = 0, stop: Optional[int] = None,
                capture: Optional[Dict[int, T.Tensor]] = None) -> T.Tensor:
        h = T.as_tensor(x)
        if h.dtype != self.dtype:
            h = T.Tensor(h.data.astype(self.dtype), requires_grad=h.requires_grad)
        stop = len(self.layers) if stop is None else stop
        for i in range(start, stop):
            spec, p = self.layers[i], self.params[i]
            if spec.kind == "conv":
                h = T.conv2d(h, p["weight"], p["bias"], spec.stride, spec.padding)
            elif spec.kind == "relu":
                h = T.relu(h)
            elif spec.kind == "maxpool":
                h = T.maxpool2d(h, spec.kernel, spec.stride)
            elif spec.kind == "flatten":
                h = T.flatten(h)
            else:
                h = T.linear(h, p["weight"], p["bias"])
            if capture is not None and i in capture:
                h.retain_grad()
                capture[i] = h
        return h

    __call__ = forward

    def copy(self) -> "ModelGraph":
        params = [{k: T.Tensor(v.data.copy()) for k, v in p.items()} for p in self.params]
        return ModelGraph(copy.deepcopy(self.layers), params, preset=self.preset,
                          input_size=self.input_size, seed=self.seed, epoch=self.epoch)

    def state(self) -> List[Dict[str, np.ndarray]]:
        return [{k: v.data.copy() for k, v in p.items()} for p in self.params]

    def load_state(self, state: List[Dict[str, np.ndarray]]) -> None:
        for p, s in zip(self.params, state):
            for k in p:
                p[k].data = s[k].copy()


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float, dtype) -> np.ndarray:
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


HEAD_STD = 0.01


def init_layer_params(spec: LayerSpec, rng: np.random.Generator, dtype, head: bool = False):
    shapes = spec.param_shapes()
    if not shapes:
        return {}
    wshape = shapes["weight"]
    if head:
        # near-uniform softmax at start: uniform with std HEAD_STD
        bound = HEAD_STD * math.sqrt(3.0)
        weight = rng.uniform(-bound, bound, size=wshape).astype(dtype)
    else:
        weight = _kaiming_uniform(rng, wshape, int(np.prod(wshape[1:])), math.sqrt(2.0), dtype)
    return {"weight": T.Tensor(weight), "bias": T.Tensor(np.zeros(shapes["bias"], dtype=dtype))}


def from_layers(layers: List[LayerSpec], seed: int = 0, dtype=None, **meta) -> ModelGraph:
    """Initialise an arbitrary layer list (Kaiming-uniform weights, zero biases).

    The output layer is drawn at a small fixed scale instead so a fresh
    classifier starts close to the uniform distribution.
    """
    dtype = T.get_default_dtype() if dtype is None else np.dtype(dtype)
    rng = np.random.default_rng(seed)
    last = max(i for i, s in enumerate(layers) if s.kind in ("conv", "linear"))
    params = [init_layer_params(s, rng, dtype, head=i == last)
              for i, s in enumerate(layers)]
    return ModelGraph(layers, params, seed=seed, **meta)


def build_model(config: ModelConfig, seed: int = 0, dtype=None) -> ModelGraph:
    return from_layers(config.layer_specs(), seed=seed, dtype=dtype,
                       preset=config.preset, input_size=config.input_size)


def finetune_surgery(model: ModelGraph, freeze_blocks: Optional[int] = None,
                     num_classes: int = 6, seed: int = 0) -> ModelGraph:
    """Freeze the first ``freeze_blocks`` conv blocks and swap in a fresh head.

    ``freeze_blocks=None`` freezes all but the last conv block.
    """
    out = model.copy()
    blocks = out.conv_blocks()
    if freeze_blocks is None:
        freeze_blocks = max(len(blocks) - 1, 0)
    if not 0 <= freeze_blocks <= len(blocks):
        raise UsageError(f"freeze_blocks={freeze_blocks} outside [0, {len(blocks)}]")
    frozen = {i for b in blocks[:freeze_blocks] for i in b}
    for i, spec in enumerate(out.layers):
        spec.trainable = i not in frozen
    head = max(i for i, s in enumerate(out.layers) if s.kind == "linear")
    spec = out.layers[head]
    spec.out_features = num_classes
    out.params[head] = init_layer_params(spec, np.random.default_rng(seed), out.dtype, head=True)
    out._sync_trainable()
    out.epoch = 0
    return out


def frozen_prefix(model: ModelGraph) -> int:
    """Number of leading layers whose output does not depend on any trainable parameter."""
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        if p and spec.trainable:
            return i
    return len(model.layers)


# --------------------------------------------------------------------------
# checkpoints: <u32 LE header length><UTF-8 JSON header><LE float32 arrays>


def _header(model: ModelGraph) -> dict:
    return {
        "preset": model.preset,
        "input_size": model.input_size,
        "seed": model.seed,
        "epoch": model.epoch,
        "layers": [asdict(s) for s in model.layers],
        "shapes": [{k: list(v.shape) for k, v in p.items()} for p in model.params],
    }


def checkpoint_bytes(model: ModelGraph) -> bytes:
    header = json.dumps(_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(p[k].data.astype("<f4").tobytes()
                       for p in model.params for k in ("weight", "bias") if k in p)
    return struct.pack("<I", len(header)) + header + payload


def save_checkpoint(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path, config: Optional[ModelConfig] = None, dtype=np.float32) -> ModelGraph:
    """Read a checkpoint; with ``config`` the layer shapes must match that preset."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise CorruptHeaderError(f"{path}: file too short for a header length prefix")
    (hlen,) = struct.unpack("<I", raw[:4])
    if 4 + hlen > len(raw):
        raise CorruptHeaderError(f"{path}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[4:4 + hlen].decode("utf-8"))
        layers = [LayerSpec(**d) for d in header["layers"]]
        shapes = [{k: tuple(v) for k, v in s.items()} for s in header["shapes"]]
        meta = {k: header[k] for k in ("preset", "input_size", "seed", "epoch")}
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, UsageError) as exc:
        raise CorruptHeaderError(f"{path}: unreadable header ({exc})") from exc
    if len(shapes) != len(layers):
        raise CorruptHeaderError(f"{path}: {len(layers)} layers but {len(shapes)} shape entries")
    for i, (spec, s) in enumerate(zip(layers, shapes)):
        if s != spec.param_shapes():
            raise CorruptHeaderError(f"{path}: layer {i} shapes {s} disagree with its spec")

    if config is not None:
        expected = config.layer_specs()
        for i in range(max(len(expected), len(layers))):
            want = expected[i].param_shapes() if i < len(expected) else None
            got = shapes[i] if i < len(shapes) else None
            kind_w = expected[i].kind if i < len(expected) else None
            kind_g = layers[i].kind if i < len(layers) else None
            if want != got or kind_w != kind_g:
                raise ShapeMismatchError(
                    f"layer {i}: checkpoint has {kind_g} {got}, config {config.preset} expects {kind_w} {want}")

    need = 4 * sum(int(np.prod(v)) for s in shapes for v in s.values())
    payload = raw[4 + hlen:]
    if len(payload) != need:
        raise PayloadLengthError(f"{path}: payload has {len(payload)} bytes, header implies {need}")
    params, offset = [], 0
    for s in shapes:
        p = {}
        for k in ("weight", "bias"):
            if k in s:
                count = int(np.prod(s[k]))
                arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(s[k])
                p[k] = T.Tensor(arr.astype(dtype))
                offset += 4 * count
        params.append(p)
    return ModelGraph(layers, params, **meta)
