"""Shared classifier: sigmoid LeNet-style convolution stack plus a dense head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_size: int
    padding: str = "same"


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    conv_layers: tuple[ConvSpec, ...] = (ConvSpec(12, 5, "same"), ConvSpec(12, 5, "same"))
    hidden_activation: str = "sigmoid"
    num_classes: int = 10
    init_seed: int = 0
    init_scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(*c) for c in self.conv_layers))


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def layer_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter tensor shapes in storage order (weights then bias, per layer)."""
    if len(config.input_shape) != 3 or min(config.input_shape) < 1:
        raise ValueError(f"input_shape must be (C, H, W) with positive extents, got {config.input_shape}")
    if config.num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if config.hidden_activation != "sigmoid":
        raise ValueError(f"unsupported activation {config.hidden_activation!r}")
    if config.init_scale < 0:
        raise ValueError("init_scale must be non-negative")
    c, h, w = config.input_shape
    shapes = []
    for i, spec in enumerate(config.conv_layers):
        k = spec.kernel_size
        if k < 1 or spec.out_channels < 1:
            raise ValueError(f"conv layer {i}: kernel_size and out_channels must be positive")
        if spec.padding == "same":
            if k % 2 == 0:
                raise ValueError(f"conv layer {i}: 'same' padding needs an odd kernel")
        elif spec.padding == "valid":
            h, w = h - k + 1, w - k + 1
        else:
            raise ValueError(f"conv layer {i}: unknown padding {spec.padding!r}")
        if h < 1 or w < 1:
            raise ValueError(f"conv layer {i}: output shape collapses to {h}x{w}")
        shapes.append((f"conv{i}.weight", (spec.out_channels, c, k, k)))
        shapes.append((f"conv{i}.bias", (spec.out_channels,)))
        c = spec.out_channels
    shapes.append(("fc.weight", (config.num_classes, c * h * w)))
    shapes.append(("fc.bias", (config.num_classes,)))
    return shapes


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    params: np.ndarray = field(repr=False)
    segments: tuple[Segment, ...] = field(repr=False)

    @property
    def num_params(self) -> int:
        return self.params.size

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params:
            raise ValueError(f"expected {self.num_params} values, got {flat.size}")
        return [flat[s.offset:s.offset + s.size].reshape(s.shape) for s in self.segments]

    def flatten(self, tensors) -> np.ndarray:
        parts = [np.asarray(getattr(t, "data", t), dtype=np.float64) for t in tensors]
        for seg, part in zip(self.segments, parts, strict=True):
            if part.shape != seg.shape:
                raise ValueError(f"{seg.name}: expected shape {seg.shape}, got {part.shape}")
        return np.concatenate([p.reshape(-1) for p in parts])

    def param_tensors(self, requires_grad: bool = False) -> list[Tensor]:
        return [Tensor(a, requires_grad=requires_grad) for a in self.unflatten(self.params)]


def build_model(config: ModelConfig | None = None) -> Model:
    config = config or ModelConfig()
    segments, offset = [], 0
    for name, shape in layer_shapes(config):
        seg = Segment(name, shape, offset)
        segments.append(seg)
        offset += seg.size
    rng = np.random.default_rng(config.init_seed)
    params = rng.uniform(-config.init_scale, config.init_scale, size=offset)
    params.setflags(write=False)
    return Model(config, params, tuple(segments))


def forward(model: Model, image: Tensor, params: list[Tensor] | None = None) -> Tensor:
    """Logits for one (C, H, W) image; ``params`` defaults to the model's own."""
    if tuple(image.shape) != model.config.input_shape:
        raise ValueError(f"image shape {image.shape} does not match model input {model.config.input_shape}")
    if params is None:
        params = model.param_tensors()
    h = image
    for i, spec in enumerate(model.config.conv_layers):
        h = ad.sigmoid(ad.conv2d(h, params[2 * i], params[2 * i + 1], spec.padding))
    w, b = params[-2], params[-1]
    h = ad.reshape(h, (h.size, 1))
    return ad.add(ad.reshape(ad.matmul(w, h), (w.shape[0],)), b)
