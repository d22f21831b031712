"""Victim side: the gradient one client shares after a single-sample step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Model, forward


@dataclass(frozen=True)
class GradientSet:
    """Per-layer parameter gradients, in the model's segment order."""

    grads: tuple[np.ndarray, ...]
    source_index: int = 0

    def flat(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.grads])

    @property
    def bias_grad(self) -> np.ndarray:
        """Gradient of the final dense layer's bias."""
        return self.grads[-1]


@dataclass(frozen=True)
class Batch:
    images: tuple[np.ndarray, ...]
    labels: tuple[int, ...]
    provenance: str = ""

    def __len__(self):
        return len(self.images)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    v = np.zeros(num_classes)
    v[label] = 1.0
    return v


def _check_sample(model: Model, image: np.ndarray, label: int):
    if tuple(np.shape(image)) != model.config.input_shape:
        raise ValueError(f"image shape {np.shape(image)} does not match model input {model.config.input_shape}")
    if not 0 <= int(label) < model.config.num_classes:
        raise ValueError(f"label {label} outside [0, {model.config.num_classes})")


def compute_client_gradient(model: Model, image, label: int, source_index: int = 0) -> GradientSet:
    image = np.asarray(getattr(image, "data", image), dtype=np.float64)
    _check_sample(model, image, label)
    params = model.param_tensors(requires_grad=True)
    logits = forward(model, Tensor(image), params)
    loss = ad.softmax_cross_entropy(logits, Tensor(one_hot(label, model.config.num_classes)))
    grads = ad.grad(loss, params)
    return GradientSet(tuple(g.data for g in grads), source_index)
