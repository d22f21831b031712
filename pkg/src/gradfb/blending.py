"""Feedback blending across a batch attack sequence.

The running composite is ``alpha * previous + (1 - alpha) * newest``. Under the
``fb`` policy only successful reconstructions enter the composite; under
``nf`` every attack output does. Either way the first composite needs two
incorporated images.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attack import AttackResult, random_image


def blend(c_a, c_b, alpha: float) -> np.ndarray:
    c_a = np.asarray(c_a, dtype=np.float64)
    c_b = np.asarray(c_b, dtype=np.float64)
    if c_a.shape != c_b.shape:
        raise ValueError(f"cannot blend shapes {c_a.shape} and {c_b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return c_a.copy()
    if alpha == 0.0:
        return c_b.copy()
    return alpha * c_a + (1.0 - alpha) * c_b


@dataclass(frozen=True)
class FeedbackState:
    alpha: float = 0.5
    policy: str = "fb"
    success_count: int = 0
    incorporated: int = 0
    first_success: np.ndarray | None = None
    running_blend: np.ndarray | None = None

    def __post_init__(self):
        if self.policy not in ("fb", "nf"):
            raise ValueError(f"unknown blending policy {self.policy!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def next_init(state: FeedbackState, rng_seed, shape) -> np.ndarray:
    """The running composite if one exists, else a uniform random image."""
    if state.running_blend is not None:
        return state.running_blend
    return random_image(shape, rng_seed)


def update(state: FeedbackState, result: AttackResult) -> FeedbackState:
    successes = state.success_count + int(result.success)
    if state.policy == "fb" and not result.success:
        return state
    image = np.clip(np.asarray(result.reconstructed_image, dtype=np.float64), 0.0, 1.0)
    n = state.incorporated + 1
    if n == 1:
        return replace(state, success_count=successes, incorporated=n, first_success=image)
    base = state.first_success if n == 2 else state.running_blend
    return replace(state, success_count=successes, incorporated=n,
                   running_blend=blend(base, image, state.alpha))
