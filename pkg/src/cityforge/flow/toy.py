"""Two-dimensional ring target for exercising the trainer end to end."""

from __future__ import annotations

import numpy as np

from .model import FlowConfig
from .training import TrainingExample

TOY_CONFIG = FlowConfig(channels=2, resolution=1, d_model=64, heads=2, blocks=2, d_cond=32)


def ring_samples(n: int, rng: np.random.Generator, radius: float = 1.0, width: float = 0.1) -> np.ndarray:
    theta = rng.uniform(0.0, 2 * np.pi, n)
    r = radius + width * rng.standard_normal(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def toy_conditions(config: FlowConfig = TOY_CONFIG, tokens: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal((tokens, config.d_cond)), rng.standard_normal((tokens, config.d_cond))


def ring_dataset(n: int = 4096, seed: int = 0, config: FlowConfig = TOY_CONFIG) -> list[TrainingExample]:
    """Each example is one ring point as a (1, 2) token; no structural prior."""
    rng = np.random.Generator(np.random.Philox(seed))
    pts = ring_samples(n, rng)
    c_t, c_f = toy_conditions(config, seed=seed + 1)
    return [TrainingExample(p[None, :], c_t, c_f) for p in pts]
