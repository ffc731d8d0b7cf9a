"""SGD training of the vector field on prior-blended flow-matching targets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import TrainingDivergedError
from .objective import FlowBatch, cfm_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    lambdas: tuple[float, ...] = (0.3, 0.5, 0.7)
    lods: tuple[int, ...] = (0, 1)
    optimizer: str = "sgd"
    divergence_factor: float = 1e3
    divergence_patience: int = 100


@dataclass
class TrainingExample:
    """One training item: target latent tokens, conditions and optional priors.

    ``priors`` maps LOD -> normalized prior latent tokens (L, C). Without
    priors the flow source is pure noise.
    """

    x0: np.ndarray
    c_t: np.ndarray
    c_f: np.ndarray
    priors: dict[int, np.ndarray] | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list[float] = field(default_factory=list)


def _optimizer(model, schedule: Schedule):
    if schedule.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=schedule.lr, momentum=schedule.momentum)
    if schedule.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=schedule.lr)
    raise ValueError(f"unknown optimizer {schedule.optimizer!r}")


def draw_batch(dataset: list[TrainingExample], schedule: Schedule, rng: np.random.Generator, dtype) -> FlowBatch:
    """Sample examples, t ~ U(0,1), noise, and per-example (LOD, lambda)."""
    idx = rng.integers(0, len(dataset), schedule.batch_size)
    t = rng.random(schedule.batch_size)
    shape = dataset[0].x0.shape
    noise = rng.standard_normal((schedule.batch_size, *shape))
    lods = rng.choice(np.asarray(schedule.lods), schedule.batch_size)
    lams = rng.choice(np.asarray(schedule.lambdas, dtype=float), schedule.batch_size)
    source = noise.copy()
    for row, i in enumerate(idx):
        priors = dataset[i].priors
        if priors:
            theta = lams[row] * math.pi / 2
            source[row] = math.cos(theta) * priors[int(lods[row])] + math.sin(theta) * noise[row]
    x0 = np.stack([dataset[i].x0 for i in idx])
    c_t = np.stack([dataset[i].c_t for i in idx])
    c_f = np.stack([dataset[i].c_f for i in idx])
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return FlowBatch(as_t(x0), as_t(source), as_t(t), as_t(c_t), as_t(c_f))


def train(model: torch.nn.Module, dataset: list[TrainingExample], schedule: Schedule, log_every: int = 0) -> TrainResult:
    """Minimise the flow-matching loss; the loss of every step is recorded.

    Raises TrainingDivergedError when the loss stays above
    ``divergence_factor`` times the first-step loss for
    ``divergence_patience`` consecutive steps.
    """
    if not dataset:
        raise ValueError("empty training set")
    if schedule.steps < 0 or schedule.batch_size < 1:
        raise ValueError("invalid schedule")
    dtype = next(model.parameters()).dtype
    rng = np.random.Generator(np.random.Philox(schedule.seed))
    opt = _optimizer(model, schedule)
    losses: list[float] = []
    initial = None
    strikes = 0
    model.train()
    for step in range(schedule.steps):
        batch = draw_batch(dataset, schedule, rng, dtype)
        opt.zero_grad()
        loss = cfm_loss(model, batch)
        loss.backward()
        opt.step()
        value = float(loss.item())
        losses.append(value)
        if initial is None:
            initial = value
        if not math.isfinite(value) or value > schedule.divergence_factor * initial:
            strikes += 1
            if strikes >= schedule.divergence_patience:
                raise TrainingDivergedError(f"loss diverged at step {step} ({value:g} vs initial {initial:g})")
        else:
            strikes = 0
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f", step, value)
    model.eval()
    return TrainResult(model, losses)
