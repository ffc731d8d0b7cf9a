"""Rectified-flow forward process, conditional flow-matching loss and gradient checks."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch


def forward_interpolate(x0, eps, t):
    """x(t) = (1 - t) * x0 + t * eps.

    ``t`` may be a scalar or one value per batch row; works on numpy arrays
    and torch tensors alike.
    """
    t_arr = t if isinstance(t, torch.Tensor) else np.asarray(t, dtype=float)
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise ValueError("t must lie in [0, 1]")
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError("x0 and eps shapes differ")
    if t_arr.ndim == 1 and x0.ndim > 1:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    if isinstance(x0, torch.Tensor) and not isinstance(t_arr, torch.Tensor):
        t_arr = torch.as_tensor(t_arr, dtype=x0.dtype)
    return (1 - t_arr) * x0 + t_arr * eps


@dataclass
class FlowBatch:
    x0: torch.Tensor  # (B, L, C)
    eps: torch.Tensor  # (B, L, C)
    t: torch.Tensor  # (B,)
    c_t: torch.Tensor  # (B, K, d_cond) or (K, d_cond)
    c_f: torch.Tensor

    def to(self, dtype) -> "FlowBatch":
        return FlowBatch(*(getattr(self, f).to(dtype) for f in ("x0", "eps", "t", "c_t", "c_f")))

    def __len__(self) -> int:
        return self.x0.shape[0]


def cfm_loss(model, batch: FlowBatch) -> torch.Tensor:
    """Mean squared error between v_theta(x(t), t) and the target eps - x0."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    xt = forward_interpolate(batch.x0, batch.eps, batch.t)
    v = model(xt, batch.t, batch.c_t, batch.c_f)
    return ((v - (batch.eps - batch.x0)) ** 2).mean()


def _relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model,
    batch: FlowBatch,
    epsilon: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error of autograd gradients against central differences.

    Runs on a float64 copy of ``model``; ``samples`` parameter entries are
    drawn without replacement (all entries when fewer exist).
    """
    model = copy.deepcopy(model).double()
    batch = batch.to(torch.float64)
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    cfm_loss(model, batch).backward()
    grads = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()

    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.Generator(np.random.Philox(seed))
    picks = np.arange(total) if samples >= total else np.sort(rng.choice(total, samples, replace=False))

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            view = params[k].view(-1)
            i = int(flat - offsets[k])
            orig = view[i].item()
            view[i] = orig + epsilon
            lp = cfm_loss(model, batch).item()
            view[i] = orig - epsilon
            lm = cfm_loss(model, batch).item()
            view[i] = orig
            numeric = (lp - lm) / (2 * epsilon)
            worst = max(worst, _relative_error(float(grads[flat]), numeric, floor))
    return worst
