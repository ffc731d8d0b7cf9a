"""Backward integration of the learned field from t = 1 to t = 0."""

from __future__ import annotations

import torch

from ..errors import NumericError


def _euler(model, x, t, dt, c_t, c_f):
    return x - dt * model(x, t, c_t, c_f)


def _heun(model, x, t, dt, c_t, c_f):
    v1 = model(x, t, c_t, c_f)
    x_pred = x - dt * v1
    v2 = model(x_pred, t - dt, c_t, c_f)
    return x - 0.5 * dt * (v1 + v2)


SOLVERS = {"euler": _euler, "heun": _heun}


@torch.no_grad()
def sample(model, init: torch.Tensor, c_t: torch.Tensor, c_f: torch.Tensor, steps: int = 16, solver: str = "euler") -> torch.Tensor:
    """Integrate x <- x - dt * v(x, t) starting from ``init`` at t = 1.

    ``init`` replaces pure noise: pass the prior/noise blend to start from
    the structural prior.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    try:
        step = SOLVERS[solver]
    except KeyError:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(SOLVERS)}") from None
    x = init.clone()
    b = x.shape[0]
    dt = 1.0 / steps
    for s in range(steps):
        t = torch.full((b,), 1.0 - s * dt, dtype=x.dtype)
        x = step(model, x, t, dt, c_t, c_f)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite state at step {s}")
    return x
