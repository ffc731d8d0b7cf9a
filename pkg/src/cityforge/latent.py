"""Structure latents: surrogate encoder, channel normalization, prior/noise blending.

The surrogate encoder stands in for a pretrained sparse-structure VAE. It
average-pools occupancy to an M^3 grid and lifts each pooled scalar ``s``
into C channels with a fixed affine map ``a * s + b`` derived from a seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError
from .voxels import GridSpec, VoxelGrid

ULAT_MAGIC = b"ULAT"
STD_FLOOR = 1e-6


class Latent:
    """Dense M^3 x C coefficient grid, stored as ``values[i, j, k, c]``."""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 4 or not (values.shape[0] == values.shape[1] == values.shape[2]):
            raise ValidationError(f"latent values must have shape (M, M, M, C), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("latent contains non-finite values")
        self.values = values

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int]:
        return self.resolution, self.channels

    def tokens(self) -> np.ndarray:
        """(M^3, C) view in row-major cell order."""
        return self.values.reshape(-1, self.channels)

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, resolution: int) -> "Latent":
        tokens = np.asarray(tokens)
        return cls(tokens.reshape(resolution, resolution, resolution, -1))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Latent):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"Latent(M={self.resolution}, C={self.channels})"

    def to_bytes(self) -> bytes:
        return ULAT_MAGIC + struct.pack("<II", self.resolution, self.channels) + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Latent":
        if data[:4] != ULAT_MAGIC:
            raise FormatError("not a ULAT file")
        m, c = struct.unpack_from("<II", data, 4)
        body = data[12:]
        if len(body) != m**3 * c * 4:
            raise FormatError("truncated ULAT payload")
        return cls(np.frombuffer(body, dtype="<f4").reshape(m, m, m, c).astype(np.float64))


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValidationError("mean and std must be matching 1D arrays")
        if np.any(std <= 0):
            raise ValidationError("channel std must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self) -> int:
        return len(self.mean)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ChannelStats":
        d = json.loads(text)
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def lift_params(channels: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seed-derived affine lift (a, b); |a_c| is kept in [0.5, 1.5]."""
    rng = np.random.Generator(np.random.Philox(seed))
    mag = rng.uniform(0.5, 1.5, channels)
    sign = np.where(rng.random(channels) < 0.5, -1.0, 1.0)
    b = rng.normal(0.0, 1.0, channels)
    return mag * sign, b


def pool_occupancy(grid: VoxelGrid, resolution: int) -> np.ndarray:
    n = grid.resolution
    if resolution < 1 or n % resolution:
        raise ValueError(f"grid resolution {n} is not divisible by latent resolution {resolution}")
    f = n // resolution
    occ = grid.occupancy.astype(np.float64)
    return occ.reshape(resolution, f, resolution, f, resolution, f).mean(axis=(1, 3, 5))


def encode_surrogate(grid: VoxelGrid, channels: int = 8, seed: int = 0, resolution: int = 16) -> Latent:
    s = pool_occupancy(grid, resolution)
    a, b = lift_params(channels, seed)
    return Latent(s[..., None] * a + b)


def decode_surrogate(
    latent: Latent,
    seed: int = 0,
    spec: GridSpec | None = None,
    threshold: float = 0.5,
) -> VoxelGrid:
    """Least-squares inverse of the affine lift, thresholded to occupancy."""
    a, b = lift_params(latent.channels, seed)
    s = ((latent.values - b) @ a) / float(a @ a)
    if spec is None:
        spec = GridSpec(latent.resolution, 1.0)
    if spec.resolution != latent.resolution:
        raise ValueError("grid spec resolution must match the latent resolution")
    return VoxelGrid(spec, s > threshold)


def fit_channel_stats(latents: list[Latent]) -> ChannelStats:
    """Per-channel mean and population std over every cell of every latent."""
    if len(latents) == 0:
        raise ValueError("fit_channel_stats needs at least one latent")
    if len({l.channels for l in latents}) != 1:
        raise ValueError("latents disagree on channel count")
    stacked = np.concatenate([l.tokens() for l in latents], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return ChannelStats(mean, std)


def latent_norm(z: Latent, stats: ChannelStats) -> Latent:
    if z.channels != stats.channels:
        raise ValueError(f"latent has {z.channels} channels, stats have {stats.channels}")
    return Latent((z.values - stats.mean) / stats.std)


def latent_denorm(z: Latent, stats: ChannelStats) -> Latent:
    if z.channels != stats.channels:
        raise ValueError(f"latent has {z.channels} channels, stats have {stats.channels}")
    return Latent(z.values * stats.std + stats.mean)


def cosine_interpolate(prior: Latent, eps: Latent, lam: float) -> Latent:
    """Blend a normalized prior latent with noise: cos(lam*pi/2)*prior + sin(lam*pi/2)*eps."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if prior.values.shape != eps.values.shape:
        raise ValueError("prior and noise shapes differ")
    # exact endpoints; cos(pi/2) is 6e-17, not 0
    if lam == 0.0:
        return Latent(prior.values.copy())
    if lam == 1.0:
        return Latent(eps.values.copy())
    theta = lam * math.pi / 2
    return Latent(math.cos(theta) * prior.values + math.sin(theta) * eps.values)


def sample_noise(shape: tuple[int, int], seed: int) -> Latent:
    """Standard normal latent from a counter-based (Philox) generator."""
    m, c = shape
    rng = np.random.Generator(np.random.Philox(seed))
    return Latent(rng.standard_normal((m, m, m, c)))
