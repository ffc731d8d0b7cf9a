"""Condition tokens from grayscale rasters, plus simple top/frontal renders.

These are stand-ins for pretrained image-encoder features: each
non-overlapping patch is flattened and mapped through a fixed random
linear projection. Real embeddings can be passed as tokens directly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError
from ..voxels import VoxelGrid


@dataclass(frozen=True, eq=False)
class ConditionTokens:
    tokens: np.ndarray  # (K, d_cond)
    source: str = "top"

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float64)
        if tok.ndim != 2 or tok.shape[0] == 0:
            raise ValueError("condition tokens must be a non-empty (K, d_cond) array")
        if not np.all(np.isfinite(tok)):
            raise ValueError("condition tokens must be finite")
        if self.source not in ("top", "frontal"):
            raise ValueError(f"unknown condition source {self.source!r}")
        object.__setattr__(self, "tokens", tok)


def patch_projection(patch: int, d_cond: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return rng.standard_normal((patch * patch, d_cond)) / patch


def featurize_image(raster: np.ndarray, patch: int, seed: int = 0, d_cond: int = 32, source: str = "top") -> ConditionTokens:
    img = np.asarray(raster, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("raster must be a 2D grayscale image")
    h, w = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    patches = img.reshape(h // patch, patch, w // patch, patch).swapaxes(1, 2).reshape(-1, patch * patch)
    return ConditionTokens(patches @ patch_projection(patch, d_cond, seed), source)


def _resample(img: np.ndarray, size: int) -> np.ndarray:
    rows = ((np.arange(size) + 0.5) * img.shape[0] / size).astype(np.int64)
    cols = ((np.arange(size) + 0.5) * img.shape[1] / size).astype(np.int64)
    return img[np.ix_(rows, cols)]


def render_top(grid: VoxelGrid, size: int = 32) -> np.ndarray:
    """Height-coded top view in [0, 1]; rows are y ascending."""
    occ = grid.occupancy
    n = grid.resolution
    top = np.where(occ.any(axis=2), n - np.argmax(occ[:, :, ::-1], axis=2), 0) / n
    return _resample(top.T, size)


def render_front(grid: VoxelGrid, size: int = 32) -> np.ndarray:
    """Depth-coded frontal view looking north; rows are z ascending."""
    occ = grid.occupancy
    n = grid.resolution
    hit = occ.any(axis=1)  # (x, z)
    depth = np.where(hit, 1.0 - np.argmax(occ, axis=1) / n, 0.0)
    return _resample(depth.T, size)


def read_pgm(data: bytes) -> np.ndarray:
    """Binary P5 PGM into a float image in [0, 1], first row = bottom."""
    m = re.match(rb"P5\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise FormatError("not a binary PGM (P5) image")
    w, h, maxval = (int(g) for g in m.groups())
    dt = np.uint8 if maxval < 256 else ">u2"
    body = np.frombuffer(data[m.end():], dtype=dt, count=w * h)
    return body.reshape(h, w)[::-1].astype(np.float64) / maxval


def write_pgm(image: np.ndarray) -> bytes:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + np.round(img[::-1] * 255).astype(np.uint8).tobytes()
