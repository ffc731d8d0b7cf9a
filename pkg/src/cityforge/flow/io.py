"""Checkpoint (UFLW) and loss-trace serialization."""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError

UFLW_MAGIC = b"UFLW"
UFLW_VERSION = 1


def checkpoint_bytes(model: torch.nn.Module) -> bytes:
    """Header then, per tensor: u32 name length, name, u32 rank, u32 dims, f32 data."""
    buf = io.BytesIO()
    buf.write(UFLW_MAGIC + struct.pack("<I", UFLW_VERSION))
    for name, tensor in sorted(model.state_dict().items()):
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != UFLW_MAGIC:
        raise FormatError("not a UFLW checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != UFLW_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise FormatError(f"truncated tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    return out


def load_into(model: torch.nn.Module, data: bytes) -> torch.nn.Module:
    tensors = read_tensors(data)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise FormatError(f"checkpoint does not match model (missing {missing[:3]}, extra {extra[:3]})")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, model expects {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    model.load_state_dict(state)
    return model


def save_checkpoint(model: torch.nn.Module, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def loss_trace_csv(losses) -> str:
    lines = ["step,loss"] + [f"{i},{v:.9g}" for i, v in enumerate(losses)]
    return "\n".join(lines) + "\n"
