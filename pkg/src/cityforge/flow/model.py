"""Vector-field transformer with parallel top-view / frontal-view cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ..errors import NumericError


@dataclass(frozen=True)
class FlowConfig:
    channels: int = 8
    resolution: int = 16
    d_model: int = 64
    heads: int = 2
    blocks: int = 2
    d_cond: int = 32
    ffn_mult: int = 4
    time_freqs: int = 32

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")

    @property
    def tokens(self) -> int:
        return self.resolution**3


class Attention(nn.Module):
    """Multi-head attention; cross-attention when a context is passed."""

    def __init__(self, d_model: int, heads: int, context_dim: int | None = None):
        super().__init__()
        kv = d_model if context_dim is None else context_dim
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(kv, d_model)
        self.v = nn.Linear(kv, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        ctx = x if context is None else context
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, n, h, dh).transpose(1, 2)
        k = self.k(ctx).view(b, ctx.shape[1], h, dh).transpose(1, 2)
        v = self.v(ctx).view(b, ctx.shape[1], h, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model * mult)
        self.fc2 = nn.Linear(d_model * mult, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class DualPathwayBlock(nn.Module):
    """Pre-norm block: self-attention, averaged dual cross-attention, FFN.

    Residual connections wrap the self-attention, the fused cross-attention
    output and the FFN. Both pathways query the post-self-attention state;
    their complete outputs (after output projection) are averaged.
    """

    def __init__(self, d_model: int, heads: int, d_cond: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_top = Attention(d_model, heads, d_cond)
        self.cross_app = Attention(d_model, heads, d_cond)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult)

    def pathways(self, h, c_t, c_f):
        f_self = h + self.self_attn(self.norm1(h))
        q = self.norm2(f_self)
        return f_self, self.cross_top(q, c_t), self.cross_app(q, c_f)

    def forward(self, h: torch.Tensor, c_t: torch.Tensor, c_f: torch.Tensor) -> torch.Tensor:
        f_self, f_top, f_app = self.pathways(h, c_t, c_f)
        fused = f_self + 0.5 * (f_top + f_app)
        return fused + self.ffn(self.norm3(fused))

    def tie_pathways(self) -> None:
        """Copy the top-view pathway weights into the appearance pathway."""
        self.cross_app.load_state_dict(self.cross_top.state_dict())


class SinglePathwayBlock(nn.Module):
    """Reference block with a single cross-attention (no fusion)."""

    def __init__(self, d_model: int, heads: int, d_cond: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross = Attention(d_model, heads, d_cond)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, ffn_mult)

    @classmethod
    def from_dual(cls, block: DualPathwayBlock, pathway: str = "top") -> "SinglePathwayBlock":
        d_model = block.norm1.normalized_shape[0]
        ref = cls(d_model, block.self_attn.heads, block.cross_top.k.in_features, block.ffn.fc1.out_features // d_model)
        ref = ref.to(next(block.parameters()).dtype)
        for name in ("norm1", "self_attn", "norm2", "norm3", "ffn"):
            getattr(ref, name).load_state_dict(getattr(block, name).state_dict())
        ref.cross.load_state_dict((block.cross_top if pathway == "top" else block.cross_app).state_dict())
        return ref

    def forward(self, h, c):
        h = h + self.self_attn(self.norm1(h))
        h = h + self.cross(self.norm2(h), c)
        return h + self.ffn(self.norm3(h))


def dual_block(f_in: torch.Tensor, c_t: torch.Tensor, c_f: torch.Tensor, block: DualPathwayBlock) -> torch.Tensor:
    d_model = block.norm1.normalized_shape[0]
    d_cond = block.cross_top.k.in_features
    if f_in.shape[-1] != d_model:
        raise ValueError(f"token states have width {f_in.shape[-1]}, block expects {d_model}")
    for name, c in (("c_t", c_t), ("c_f", c_f)):
        if c.shape[-1] != d_cond:
            raise ValueError(f"{name} has width {c.shape[-1]}, block expects {d_cond}")
    return block(f_in, c_t, c_f)


def timestep_features(t: torch.Tensor, n: int) -> torch.Tensor:
    half = n // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def position_encoding(resolution: int, d_model: int) -> np.ndarray:
    """Additive sinusoidal encoding of each cell's (i, j, k) index."""
    idx = np.stack(np.meshgrid(*[np.arange(resolution)] * 3, indexing="ij"), -1).reshape(-1, 3)
    nf = d_model // 6
    enc = np.zeros((len(idx), d_model))
    if nf == 0:
        return enc
    freqs = 1.0 / (10000.0 ** (np.arange(nf) / nf))
    for axis in range(3):
        args = idx[:, axis : axis + 1] * freqs[None]
        enc[:, axis * 2 * nf : axis * 2 * nf + nf] = np.sin(args)
        enc[:, axis * 2 * nf + nf : (axis + 1) * 2 * nf] = np.cos(args)
    return enc


class FlowModel(nn.Module):
    """v_theta(x, t | c_t, c_f) over latent tokens of shape (B, M^3, C)."""

    def __init__(self, config: FlowConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.embed = nn.Linear(config.channels, d)
        self.time_mlp = nn.Sequential(nn.Linear(config.time_freqs, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            DualPathwayBlock(d, config.heads, config.d_cond, config.ffn_mult) for _ in range(config.blocks)
        )
        self.out_norm = nn.LayerNorm(d)
        self.unembed = nn.Linear(d, config.channels)
        pos = torch.from_numpy(position_encoding(config.resolution, d)).float()
        self.register_buffer("pos", pos, persistent=False)

    @classmethod
    def from_seed(cls, config: FlowConfig, seed: int = 0, tie_pathways: bool = True, dtype=torch.float32) -> "FlowModel":
        model = cls(config)
        init_parameters(model, seed)
        if tie_pathways:
            for blk in model.blocks:
                blk.tie_pathways()
        return model.to(dtype)

    def forward(self, x: torch.Tensor, t: torch.Tensor, c_t: torch.Tensor, c_f: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        c_t = _batched(c_t, b)
        c_f = _batched(c_f, b)
        h = self.embed(x) + self.pos.to(x.dtype) + self.time_mlp(timestep_features(t, self.config.time_freqs))[:, None]
        for i, blk in enumerate(self.blocks):
            h = blk(h, c_t, c_f)
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite activations after block {i}")
        return self.unembed(self.out_norm(h))


def _batched(c: torch.Tensor, b: int) -> torch.Tensor:
    return c.unsqueeze(0).expand(b, *c.shape) if c.dim() == 2 else c


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic init: N(0, 1/fan_in) weights, zero biases, unit norms."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            mod_name = name.rsplit(".", 1)[0]
            module = model.get_submodule(mod_name)
            if isinstance(module, nn.LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] if p.dim() > 1 else p.shape[0]
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) / math.sqrt(fan_in))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
