"""uDiT velocity network: DiT blocks with adaLN modulation and long skips.

Input is the channel concatenation ``[z_t ; z_d]`` of shape ``(B, 2D, L)``;
output is a ``(B, D, L)`` velocity. Block ``layers-1-i`` receives a linear
fusion of its predecessor's output and block ``i``'s output, for
``i < layers // 2``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError
from .numeric import layer_norm, matmul, softmax


@dataclass
class UditConfig:
    latent_dim: int = 128
    layers: int = 12
    embed_dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    max_len: int = 1500
    extend_positions: bool = True
    freq_embed_dim: int = 256

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.layers < 1 or self.mlp_ratio <= 0 or self.max_len < 1:
            raise ConfigError("layers, mlp_ratio and max_len must be positive")

    @property
    def skip_pairs(self) -> list[tuple[int, int]]:
        return [(i, self.layers - 1 - i) for i in range(self.layers // 2)]

    def to_dict(self) -> dict:
        return asdict(self)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


def sinusoidal(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half).to(t.dtype)
    args = t[:, None] * freqs[None] * 1000.0
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal features of ``t`` in [0, 1] through a two-layer MLP."""

    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if ((t < 0) | (t > 1)).any():
            raise ContractError("flow time must lie in [0, 1]")
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal(t.to(dtype), self.freq_dim))


def time_embed(t, embedder: TimestepEmbedder) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=embedder.mlp[0].weight.dtype).reshape(-1)
    return embedder(t)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads

        def split(y):
            return y.reshape(b, n, h, d // h).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        w = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(d // h), axis=-1)
        out = matmul(w, v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class DiTBlock(nn.Module):
    """Pre-norm block with adaLN-Zero conditioning on the time embedding."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.attn = Attention(dim, heads)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.adaLN_modulation(c).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(layer_norm(x), shift1, scale1))
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(layer_norm(x), shift2, scale2))
        return x


def dit_block(x: torch.Tensor, te: torch.Tensor, block: DiTBlock) -> torch.Tensor:
    """Single-sequence helper: ``x`` is ``(L, dim)``, ``te`` is ``(dim,)``."""
    return block(x.unsqueeze(0), te.reshape(1, -1)).squeeze(0)


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, out_dim)
        for lin in (self.adaLN_modulation[-1], self.linear):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(layer_norm(x), shift, scale))


def _sincos_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(dim // 2, dtype=torch.float64)[None]
    ang = pos / (10000 ** (2 * i / dim))
    emb = torch.zeros(n, dim, dtype=torch.float64)
    emb[:, 0::2] = torch.sin(ang)
    emb[:, 1::2] = torch.cos(ang)[:, : dim - dim // 2]
    return emb.float()


class UDiT(nn.Module):
    def __init__(self, cfg: UditConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.in_proj = nn.Linear(2 * cfg.latent_dim, d)
        self.pos_embed = nn.Parameter(_sincos_positions(cfg.max_len, d) * 0.1)
        self.t_embedder = TimestepEmbedder(d, cfg.freq_embed_dim)
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.skip_fusion = nn.ModuleDict(
            {str(deep): nn.Linear(2 * d, d) for _, deep in cfg.skip_pairs})
        self.final = FinalLayer(d, cfg.latent_dim)

    def positions(self, n: int) -> torch.Tensor:
        if n <= self.cfg.max_len:
            return self.pos_embed[:n]
        if not self.cfg.extend_positions:
            raise ContractError(f"sequence of {n} frames exceeds max_len {self.cfg.max_len}")
        pe = self.pos_embed.T.unsqueeze(0)
        return F.interpolate(pe, size=n, mode="linear", align_corners=True)[0].T

    def forward(self, z_cond: torch.Tensor, t, skips: bool = True) -> torch.Tensor:
        squeeze = z_cond.dim() == 2
        if squeeze:
            z_cond = z_cond.unsqueeze(0)
        b, ch, n = z_cond.shape
        if ch != 2 * self.cfg.latent_dim:
            raise DimensionError(f"expected {2 * self.cfg.latent_dim} input channels, got {ch}")
        t = torch.as_tensor(t, dtype=z_cond.dtype).reshape(-1)
        if t.numel() == 1 and b > 1:
            t = t.expand(b)
        c = self.t_embedder(t)
        x = self.in_proj(z_cond.transpose(1, 2)) + self.positions(n)
        shallow: dict[int, torch.Tensor] = {}
        pair_of = {deep: sh for sh, deep in self.cfg.skip_pairs}
        prev = x
        for i, blk in enumerate(self.blocks):
            if skips and i in pair_of:
                prev = self.skip_fusion[str(i)](torch.cat([prev, shallow[pair_of[i]]], dim=-1))
            prev = blk(prev, c)
            shallow[i] = prev
        out = self.final(prev, c).transpose(1, 2)
        return out.squeeze(0) if squeeze else out


def udit_forward(z_cond: torch.Tensor, t, model: UDiT) -> torch.Tensor:
    return model(z_cond, t)
