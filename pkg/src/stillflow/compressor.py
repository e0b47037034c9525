"""VAE audio compressor: waveform <-> D x L latent at ``sample_rate / hop`` frames/s.

Encoder: STFT -> real/imag as two channels -> 3x3 conv + group norm ->
TF-GridNet-style blocks -> per-frame projection to ``2D`` channels, split into
a mean and a softplus-positive standard deviation. The decoder mirrors it and
finishes with the inverse STFT.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, TrainingError
from .numeric import Rng, layer_norm, matmul, seeded_normal, softmax
from .signal import ComplexSpectrogram, SpectrogramConfig, istft, multires_stft_loss, stft


@dataclass
class CompressorConfig:
    latent_dim: int = 128
    sample_rate: int = 8000
    window_len: int = 320
    hop: int = 160
    fft_size: int = 320
    blocks: int = 3
    embed_dim: int = 128
    lstm_hidden: int = 256
    attn_heads: int = 4
    attn_qk_channels: int = 512
    kl_weight: float = 1e-4
    activation: str = "prelu"

    def __post_init__(self):
        if self.latent_dim <= 0:
            raise ConfigError("latent_dim must be positive")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be nonnegative")
        if self.sample_rate % self.hop:
            raise ConfigError("sample_rate must be a multiple of hop")
        if self.attn_qk_channels % self.attn_heads or self.embed_dim % self.attn_heads:
            raise ConfigError("attention channels must divide evenly across heads")
        if self.activation not in ("prelu", "gelu"):
            raise ConfigError(f"unknown activation '{self.activation}'")
        self.spectrogram  # validates window/hop

    @property
    def spectrogram(self) -> SpectrogramConfig:
        return SpectrogramConfig(self.window_len, self.hop, self.fft_size)

    @property
    def latent_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentGaussian:
    mu: torch.Tensor
    sigma: torch.Tensor

    @property
    def mean(self) -> torch.Tensor:
        return self.mu


def _activation(name: str, channels: int) -> nn.Module:
    return nn.PReLU(channels) if name == "prelu" else nn.GELU()


class ChannelNorm(nn.Module):
    """Layer norm over the trailing channel axis."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class TFGridBlock(nn.Module):
    """Frequency BLSTM, time BLSTM, then multi-head attention over frames.

    Each sub-module is wrapped in a residual connection and ends in a linear
    projection; zeroing the three projections turns the block into identity.
    Input and output are ``(batch, channels, freqs, frames)``.
    """

    def __init__(self, channels: int, hidden: int, heads: int, qk_channels: int, activation: str = "prelu"):
        super().__init__()
        self.channels, self.heads = channels, heads
        self.intra_norm = ChannelNorm(channels)
        self.intra_rnn = nn.LSTM(channels, hidden, batch_first=True, bidirectional=True)
        self.intra_proj = nn.Linear(2 * hidden, channels)
        self.inter_norm = ChannelNorm(channels)
        self.inter_rnn = nn.LSTM(channels, hidden, batch_first=True, bidirectional=True)
        self.inter_proj = nn.Linear(2 * hidden, channels)
        self.attn_norm = ChannelNorm(channels)
        self.q = nn.Linear(channels, qk_channels)
        self.k = nn.Linear(channels, qk_channels)
        self.v = nn.Linear(channels, channels)
        self.q_act = _activation(activation, qk_channels)
        self.k_act = _activation(activation, qk_channels)
        self.v_act = _activation(activation, channels)
        self.attn_proj = nn.Linear(channels, channels)

    def zero_output_projections(self) -> None:
        for proj in (self.intra_proj, self.inter_proj, self.attn_proj):
            nn.init.zeros_(proj.weight)
            nn.init.zeros_(proj.bias)

    @staticmethod
    def _act(act: nn.Module, x):
        # PReLU expects channels on axis 1
        if isinstance(act, nn.PReLU):
            return act(x.movedim(-1, 1)).movedim(1, -1)
        return act(x)

    def forward(self, x):
        b, c, f, t = x.shape
        # along frequency
        h = x.permute(0, 3, 2, 1).reshape(b * t, f, c)
        y, _ = self.intra_rnn(self.intra_norm(h))
        h = h + self.intra_proj(y)
        # along time
        h = h.reshape(b, t, f, c).transpose(1, 2).reshape(b * f, t, c)
        y, _ = self.inter_rnn(self.inter_norm(h))
        h = h + self.inter_proj(y)
        # attention over frames, all frequencies of a frame form one token
        h = h.reshape(b, f, t, c).transpose(1, 2)  # b, t, f, c
        n = self.attn_norm(h)
        hd = self.heads
        q = self._act(self.q_act, self.q(n)).reshape(b, t, f, hd, -1).permute(0, 3, 1, 2, 4).reshape(b, hd, t, -1)
        k = self._act(self.k_act, self.k(n)).reshape(b, t, f, hd, -1).permute(0, 3, 1, 2, 4).reshape(b, hd, t, -1)
        v = self._act(self.v_act, self.v(n)).reshape(b, t, f, hd, -1).permute(0, 3, 1, 2, 4)
        vd = v.shape[-1]
        v = v.reshape(b, hd, t, f * vd)
        w = softmax(matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1]), axis=-1)
        o = matmul(w, v).reshape(b, hd, t, f, vd).permute(0, 2, 3, 1, 4).reshape(b, t, f, c)
        h = h + self.attn_proj(o)
        return h.permute(0, 3, 2, 1)


def tf_block_forward(s: torch.Tensor, block: TFGridBlock) -> torch.Tensor:
    """Apply ``block`` to an embedded T-F tensor ``(channels, F, frames)`` or batched."""
    if s.dim() == 3:
        return block(s.unsqueeze(0)).squeeze(0)
    return block(s)


class Compressor(nn.Module):
    def __init__(self, cfg: CompressorConfig):
        super().__init__()
        self.cfg = cfg
        c, nf, d = cfg.embed_dim, cfg.n_freqs, cfg.latent_dim
        self.enc_conv = nn.Conv2d(2, c, 3, padding=1)
        self.enc_norm = nn.GroupNorm(1, c)
        self.enc_blocks = nn.ModuleList(
            TFGridBlock(c, cfg.lstm_hidden, cfg.attn_heads, cfg.attn_qk_channels, cfg.activation)
            for _ in range(cfg.blocks))
        self.enc_head = nn.Linear(c * nf, 2 * d)
        self.dec_in = nn.Linear(d, c * nf)
        self.dec_act = _activation(cfg.activation, c)
        self.dec_blocks = nn.ModuleList(
            TFGridBlock(c, cfg.lstm_hidden, cfg.attn_heads, cfg.attn_qk_channels, cfg.activation)
            for _ in range(cfg.blocks))
        self.dec_conv = nn.Conv2d(c, 2, 3, padding=1)

    def pad_to_hop(self, x: torch.Tensor) -> torch.Tensor:
        rem = (-x.shape[-1]) % self.cfg.hop
        return F.pad(x, (0, rem)) if rem else x

    def encode(self, x: torch.Tensor) -> LatentGaussian:
        """``x``: ``(N,)`` or ``(B, N)``; zero-padded to a hop multiple.

        Returns mean and std of shape ``(D, L)`` / ``(B, D, L)``, ``L = ceil(N / hop)``.
        """
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        x = self.pad_to_hop(x)
        s = stft(x, self.cfg.spectrogram).stacked()  # B, 2, F, L
        h = self.enc_norm(self.enc_conv(s))
        for blk in self.enc_blocks:
            h = blk(h)
        b, c, f, t = h.shape
        stats = self.enc_head(h.reshape(b, c * f, t).transpose(1, 2)).transpose(1, 2)
        mu, raw = stats.chunk(2, dim=1)
        sigma = F.softplus(raw)
        if squeeze:
            mu, sigma = mu.squeeze(0), sigma.squeeze(0)
        return LatentGaussian(mu, sigma)

    def decode(self, z: torch.Tensor, out_len: int) -> torch.Tensor:
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        b, _, t = z.shape
        c, nf = self.cfg.embed_dim, self.cfg.n_freqs
        h = self.dec_in(z.transpose(1, 2)).transpose(1, 2).reshape(b, c, nf, t)
        h = self.dec_act(h)
        for blk in self.dec_blocks:
            h = blk(h)
        s = self.dec_conv(h)
        y = istft(ComplexSpectrogram.from_stacked(s), self.cfg.spectrogram, out_len)
        return y.squeeze(0) if squeeze else y


def encode(x: torch.Tensor, model: Compressor) -> LatentGaussian:
    return model.encode(x)


def decode(z: torch.Tensor, model: Compressor, out_len: int) -> torch.Tensor:
    return model.decode(z, out_len)


def reparameterize(g: LatentGaussian, rng: Rng) -> torch.Tensor:
    """``z = mu + sigma * eps`` with ``eps`` drawn from ``rng``."""
    eps = seeded_normal(rng, g.mu.shape, g.mu.dtype)
    return g.mu + g.sigma * eps


def kl_divergence(g: LatentGaussian) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent elements, averaged over batch."""
    kl = 0.5 * (g.mu * g.mu + g.sigma * g.sigma - 1.0) - torch.log(g.sigma)
    if kl.dim() <= 2:
        return kl.sum()
    return kl.flatten(1).sum(1).mean()


@dataclass
class VaeLoss:
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor

    def parts(self) -> dict[str, float]:
        return {"loss": float(self.total), "recon": float(self.recon), "kl": float(self.kl)}


def vae_loss(model: Compressor, x: torch.Tensor, rng: Rng, kl_weight: float | None = None,
             resolutions: list[SpectrogramConfig] | None = None) -> VaeLoss:
    """Multi-resolution reconstruction loss plus weighted KL."""
    kl_weight = model.cfg.kl_weight if kl_weight is None else kl_weight
    g = model.encode(x)
    z = reparameterize(g, rng)
    y = model.decode(z, x.shape[-1])
    recon = multires_stft_loss(y, x, resolutions)
    kl = kl_divergence(g)
    for name, value in (("recon", recon), ("kl", kl)):
        if not torch.isfinite(value):
            raise TrainingError(f"vae loss component '{name}' is not finite")
    return VaeLoss(recon + kl_weight * kl, recon, kl)
