"""STFT/iSTFT, the multi-resolution STFT loss, log-spectral distance and WAV I/O.

Framing rule: the input is zero-padded on the right to a multiple of the hop,
then frame ``k`` is centred on sample ``k * hop`` (zero padding of half a
window on the left). A signal of ``N`` samples therefore yields exactly
``ceil(N / hop)`` frames. The inverse uses weighted overlap-add normalised by
the summed squared window, which reconstructs every sample in ``[0, N)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import IngestionError, SignalError

DEFAULT_RATE = 8000
MR_WINDOWS = (1280, 640, 320, 160, 80, 40, 20)
MR_HOPS = (320, 160, 80, 40, 20, 10, 5)
POWER_EPS = 1e-8  # magnitude = sqrt(power + POWER_EPS) in the training loss
LSD_FLOOR_DB = -80.0


def hann(n: int, dtype=torch.float32) -> torch.Tensor:
    """Periodic Hann window."""
    k = torch.arange(n, dtype=torch.float64)
    return (0.5 - 0.5 * torch.cos(2 * math.pi * k / n)).to(dtype)


@dataclass(frozen=True)
class SpectrogramConfig:
    window_len: int = 320
    hop: int = 160
    fft_size: int = 320
    window: str = "hann"

    def __post_init__(self):
        if self.window != "hann":
            raise SignalError(f"unsupported window '{self.window}'")
        if not (0 < self.hop <= self.window_len <= self.fft_size):
            raise SignalError(
                f"need 0 < hop <= window_len <= fft_size, got {self.hop}, {self.window_len}, {self.fft_size}")
        w = hann(self.window_len, torch.float64).numpy()
        acc = np.zeros(self.hop)
        for start in range(0, self.window_len, self.hop):
            seg = w[start:start + self.hop]
            acc[: len(seg)] += seg
        if not np.allclose(acc, acc.mean(), rtol=1e-9, atol=1e-12):
            raise SignalError(
                f"Hann window of {self.window_len} is not constant-overlap-add at hop {self.hop}")

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.hop)


@dataclass
class ComplexSpectrogram:
    """Real and imaginary parts, each shaped ``(..., F, frames)``."""

    real: torch.Tensor
    imag: torch.Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise SignalError("real/imag shapes differ")

    @property
    def shape(self):
        return self.real.shape

    def magnitude(self, eps: float = 0.0) -> torch.Tensor:
        return torch.sqrt(self.real * self.real + self.imag * self.imag + eps)

    def stacked(self) -> torch.Tensor:
        """``(..., 2, F, frames)`` with real/imag as channels."""
        return torch.stack([self.real, self.imag], dim=-3)

    @classmethod
    def from_stacked(cls, s: torch.Tensor) -> "ComplexSpectrogram":
        return cls(s.select(-3, 0), s.select(-3, 1))


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def stft(x, cfg: SpectrogramConfig = SpectrogramConfig()) -> ComplexSpectrogram:
    x = _as_tensor(x)
    n = x.shape[-1]
    if n < 1:
        raise SignalError("stft of an empty signal")
    frames = cfg.n_frames(n)
    left = cfg.window_len // 2
    right = cfg.window_len - left - cfg.hop
    padded_len = frames * cfg.hop
    x = torch.nn.functional.pad(x, (left, padded_len - n + max(right, 0)))
    seg = x.unfold(-1, cfg.window_len, cfg.hop)[..., :frames, :]
    seg = seg * hann(cfg.window_len, x.dtype)
    spec = torch.fft.rfft(seg, n=cfg.fft_size, dim=-1)
    spec = spec.transpose(-1, -2)
    return ComplexSpectrogram(spec.real, spec.imag)


def istft(spec: ComplexSpectrogram, cfg: SpectrogramConfig = SpectrogramConfig(), out_len: int | None = None):
    """Inverse of :func:`stft`; output is cut or zero-padded to ``out_len``."""
    real, imag = spec.real, spec.imag
    frames = real.shape[-1]
    if out_len is None:
        out_len = frames * cfg.hop
    z = torch.complex(real, imag).transpose(-1, -2)
    seg = torch.fft.irfft(z, n=cfg.fft_size, dim=-1)[..., : cfg.window_len]
    w = hann(cfg.window_len, seg.dtype)
    seg = seg * w
    lead = seg.shape[:-2]
    flat = seg.reshape(-1, frames * cfg.window_len)
    total = (frames - 1) * cfg.hop + cfg.window_len
    idx = (torch.arange(frames)[:, None] * cfg.hop + torch.arange(cfg.window_len)[None, :]).reshape(-1)
    out = torch.zeros(flat.shape[0], total, dtype=seg.dtype)
    out = out.index_add(1, idx, flat)
    norm = torch.zeros(total, dtype=seg.dtype).index_add(0, idx, (w * w).repeat(frames))
    left = cfg.window_len // 2
    out = out[:, left:]
    norm = norm[left:]
    keep = min(out.shape[-1], frames * cfg.hop)
    out = out[:, :keep] / norm[:keep].clamp_min(1e-12)
    if out_len > keep:
        out = torch.nn.functional.pad(out, (0, out_len - keep))
    else:
        out = out[:, :out_len]
    return out.reshape(*lead, out_len)


def resolutions(windows=MR_WINDOWS, hops=MR_HOPS) -> list[SpectrogramConfig]:
    return [SpectrogramConfig(w, h, w) for w, h in zip(windows, hops)]


def multires_stft_loss(x, y, configs: list[SpectrogramConfig] | None = None) -> torch.Tensor:
    """Mean over resolutions of spectral convergence plus log-magnitude L1.

    ``y`` is the reference. Spectral convergence is ``||Y - X||_F / ||Y||_F``
    over the whole batch, so an all-silent example cannot dominate it.
    Magnitudes are ``sqrt(power + 1e-8)``; the loss ignores phase and sign.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise SignalError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    configs = configs or resolutions()
    total = 0.0
    for cfg in configs:
        mx = stft(x, cfg).magnitude(POWER_EPS)
        my = stft(y, cfg).magnitude(POWER_EPS)
        sc = torch.linalg.vector_norm(my - mx) / torch.linalg.vector_norm(my)
        logmag = (torch.log(my) - torch.log(mx)).abs().mean()
        total = total + sc + logmag
    return total / len(configs)


LSD_CONFIG = SpectrogramConfig(window_len=320, hop=160, fft_size=512)


def lsd(reference, estimate, cfg: SpectrogramConfig = LSD_CONFIG) -> float:
    """Log-spectral distance in dB.

    Per-frame RMS over frequency of the difference of ``20 log10`` magnitudes,
    then RMS over frames. Magnitudes are floored 80 dB below the louder
    signal's peak bin, so the value is symmetric and scale invariant; two
    silent signals give 0.
    """
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    e = np.asarray(estimate, dtype=np.float64).reshape(-1)
    n = min(len(r), len(e))
    if n == 0:
        raise SignalError("lsd of empty signals")
    mr = stft(torch.from_numpy(r[:n]), cfg).magnitude().numpy()
    me = stft(torch.from_numpy(e[:n]), cfg).magnitude().numpy()
    peak = max(mr.max(), me.max())
    if peak <= 0:
        return 0.0
    floor = peak * 10 ** (LSD_FLOOR_DB / 20)
    d = 20 * np.log10(np.maximum(mr, floor)) - 20 * np.log10(np.maximum(me, floor))
    per_frame_ms = np.mean(d * d, axis=0)
    return float(np.sqrt(np.mean(per_frame_ms)))


# ---------------------------------------------------------------------------
# WAV I/O


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return x
    frac = Fraction(rate_out, rate_in)
    return resample_poly(x, frac.numerator, frac.denominator).astype(np.float32)


def read_wav(path, target_rate: int | None = DEFAULT_RATE) -> tuple[np.ndarray, int]:
    """Read a mono WAV as float32 in [-1, 1], resampling to ``target_rate``."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"audio file not found: {path}")
    rate, data = wavfile.read(path)
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float32) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float32) - 128.0) / 128.0
    else:
        x = data.astype(np.float32)
    if target_rate is not None and rate != target_rate:
        x = resample(x, rate, target_rate)
        rate = target_rate
    return x, int(rate)


def to_pcm16(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.abs(x).max(initial=0.0) > 1.0:
        warnings.warn("clipping samples outside [-1, 1] when writing 16-bit PCM", stacklevel=3)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)


def write_wav(path, x, rate: int = DEFAULT_RATE) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        wavfile.write(fh, rate, to_pcm16(np.asarray(x).reshape(-1)))
    tmp.replace(path)
