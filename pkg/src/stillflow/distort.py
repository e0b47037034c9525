"""Seeded distortions: reverberation, additive noise, codec, clipping, band limits, packet loss.

All stages take and return 1-d float arrays of unchanged length. A
:class:`DistortionSpec` lists stages in order; every stochastic stage carries
its own seed, so ``apply_chain`` is a pure function of its inputs.
"""
from __future__ import annotations

import json
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, fftconvolve, sosfiltfilt

from .errors import CodecUnavailableError, DistortionError, SignalError, StillflowError
from .numeric import Rng
from .signal import DEFAULT_RATE, read_wav, write_wav

OPUS_BIN_ENV = "STILLFLOW_OPUS_BIN"
BITRATE_RANGE = (30000, 40000)


@dataclass
class RirFile:
    samples: np.ndarray
    sample_rate: int = DEFAULT_RATE
    scene_id: str = ""
    position_id: str = ""
    distance_m: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.samples).all():
            raise SignalError(f"non-finite RIR samples ({self.scene_id}/{self.position_id})")


def _wave(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def convolve_rir(x, rir: RirFile, rate: int = DEFAULT_RATE) -> np.ndarray:
    """Linear convolution with the RIR, keeping the first ``len(x)`` samples, no gain change."""
    if rir.sample_rate != rate:
        raise SignalError(f"RIR rate {rir.sample_rate} != signal rate {rate}")
    x = _wave(x)
    if len(x) == 0:
        return x
    return fftconvolve(x, rir.samples)[: len(x)]


def power(x) -> float:
    x = _wave(x)
    return float(np.mean(x * x)) if len(x) else 0.0


def fit_length(noise, n: int) -> np.ndarray:
    noise = _wave(noise)
    if len(noise) == 0:
        raise SignalError("empty noise signal")
    reps = -(-n // len(noise))
    return np.tile(noise, reps)[:n]


def noise_gain(speech, noise, snr_db: float) -> float:
    ps, pn = power(speech), power(noise)
    if ps <= 0:
        raise SignalError("speech is silent; SNR is undefined")
    if pn <= 0:
        raise SignalError("noise is silent; cannot reach a finite SNR")
    return float(np.sqrt(ps / (pn * 10 ** (snr_db / 10))))


def add_noise_at_snr(speech, noise, snr_db: float) -> np.ndarray:
    """``speech + g * noise`` with ``g`` chosen so the speech/noise power ratio is ``snr_db``."""
    speech = _wave(speech)
    if np.isinf(snr_db) and snr_db > 0:
        return speech.copy()
    noise = fit_length(noise, len(speech))
    return speech + noise_gain(speech, noise, snr_db) * noise


def clip(x, threshold: float) -> np.ndarray:
    """Hard clip at ``threshold`` times the signal peak."""
    if not 0 < threshold <= 1:
        raise SignalError("clip threshold must lie in (0, 1]")
    x = _wave(x)
    peak = np.abs(x).max(initial=0.0)
    if threshold == 1 or peak == 0:
        return x.copy()
    lim = threshold * peak
    return np.clip(x, -lim, lim)


def bandlimit(x, cutoff_hz: float, rate: int = DEFAULT_RATE, order: int = 8) -> np.ndarray:
    """Zero-phase Butterworth low-pass (forward-backward)."""
    if not 0 < cutoff_hz < rate / 2:
        raise SignalError(f"cutoff {cutoff_hz} Hz outside (0, {rate / 2})")
    x = _wave(x)
    sos = butter(order, cutoff_hz, btype="low", fs=rate, output="sos")
    if len(x) <= 3 * (2 * len(sos) + 1):
        return x.copy()
    return sosfiltfilt(sos, x)


def packet_loss(x, frame_ms: float, loss_rate: float, seed: int, rate: int = DEFAULT_RATE) -> np.ndarray:
    """Zero whole frames independently with probability ``loss_rate``."""
    if not 0 <= loss_rate <= 1:
        raise SignalError("loss_rate must lie in [0, 1]")
    x = _wave(x).copy()
    flen = max(1, int(round(frame_ms * rate / 1000)))
    n_frames = -(-len(x) // flen)
    lost = Rng(seed, stream=0x9AC4E7).uniform((n_frames,)) < loss_rate
    for i in np.flatnonzero(lost):
        x[i * flen:(i + 1) * flen] = 0.0
    return x


# ---------------------------------------------------------------------------
# Codec


@dataclass
class CodecConfig:
    sample_rate: int = DEFAULT_RATE
    frame_ms: float = 20.0
    complexity: int = 10
    backend: str = "auto"  # auto | opuslib | external | simulate
    allow_fallback: bool = True
    sim_cutoff_hz: float = 3400.0


def draw_bitrate(rng: Rng, low: int = BITRATE_RANGE[0], high: int = BITRATE_RANGE[1]) -> int:
    return int(rng.integers(low, high + 1))


def _opuslib_available() -> bool:
    try:
        import opuslib  # noqa: F401
    except Exception:
        return False
    return True


def resolve_codec_backend(cfg: CodecConfig) -> str:
    if cfg.backend == "simulate":
        return "simulate"
    if cfg.backend in ("auto", "opuslib") and _opuslib_available():
        return "opuslib"
    if cfg.backend in ("auto", "external") and os.environ.get(OPUS_BIN_ENV):
        return "external"
    if cfg.allow_fallback:
        return "simulate"
    raise CodecUnavailableError(
        f"no Opus implementation found (install opuslib or set {OPUS_BIN_ENV}) and fallback is disabled")


def _quantize16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0


def align_to(reference: np.ndarray, y: np.ndarray, max_lag: int) -> np.ndarray:
    """Shift ``y`` by the lag maximising cross-correlation with ``reference``; cut/pad to its length."""
    n = len(reference)
    if len(y) == 0 or not np.any(reference):
        return np.resize(y, n) if len(y) else np.zeros(n)
    corr = fftconvolve(y, reference[::-1])
    centre = n - 1
    lo, hi = max(0, centre - max_lag), min(len(corr), centre + max_lag + 1)
    lag = int(np.argmax(corr[lo:hi])) + lo - centre
    if lag > 0:
        y = y[lag:]
    elif lag < 0:
        y = np.concatenate([np.zeros(-lag), y])
    out = np.zeros(n)
    m = min(n, len(y))
    out[:m] = y[:m]
    return out


def _opuslib_roundtrip(x: np.ndarray, bitrate: int, cfg: CodecConfig) -> np.ndarray:
    import opuslib

    flen = int(cfg.sample_rate * cfg.frame_ms / 1000)
    enc = opuslib.Encoder(cfg.sample_rate, 1, opuslib.APPLICATION_AUDIO)
    enc.bitrate = bitrate
    enc.complexity = cfg.complexity
    dec = opuslib.Decoder(cfg.sample_rate, 1)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    n = -(-len(pcm) // flen) * flen + flen  # one extra frame flushes the codec delay
    pcm = np.concatenate([pcm, np.zeros(n - len(pcm), dtype="<i2")])
    out = []
    for i in range(0, n, flen):
        packet = enc.encode(pcm[i:i + flen].tobytes(), flen)
        out.append(np.frombuffer(dec.decode(packet, flen), dtype="<i2"))
    y = np.concatenate(out).astype(np.float64) / 32768.0
    return align_to(x, y, max_lag=flen)


def _external_roundtrip(x: np.ndarray, bitrate: int, cfg: CodecConfig) -> np.ndarray:
    """Round trip through an ffmpeg-compatible binary with libopus."""
    binary = os.environ.get(OPUS_BIN_ENV, "")
    if not binary or shutil.which(binary) is None and not Path(binary).exists():
        raise CodecUnavailableError(f"{OPUS_BIN_ENV} does not point to an executable: '{binary}'")
    with tempfile.TemporaryDirectory() as tmp:
        src, mid, dst = (Path(tmp) / n for n in ("in.wav", "mid.opus", "out.wav"))
        write_wav(src, x, cfg.sample_rate)
        common = [binary, "-hide_banner", "-loglevel", "error", "-y"]
        subprocess.run(common + ["-i", str(src), "-c:a", "libopus", "-b:a", str(bitrate),
                                 "-frame_duration", str(int(cfg.frame_ms)),
                                 "-compression_level", str(cfg.complexity), str(mid)], check=True)
        subprocess.run(common + ["-i", str(mid), "-ar", str(cfg.sample_rate), "-ac", "1", str(dst)], check=True)
        y, _ = read_wav(dst, cfg.sample_rate)
    return align_to(x, y.astype(np.float64), max_lag=int(cfg.sample_rate * 0.05))


def _simulated_roundtrip(x: np.ndarray, bitrate: int, cfg: CodecConfig) -> np.ndarray:
    """Framed band limitation plus uniform quantisation sized to the bit budget."""
    flen = int(cfg.sample_rate * cfg.frame_ms / 1000)
    n = len(x)
    padded = np.concatenate([x, np.zeros((-n) % flen)])
    frames = padded.reshape(-1, flen)
    spec = np.fft.rfft(frames, axis=1)
    freqs = np.fft.rfftfreq(flen, 1 / cfg.sample_rate)
    keep = freqs <= cfg.sim_cutoff_hz
    spec[:, ~keep] = 0
    bits = bitrate * cfg.frame_ms / 1000
    bits_per_value = max(1.0, bits / (2 * keep.sum()))
    levels = 2.0 ** bits_per_value
    for row in spec:
        peak = max(np.abs(row.real).max(), np.abs(row.imag).max())
        if peak == 0:
            continue
        step = 2 * peak / levels
        row.real = np.round(row.real / step) * step
        row.imag = np.round(row.imag / step) * step
    y = np.fft.irfft(spec, n=flen, axis=1).reshape(-1)[:n]
    return y


def codec_roundtrip(x, bitrate_bps: int, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Encode and decode at ``bitrate_bps``; output is aligned to and as long as the input."""
    x = _quantize16(_wave(x))
    backend = resolve_codec_backend(cfg)
    if backend == "opuslib":
        return _opuslib_roundtrip(x, bitrate_bps, cfg)
    if backend == "external":
        return _external_roundtrip(x, bitrate_bps, cfg)
    return _simulated_roundtrip(x, bitrate_bps, cfg)


# ---------------------------------------------------------------------------
# Chains


STAGE_KINDS = ("reverb", "noise", "codec", "clip", "bandlimit", "packet_loss")


@dataclass
class DistortionSpec:
    stages: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for i, st in enumerate(self.stages):
            if st.get("kind") not in STAGE_KINDS:
                raise DistortionError(f"stage {i}: unknown kind '{st.get('kind')}'")
            if st["kind"] in ("noise", "packet_loss") and "seed" not in st and "path" not in st:
                raise DistortionError(f"stage {i}: stochastic stage '{st['kind']}' needs a seed")

    def to_json(self) -> str:
        return json.dumps({"stages": self.stages}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DistortionSpec":
        return cls(list(json.loads(text)["stages"]))


def synth_noise(n: int, seed: int, color: str = "white") -> np.ndarray:
    w = Rng(seed, stream=0x4015E).normal((n,), dtype=np.float64)
    if color == "white":
        return w
    spec = np.fft.rfft(w)
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f) if color == "pink" else f
    y = np.fft.irfft(spec, n=n)
    return y / (np.std(y) + 1e-12)


def _stage_rir(stage: dict, rate: int) -> RirFile:
    if "path" in stage:
        samples, r = read_wav(stage["path"], rate)
        return RirFile(samples, r)
    from .datasetgen import toy_rir

    return toy_rir(Rng(int(stage["seed"])), float(stage.get("rt60", 0.3)),
                   float(stage.get("length_s", 0.5)), rate)


def apply_stage(x: np.ndarray, stage: dict, rate: int, codec: CodecConfig) -> np.ndarray:
    kind = stage["kind"]
    if kind == "reverb":
        return convolve_rir(x, _stage_rir(stage, rate), rate)
    if kind == "noise":
        if "path" in stage:
            noise, _ = read_wav(stage["path"], rate)
        else:
            noise = synth_noise(len(x), int(stage["seed"]), stage.get("color", "white"))
        return add_noise_at_snr(x, noise, float(stage["snr_db"]))
    if kind == "codec":
        return codec_roundtrip(x, int(stage["bitrate_bps"]), codec)
    if kind == "clip":
        return clip(x, float(stage["threshold"]))
    if kind == "bandlimit":
        return bandlimit(x, float(stage["cutoff_hz"]), rate)
    return packet_loss(x, float(stage.get("frame_ms", 20.0)), float(stage["loss_rate"]),
                       int(stage["seed"]), rate)


def apply_chain(x, spec: DistortionSpec, rate: int = DEFAULT_RATE,
                codec: CodecConfig | None = None) -> np.ndarray:
    """Apply the stages of ``spec`` in order."""
    codec = codec or CodecConfig(sample_rate=rate)
    y = _wave(x).copy()
    for i, stage in enumerate(spec.stages):
        try:
            y = apply_stage(y, stage, rate, codec)
        except StillflowError as exc:
            raise DistortionError(f"stage {i} ({stage['kind']}): {exc}") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise DistortionError(f"stage {i} ({stage['kind']}): bad parameters: {exc}") from exc
    return y
