import numpy as np
import pytest

from stillflow import distort as ds
from stillflow.errors import CodecUnavailableError, DistortionError, SignalError
from stillflow.numeric import Rng
from stillflow.signal import lsd

RATE = 8000


def naive_convolve(x, h):
    out = np.zeros(len(x))
    for n in range(len(x)):
        for k in range(min(len(h), n + 1)):
            out[n] += h[k] * x[n - k]
    return out


def test_convolution_kernels(gen):
    x = gen.standard_normal(300)
    assert np.abs(ds.convolve_rir(x, ds.RirFile([1.0])) - x).max() < 1e-12
    h = np.zeros(11)
    h[10] = 0.5
    y = ds.convolve_rir(x, ds.RirFile(h))
    assert np.abs(y[10:] - 0.5 * x[:-10]).max() < 1e-12 and np.abs(y[:10]).max() < 1e-12


def test_convolution_matches_naive(gen):
    x, h = gen.standard_normal(500), gen.standard_normal(120)
    assert np.abs(ds.convolve_rir(x, ds.RirFile(h)) - naive_convolve(x, h)).max() < 1e-6


def test_convolution_rate_mismatch():
    with pytest.raises(SignalError):
        ds.convolve_rir(np.ones(10), ds.RirFile([1.0], sample_rate=16000))


def test_noise_at_snr(gen):
    s = gen.standard_normal(4000)
    n = gen.standard_normal(4000)
    n *= np.sqrt(ds.power(s) / ds.power(n))
    assert abs(ds.noise_gain(s, n, 0.0) - 1.0) < 1e-12
    assert np.array_equal(ds.add_noise_at_snr(s, n, float("inf")), s)
    for snr in (-5.0, 0.0, 7.5, 20.0):
        scaled = ds.add_noise_at_snr(s, gen.standard_normal(1500), snr) - s
        assert abs(10 * np.log10(ds.power(s) / ds.power(scaled)) - snr) < 1e-6
    with pytest.raises(SignalError):
        ds.add_noise_at_snr(np.zeros(100), n, 5.0)


def test_clip_cases(gen):
    x = gen.standard_normal(100)
    assert np.array_equal(ds.clip(x, 1.0), x)
    assert ds.clip([-1.0, 0.2, 1.0], 0.5).tolist() == [-0.5, 0.2, 0.5]
    y = ds.clip(x, 0.3)
    assert np.abs(y).max() == 0.3 * np.abs(x).max()


def test_bandlimit_cases():
    t = np.arange(RATE) / RATE
    x = np.random.default_rng(0).standard_normal(RATE)
    lowpass_x = ds.bandlimit(x, 1000)
    y = ds.bandlimit(lowpass_x, RATE / 2 - 1)
    assert np.linalg.norm(y - lowpass_x) / np.linalg.norm(lowpass_x) < 1e-3
    tone = np.sin(2 * np.pi * 3000 * t)
    out = ds.bandlimit(tone, 1000)
    ratio = np.abs(np.fft.rfft(out)).max() / np.abs(np.fft.rfft(tone)).max()
    assert 20 * np.log10(ratio) < -40
    dc = np.full(RATE, 0.25)
    assert np.abs(ds.bandlimit(dc, 500) - 0.25).max() < 1e-6
    assert len(ds.bandlimit(x[:777], 900)) == 777


def test_packet_loss_cases():
    x = np.ones(16000)
    assert np.array_equal(ds.packet_loss(x, 20, 0.0, seed=1), x)
    assert not ds.packet_loss(x, 20, 1.0, seed=1).any()
    frames = 10_000
    y = ds.packet_loss(np.ones(frames * 160), 20, 0.3, seed=5)
    rate = 1 - y.reshape(frames, 160)[:, 0].mean()
    assert abs(rate - 0.3) < 0.02
    assert np.array_equal(y, ds.packet_loss(np.ones(frames * 160), 20, 0.3, seed=5))


def test_bitrate_draws_in_range():
    rng = Rng(0)
    draws = [ds.draw_bitrate(rng) for _ in range(1000)]
    assert min(draws) >= 30000 and max(draws) <= 40000
    assert len(set(draws)) > 100


def test_codec_roundtrip_contract(gen):
    x = 0.3 * gen.standard_normal(RATE + 37)
    y = ds.codec_roundtrip(x, 32000)
    assert len(y) == len(x)
    assert lsd(x, y) > 0
    assert np.array_equal(y, ds.codec_roundtrip(x, 32000))


def test_codec_unavailable_without_fallback(monkeypatch):
    monkeypatch.delenv(ds.OPUS_BIN_ENV, raising=False)
    monkeypatch.setattr(ds, "_opuslib_available", lambda: False)
    with pytest.raises(CodecUnavailableError):
        ds.codec_roundtrip(np.zeros(160), 32000, ds.CodecConfig(allow_fallback=False))
    assert ds.resolve_codec_backend(ds.CodecConfig()) == "simulate"
    monkeypatch.setenv(ds.OPUS_BIN_ENV, "/nonexistent/ffmpeg")
    assert ds.resolve_codec_backend(ds.CodecConfig()) == "external"
    with pytest.raises(CodecUnavailableError):
        ds.codec_roundtrip(np.zeros(160), 32000)


def test_align_recovers_delay(gen):
    x = gen.standard_normal(1000)
    delayed = np.concatenate([np.zeros(37), x])
    assert np.abs(ds.align_to(x, delayed, 100) - x).max() < 1e-12


def test_chain_empty_and_composition(gen):
    x = 0.2 * gen.standard_normal(RATE)
    assert np.array_equal(ds.apply_chain(x, ds.DistortionSpec([])), x)
    stages = [{"kind": "reverb", "seed": 3, "rt60": 0.4},
              {"kind": "noise", "seed": 4, "snr_db": 10.0},
              {"kind": "codec", "bitrate_bps": 33000}]
    spec = ds.DistortionSpec.from_json(ds.DistortionSpec(stages).to_json())
    from stillflow.datasetgen import toy_rir
    manual = ds.convolve_rir(x, toy_rir(Rng(3), 0.4, 0.5, RATE))
    manual = ds.add_noise_at_snr(manual, ds.synth_noise(RATE, 4), 10.0)
    manual = ds.codec_roundtrip(manual, 33000)
    out = ds.apply_chain(x, spec)
    assert np.array_equal(out, manual)
    assert np.array_equal(out, ds.apply_chain(x, spec))


def test_chain_validation_and_error_index():
    with pytest.raises(DistortionError):
        ds.DistortionSpec([{"kind": "wind"}])
    with pytest.raises(DistortionError):
        ds.DistortionSpec([{"kind": "noise", "snr_db": 5}])
    spec = ds.DistortionSpec([{"kind": "clip", "threshold": 0.5}, {"kind": "noise", "seed": 1, "snr_db": 0}])
    with pytest.raises(DistortionError, match="stage 1"):
        ds.apply_chain(np.zeros(100), spec)


def test_every_stage_preserves_length(gen):
    x = 0.2 * gen.standard_normal(1234)
    for stage in ({"kind": "reverb", "seed": 1}, {"kind": "noise", "seed": 1, "snr_db": 3},
                  {"kind": "codec", "bitrate_bps": 30000}, {"kind": "clip", "threshold": 0.4},
                  {"kind": "bandlimit", "cutoff_hz": 2000}, {"kind": "packet_loss", "seed": 2, "loss_rate": 0.2}):
        assert len(ds.apply_chain(x, ds.DistortionSpec([stage]))) == len(x)
