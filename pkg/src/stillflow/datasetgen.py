"""Stationary-source corpus synthesis.

A scene is one acoustic environment with a handful of fixed RIR positions.
Each speaker in a scene is pinned to one position; noise and music clips
take an independently drawn position per clip. Mixtures are the sum of
convolved sources (no gain normalisation), optionally passed through a
distortion chain (codec etc.). Clean targets are the dry speech signals,
delayed to the direct-path arrival of their RIR.

On-disk layout::

    <out>/index.jsonl                      one scene per line
    <out>/<split>/<scene_id>/scene.json    schema-versioned manifest
    <out>/<split>/<scene_id>/<mixture_id>.mix.wav / .clean.wav
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .distort import (BITRATE_RANGE, CodecConfig, DistortionSpec, RirFile, apply_chain,
                      convolve_rir, draw_bitrate, noise_gain, synth_noise)
from .errors import ConfigError, ContractError, IngestionError
from .numeric import Rng
from .signal import DEFAULT_RATE, read_wav, write_wav

SCHEMA_VERSION = 1
NOISE_RIR_POLICY = "independent-per-clip"
SPLITS = ("train", "val", "test")
PLACEMENT_RANGE_M = (1.0, 8.0)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# RIRs and positions


def toy_rir(rng: Rng, rt60_s: float, length_s: float, rate: int = DEFAULT_RATE,
            distance_m: float | None = None, tail_ratio: float = 1.0) -> RirFile:
    """Direct-path impulse followed by an exponentially decaying noise tail.

    The tail amplitude decays as ``exp(-ln(1000) t / rt60)``, i.e. its energy
    is 60 dB down at ``rt60_s``. With a distance the direct path is delayed by
    the travel time and scaled by ``1 / distance``. ``tail_ratio`` is the tail
    energy relative to a 1 m direct path.
    """
    if rt60_s <= 0:
        raise ContractError("rt60 must be positive")
    n = max(1, int(round(length_s * rate)))
    h = np.zeros(n)
    delay, amp = 0, 1.0
    if distance_m is not None:
        delay = min(n - 1, int(round(distance_m / 343.0 * rate)))
        amp = 1.0 / distance_m
    h[delay] = amp
    t = np.arange(1, n - delay) / rate
    if len(t):
        decay = np.exp(-np.log(1000.0) * t / rt60_s)
        energy = np.sum(decay ** 2)
        tail = rng.normal((len(t),), dtype=np.float64) * decay
        if energy > 0:
            h[delay + 1:] = tail * np.sqrt(tail_ratio / max(energy, 1.0))
    return RirFile(h, rate, distance_m=distance_m)


def discretize_positions(track: list, count: int) -> list[int]:
    """Evenly spaced indices along a moving-source track, endpoints included."""
    n = len(track)
    if n == 0:
        raise ContractError("empty RIR track")
    if count < 1 or count > n:
        raise ContractError(f"cannot pick {count} positions from a track of {n}")
    if count == 1:
        return [0]
    return [int(round(i * (n - 1) / (count - 1))) for i in range(count)]


@dataclass
class RirPosition:
    position_id: str
    path: str
    distance_m: float | str = "unknown"


@dataclass
class RirInventory:
    """Per scene: position ids mapped to RIR files, plus source pools.

    ``pools`` maps a role (speech, noise, music) to a list of entries
    ``{"path": ..., "speaker": ...}``; speech entries need a speaker id.
    """

    scenes: dict[str, list[RirPosition]]
    pools: dict[str, list[dict]] = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        for sid, positions in self.scenes.items():
            if not positions:
                raise ConfigError(f"scene '{sid}' has no RIR positions")
            for p in positions:
                d = p.distance_m
                if isinstance(d, (int, float)) and not PLACEMENT_RANGE_M[0] <= d <= PLACEMENT_RANGE_M[1]:
                    raise ConfigError(f"scene '{sid}' position '{p.position_id}' at {d} m is outside "
                                      f"the {PLACEMENT_RANGE_M[0]:g}-{PLACEMENT_RANGE_M[1]:g} m placement range")
        for entry in self.pools.get("speech", []):
            if "speaker" not in entry:
                raise ConfigError(f"speech entry without speaker id: {entry.get('path')}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p

    def position(self, scene_id: str, position_id: str) -> RirPosition:
        for p in self.scenes.get(scene_id, []):
            if p.position_id == position_id:
                return p
        raise ContractError(f"position '{position_id}' does not belong to scene '{scene_id}'")

    def load_rir(self, scene_id: str, position_id: str, rate: int = DEFAULT_RATE) -> RirFile:
        p = self.position(scene_id, position_id)
        samples, r = read_wav(self.resolve(p.path), rate)
        d = p.distance_m if isinstance(p.distance_m, (int, float)) else None
        return RirFile(samples, r, scene_id, position_id, d)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION,
                "scenes": {k: [asdict(p) for p in v] for k, v in sorted(self.scenes.items())},
                "pools": self.pools}

    @classmethod
    def load(cls, path) -> "RirInventory":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"inventory not found: {path}")
        try:
            doc = json.loads(path.read_text())
            scenes = {sid: [RirPosition(p["position_id"], p["path"], p.get("distance_m", "unknown"))
                            for p in plist] for sid, plist in doc["scenes"].items()}
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"malformed inventory {path}: {exc}") from exc
        return cls(scenes, doc.get("pools", {}), str(path.parent))


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class SourceEntry:
    role: str  # speech | noise | music
    path: str
    position_id: str
    offset: int  # samples at the pipeline rate
    length: int  # samples taken from the start of ``trim``
    trim: int = 0
    speaker: str | None = None
    snr_db: float | None = None  # noise/music only, relative to the reverberant speech sum

    def __post_init__(self):
        if self.role not in ("speech", "noise", "music"):
            raise ContractError(f"unknown source role '{self.role}'")
        if self.offset < 0 or self.length < 0 or self.trim < 0:
            raise ContractError("offset, length and trim must be nonnegative")


@dataclass
class SceneManifest:
    """One mixture inside a scene."""

    scene_id: str
    mixture_id: str
    split: str
    seed: int
    sources: list[SourceEntry]
    distortions: dict = field(default_factory=lambda: {"stages": []})
    codec: dict = field(default_factory=dict)
    sample_rate: int = DEFAULT_RATE
    noise_rir_policy: str = NOISE_RIR_POLICY

    def __post_init__(self):
        self.sources = [s if isinstance(s, SourceEntry) else SourceEntry(**s) for s in self.sources]
        if self.split not in SPLITS:
            raise ContractError(f"unknown split '{self.split}'")
        pinned: dict[str, str] = {}
        for s in self.sources:
            if s.role == "speech":
                if s.speaker is None:
                    raise ContractError("speech source without speaker id")
                if pinned.setdefault(s.speaker, s.position_id) != s.position_id:
                    raise ContractError(f"speaker '{s.speaker}' uses more than one position")

    @property
    def duration(self) -> int:
        return max((s.offset + s.length for s in self.sources), default=0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneManifest":
        d = {k: v for k, v in d.items() if k != "schema_version"}
        return cls(**d)


def _place(buf: np.ndarray, y: np.ndarray, offset: int) -> None:
    buf[offset:offset + len(y)] += y


def _source_audio(s: SourceEntry, inventory: RirInventory, rate: int) -> np.ndarray:
    x, _ = read_wav(inventory.resolve(s.path), rate)
    x = np.asarray(x, dtype=np.float64)[s.trim:s.trim + s.length]
    if len(x) < s.length:
        x = np.tile(x, -(-s.length // max(len(x), 1)))[:s.length] if len(x) else np.zeros(s.length)
    return x


def build_scene(manifest: SceneManifest, inventory: RirInventory,
                codec: CodecConfig | None = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Render one mixture and its per-speaker dry references.

    Noise and music clips are scaled so the ratio of the reverberant speech
    sum to the convolved clip matches their ``snr_db``; no other gains are
    applied. References are delayed by the argmax of their RIR so they line
    up with the direct path in the mixture.
    """
    rate = manifest.sample_rate
    n = manifest.duration
    speech = np.zeros(n)
    others = np.zeros(n)
    refs: dict[str, np.ndarray] = {}
    pending = []
    for s in manifest.sources:
        x = _source_audio(s, inventory, rate)
        rir = inventory.load_rir(manifest.scene_id, s.position_id, rate)
        wet = convolve_rir(x, rir, rate)
        if s.role == "speech":
            _place(speech, wet, s.offset)
            ref = refs.setdefault(s.speaker, np.zeros(n))
            shift = int(np.argmax(np.abs(rir.samples)))
            _place(ref, x[:max(0, n - s.offset - shift)], s.offset + shift)
        else:
            pending.append((s, wet))
    for s, wet in pending:
        if s.snr_db is None:
            _place(others, wet, s.offset)
            continue
        region = speech[s.offset:s.offset + len(wet)]
        g = noise_gain(region if np.any(region) else speech, wet, s.snr_db)
        _place(others, g * wet, s.offset)
    mix = speech + others
    spec = DistortionSpec(list(manifest.distortions.get("stages", [])))
    if spec.stages:
        mix = apply_chain(mix, spec, rate, codec or CodecConfig(sample_rate=rate, **_codec_kwargs(manifest.codec)))
    return mix, refs


def _codec_kwargs(codec: dict) -> dict:
    keys = ("frame_ms", "complexity", "backend", "allow_fallback")
    return {k: codec[k] for k in keys if k in codec}


# ---------------------------------------------------------------------------
# Corpus generation


@dataclass
class DataConfig:
    scenes_per_split: tuple[int, int, int] = (6, 2, 2)
    mixtures_per_scene: int = 8
    mixture_s: float = 2.0
    speakers_per_mixture: int = 3
    noise_per_mixture: int = 1
    music_prob: float = 0.5
    snr_db: tuple[float, float] = (0.0, 10.0)
    bitrate_bps: tuple[int, int] = BITRATE_RANGE
    codec: bool = True
    codec_backend: str = "auto"
    extra_stages: list = field(default_factory=list)
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        self.scenes_per_split = tuple(self.scenes_per_split)
        self.snr_db = tuple(self.snr_db)
        self.bitrate_bps = tuple(self.bitrate_bps)
        if len(self.scenes_per_split) != 3 or min(self.scenes_per_split) < 0:
            raise ConfigError("scenes_per_split needs three nonnegative counts")
        if self.mixtures_per_scene < 1 or self.mixture_s <= 0 or self.speakers_per_mixture < 1:
            raise ConfigError("mixture counts and durations must be positive")

    def target_duration_s(self, split: str) -> float:
        return self.scenes_per_split[SPLITS.index(split)] * self.mixtures_per_scene * self.mixture_s

    def to_dict(self) -> dict:
        return asdict(self)


def _speaker_pools(inventory: RirInventory) -> dict[str, list[dict]]:
    by_spk: dict[str, list[dict]] = {}
    for e in inventory.pools.get("speech", []):
        by_spk.setdefault(str(e["speaker"]), []).append(e)
    return dict(sorted(by_spk.items()))


def assign_splits(items: list[str], counts, rng: Rng) -> dict[str, list[str]]:
    order = [items[i] for i in rng.permutation(len(items))]
    out, start = {}, 0
    for split, c in zip(SPLITS, counts):
        out[split] = sorted(order[start:start + c])
        start += c
    return out


def _clip_entry(rng: Rng, entry: dict, inventory: RirInventory, role: str, scene_positions: list[str],
                offset: int, length: int, rate: int, snr=None, speaker=None, position=None) -> SourceEntry:
    x, _ = read_wav(inventory.resolve(entry["path"]), rate)
    trim = int(rng.integers(0, max(1, len(x) - length + 1)))
    pos = position if position is not None else scene_positions[int(rng.integers(0, len(scene_positions)))]
    return SourceEntry(role, entry["path"], pos, offset, length, trim, speaker, snr)


def make_manifest(cfg: DataConfig, inventory: RirInventory, scene_id: str, split: str, speakers: list[str],
                  speaker_pos: dict[str, str], index: int, master_seed: int) -> SceneManifest:
    rate = cfg.sample_rate
    n = int(round(cfg.mixture_s * rate))
    rng = Rng(master_seed).derive("mixture", scene_id, index)
    positions = [p.position_id for p in inventory.scenes[scene_id]]
    pools = _speaker_pools(inventory)
    k = min(cfg.speakers_per_mixture, len(speakers))
    chosen = sorted(rng.choice(speakers, size=k, replace=False).tolist())
    sources = []
    for spk in chosen:
        entry = pools[spk][int(rng.integers(0, len(pools[spk])))]
        length = int(rng.integers(n // 2, n + 1))
        offset = int(rng.integers(0, n - length + 1))
        sources.append(_clip_entry(rng, entry, inventory, "speech", positions, offset, length, rate,
                                   speaker=spk, position=speaker_pos[spk]))
    noise_pool = inventory.pools.get("noise", [])
    for _ in range(cfg.noise_per_mixture if noise_pool else 0):
        entry = noise_pool[int(rng.integers(0, len(noise_pool)))]
        snr = float(rng.uniform(None, *cfg.snr_db))
        sources.append(_clip_entry(rng, entry, inventory, "noise", positions, 0, n, rate, snr=snr))
    music_pool = inventory.pools.get("music", [])
    if music_pool and rng.uniform() < cfg.music_prob:
        entry = music_pool[int(rng.integers(0, len(music_pool)))]
        length = int(rng.integers(n // 2, n + 1))
        offset = int(rng.integers(0, n - length + 1))
        snr = float(rng.uniform(None, *cfg.snr_db))
        sources.append(_clip_entry(rng, entry, inventory, "music", positions, offset, length, rate, snr=snr))
    stages = [dict(st) for st in cfg.extra_stages]
    for i, st in enumerate(stages):
        if st.get("kind") in ("noise", "packet_loss") and "seed" not in st:
            st["seed"] = int(rng.derive("stage", i).integers(0, 2 ** 31))
    codec = {}
    if cfg.codec:
        bitrate = draw_bitrate(rng.derive("codec"), *cfg.bitrate_bps)
        codec = {"bitrate_bps": bitrate, "frame_ms": 20.0, "complexity": 10, "backend": cfg.codec_backend,
                 "mode": "codec-default"}
        stages.append({"kind": "codec", "bitrate_bps": bitrate})
    return SceneManifest(scene_id, f"{scene_id}_m{index:03d}", split, master_seed, sources,
                         {"stages": stages}, codec, rate)


def plan_corpus(cfg: DataConfig, inventory: RirInventory, master_seed: int) -> list[SceneManifest]:
    """All manifests for all splits, without touching audio."""
    scene_ids = sorted(inventory.scenes)
    speakers = list(_speaker_pools(inventory))
    need = sum(cfg.scenes_per_split)
    if len(scene_ids) < need:
        raise ConfigError(f"inventory has {len(scene_ids)} scenes, config needs {need}")
    active = [c for c in cfg.scenes_per_split]
    n_active = sum(1 for c in active if c)
    if len(speakers) < n_active:
        raise ConfigError(f"need at least one speaker per split, have {len(speakers)}")
    root = Rng(master_seed)
    scene_split = assign_splits(scene_ids, cfg.scenes_per_split, root.derive("scenes"))
    # split speakers proportionally to scene counts, at least one each
    spk_counts = [0, 0, 0]
    for i, c in enumerate(active):
        if c:
            spk_counts[i] = max(1, int(len(speakers) * c / need))
    spk_counts[int(np.argmax(active))] += len(speakers) - sum(spk_counts)
    speaker_split = assign_splits(speakers, spk_counts, root.derive("speakers"))
    out = []
    for split in SPLITS:
        for sid in scene_split[split]:
            spks = speaker_split[split]
            srng = root.derive("pin", sid)
            positions = [p.position_id for p in inventory.scenes[sid]]
            pin = {s: positions[int(srng.integers(0, len(positions)))] for s in spks}
            for m in range(cfg.mixtures_per_scene):
                out.append(make_manifest(cfg, inventory, sid, split, spks, pin, m, master_seed))
    return out


def _scene_doc(scene_id: str, split: str, mixtures: list[SceneManifest], cfg: DataConfig) -> dict:
    return {"schema_version": SCHEMA_VERSION, "scene_id": scene_id, "split": split,
            "noise_rir_policy": NOISE_RIR_POLICY, "data_config": cfg.to_dict(),
            "mixtures": [m.to_dict() for m in mixtures]}


def render_mixture(m: SceneManifest, inventory: RirInventory, out: Path) -> dict:
    mix, refs = build_scene(m, inventory)
    clean = np.sum(list(refs.values()), axis=0) if refs else np.zeros(len(mix))
    d = out / m.split / m.scene_id
    write_wav(d / f"{m.mixture_id}.mix.wav", mix, m.sample_rate)
    write_wav(d / f"{m.mixture_id}.clean.wav", clean, m.sample_rate)
    return {"mixture_id": m.mixture_id, "samples": len(mix)}


def generate_corpus(cfg: DataConfig, inventory: RirInventory, master_seed: int, out_dir,
                    workers: int = 1) -> list[SceneManifest]:
    """Write manifests, audio and ``index.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    manifests = plan_corpus(cfg, inventory, master_seed)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(render_mixture, manifests, [inventory] * len(manifests), [out] * len(manifests)))
    else:
        for m in manifests:
            render_mixture(m, inventory, out)
    scenes: dict[str, list[SceneManifest]] = {}
    for m in manifests:
        scenes.setdefault(m.scene_id, []).append(m)
    lines = []
    for sid in sorted(scenes, key=lambda s: (SPLITS.index(scenes[s][0].split), s)):
        ms = scenes[sid]
        split = ms[0].split
        atomic_write_text(out / split / sid / "scene.json",
                          json.dumps(_scene_doc(sid, split, ms, cfg), indent=1, sort_keys=True))
        lines.append(json.dumps({"scene_id": sid, "split": split, "mixtures": [m.mixture_id for m in ms],
                                 "speakers": sorted({s.speaker for m in ms for s in m.sources if s.speaker}),
                                 "duration_s": sum(m.duration for m in ms) / cfg.sample_rate},
                                sort_keys=True))
    atomic_write_text(out / "index.jsonl", "\n".join(lines) + "\n")
    return manifests


def read_index(corpus_dir) -> list[dict]:
    path = Path(corpus_dir) / "index.jsonl"
    if not path.exists():
        raise IngestionError(f"corpus index not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_pairs(corpus_dir, split: str, rate: int = DEFAULT_RATE) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """``(mixture_id, mixture, clean)`` for every mixture of ``split``."""
    root = Path(corpus_dir)
    pairs = []
    for scene in read_index(root):
        if scene["split"] != split:
            continue
        for mid in scene["mixtures"]:
            d = root / split / scene["scene_id"]
            mix, _ = read_wav(d / f"{mid}.mix.wav", rate)
            clean, _ = read_wav(d / f"{mid}.clean.wav", rate)
            pairs.append((mid, mix, clean))
    return pairs


# ---------------------------------------------------------------------------
# Toy assets: synthetic stand-ins for speech, noise, music and RIR tracks


def _resonator(freq: float, bw: float, rate: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / rate)
    a = np.array([1.0, -2 * r * np.cos(2 * np.pi * freq / rate), r * r])
    return np.array([a.sum()]), a


def toy_speech(rng: Rng, f0: float, duration_s: float, rate: int = DEFAULT_RATE,
               floor_db: float = -55.0) -> np.ndarray:
    """Source-filter syllables separated by pauses, over a faint room-tone floor.

    Each syllable is a jittered glottal pulse train plus aspiration noise,
    shaped by three formant resonators drawn per syllable.
    """
    n = int(round(duration_s * rate))
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.1 * rate)))
    while pos < n:
        syl = int(rng.uniform(None, 0.12, 0.3) * rate)
        seg = min(syl, n - pos)
        src = np.zeros(seg)
        t, k = 0.0, 0
        drift = rng.uniform(None, -0.08, 0.08)
        while t < seg:
            src[int(t)] = 1.0
            k += 1
            f = f0 * (1 + drift * t / max(seg, 1)) * (1 + 0.01 * rng.normal((1,), np.float64)[0])
            t += rate / f
        src = lfilter([1.0], [1.0, -0.95], src)  # glottal roll-off
        src += 0.05 * rng.normal((seg,), np.float64)
        for lo, hi, bw in ((300, 800, 80), (900, 2300, 120), (2400, 3400, 200)):
            b_, a_ = _resonator(rng.uniform(None, lo, hi), bw, rate)
            src = lfilter(b_, a_, src)
        env = np.sin(np.pi * np.arange(seg) / max(syl, 1)) ** 2
        out[pos:pos + seg] = src * env
        pos += syl + int(rng.uniform(None, 0.05, 0.35) * rate)
    peak = np.abs(out).max(initial=0.0)
    out = out / peak * 0.3 if peak > 0 else out
    return out + 0.3 * 10 ** (floor_db / 20) * rng.normal((n,), np.float64)


def toy_music(rng: Rng, duration_s: float, rate: int = DEFAULT_RATE) -> np.ndarray:
    n = int(round(duration_s * rate))
    out = np.zeros(n)
    note = int(0.25 * rate)
    for start in range(0, n, note):
        seg = min(note, n - start)
        t = np.arange(seg) / rate
        root = 110 * 2 ** (int(rng.integers(0, 24)) / 12)
        chord = sum(np.sin(2 * np.pi * root * r * t) for r in (1, 1.26, 1.5))
        out[start:start + seg] = chord * np.exp(-3 * t)
    return out / (np.abs(out).max() + 1e-12) * 0.4


def make_toy_assets(out_dir, seed: int, n_scenes: int = 10, n_speakers: int = 12,
                    utterances_per_speaker: int = 3, positions_per_scene: int = 4,
                    track_len: int = 12, rate: int = DEFAULT_RATE) -> Path:
    """Synthetic RIR tracks, speech/noise/music pools and an ``inventory.json``.

    Each scene gets a moving-source track of ``track_len`` RIRs at distances
    from 1 to 8 m; ``positions_per_scene`` of them are kept as fixed positions.
    """
    out = Path(out_dir)
    root = Rng(seed)
    scenes = {}
    for s in range(n_scenes):
        sid = f"room{s:02d}"
        rng = root.derive("room", s)
        rt60 = float(rng.uniform(None, 0.15, 0.5))
        dists = np.linspace(PLACEMENT_RANGE_M[0], PLACEMENT_RANGE_M[1], track_len)
        keep = discretize_positions(list(dists), positions_per_scene)
        positions = []
        for j in keep:
            rir = toy_rir(rng.derive("rir", j), rt60, min(0.5, 1.2 * rt60) + 0.03, rate, float(dists[j]),
                          tail_ratio=0.3)
            path = f"rirs/{sid}/pos{j:02d}.wav"
            write_wav(out / path, rir.samples, rate)
            positions.append(RirPosition(f"pos{j:02d}", path, round(float(dists[j]), 4)))
        scenes[sid] = positions
    pools = {"speech": [], "noise": [], "music": []}
    for k in range(n_speakers):
        rng = root.derive("speaker", k)
        f0 = float(rng.uniform(None, 95, 140) if k % 2 == 0 else rng.uniform(None, 170, 240))
        for u in range(utterances_per_speaker):
            path = f"speech/spk{k:02d}_u{u}.wav"
            write_wav(out / path, toy_speech(rng.derive("utt", u), f0, 3.0, rate), rate)
            pools["speech"].append({"path": path, "speaker": f"spk{k:02d}"})
    for k, color in enumerate(("white", "pink", "brown", "pink")):
        path = f"noise/noise{k}_{color}.wav"
        y = synth_noise(int(4 * rate), int(root.derive("noise", k).integers(0, 2 ** 31)), color)
        write_wav(out / path, 0.1 * y / (np.abs(y).max() / 3 + 1e-12), rate)
        pools["noise"].append({"path": path})
    for k in range(2):
        path = f"music/music{k}.wav"
        write_wav(out / path, toy_music(root.derive("music", k), 4.0, rate), rate)
        pools["music"].append({"path": path})
    inv = RirInventory(scenes, pools, str(out))
    atomic_write_text(out / "inventory.json", json.dumps(inv.to_dict(), indent=1, sort_keys=True))
    return out / "inventory.json"
