import json

import numpy as np
import pytest

from stillflow import datasetgen as dg
from stillflow.errors import ConfigError, ContractError, IngestionError
from stillflow.numeric import Rng
from stillflow.signal import read_wav, write_wav

RATE = 8000


def test_discretize_positions():
    track = list(range(10))
    assert dg.discretize_positions(track, 1) == [0]
    assert dg.discretize_positions(track, 2) == [0, 9]
    assert dg.discretize_positions(list(range(9)), 3) == [0, 4, 8]
    with pytest.raises(ContractError):
        dg.discretize_positions(track, 11)


def test_toy_rir_decay_reaches_minus_60_db_at_rt60():
    rt60 = 0.3
    energy = np.mean([dg.toy_rir(Rng(s), rt60, 0.5).samples[1:] ** 2 for s in range(400)], axis=0)
    t = np.arange(1, len(energy) + 1) / RATE
    slope, intercept = np.polyfit(t, 10 * np.log10(energy), 1)
    assert abs(slope * rt60 - (-60.0)) < 1.0


def test_toy_rir_limits_and_determinism():
    h = dg.toy_rir(Rng(1), 1e-4, 0.1).samples
    assert h[0] == 1.0 and np.sum(h[1:] ** 2) < 1e-6
    assert np.array_equal(dg.toy_rir(Rng(2), 0.3, 0.2).samples, dg.toy_rir(Rng(2), 0.3, 0.2).samples)
    with pytest.raises(ContractError):
        dg.toy_rir(Rng(0), 0.0, 0.1)
    far = dg.toy_rir(Rng(0), 0.3, 0.2, distance_m=3.43)
    assert np.argmax(np.abs(far.samples)) == 80 and abs(far.samples[80] - 1 / 3.43) < 1e-12


@pytest.fixture
def tiny_inventory(tmp_path):
    g = np.random.default_rng(0)
    write_wav(tmp_path / "delta.wav", np.r_[0.5, np.zeros(9)])
    write_wav(tmp_path / "room.wav", np.r_[0.0, 0.0, 0.6, 0.2, -0.1, 0.05])
    for name in ("a", "b"):
        write_wav(tmp_path / f"{name}.wav", 0.3 * g.uniform(-1, 1, 2000))
    write_wav(tmp_path / "n.wav", 0.1 * g.uniform(-1, 1, 3000))
    inv = dg.RirInventory(
        {"s1": [dg.RirPosition("p0", "delta.wav", 2.0), dg.RirPosition("p1", "room.wav")]},
        {"speech": [{"path": "a.wav", "speaker": "A"}, {"path": "b.wav", "speaker": "B"}],
         "noise": [{"path": "n.wav"}]},
        str(tmp_path))
    return inv


def manifest(sources, **kw):
    return dg.SceneManifest("s1", "s1_m000", "train", 0, sources, **kw)


def test_single_source_delta_rir(tiny_inventory):
    src = dg.SourceEntry("speech", "a.wav", "p0", 100, 1500, 10, "A")
    mix, refs = dg.build_scene(manifest([src]), tiny_inventory)
    # delta scaled by 0.5 (1/distance at 2 m): no gain normalisation
    assert np.abs(mix - 0.5 * refs["A"]).max() < 1e-12
    assert len(mix) == 1600
    x, _ = read_wav(tiny_inventory.resolve("a.wav"))
    assert np.abs(refs["A"][100:1600] - x[10:1510]).max() < 1e-7


def test_mixture_length_and_superposition(tiny_inventory):
    a = dg.SourceEntry("speech", "a.wav", "p0", 0, 1000, 0, "A")
    b = dg.SourceEntry("speech", "b.wav", "p1", 700, 1100, 5, "B")
    both, refs = dg.build_scene(manifest([a, b]), tiny_inventory)
    assert len(both) == 1800
    only_a, _ = dg.build_scene(manifest([a]), tiny_inventory)
    only_b, _ = dg.build_scene(manifest([b]), tiny_inventory)
    total = np.zeros(1800)
    total[:len(only_a)] += only_a
    total[:len(only_b)] += only_b
    assert np.abs(both - total).max() < 1e-6
    assert set(refs) == {"A", "B"}


def test_noise_scaled_to_snr(tiny_inventory):
    a = dg.SourceEntry("speech", "a.wav", "p0", 0, 1600, 0, "A")
    n = dg.SourceEntry("noise", "n.wav", "p1", 0, 1600, 0, snr_db=5.0)
    mix, _ = dg.build_scene(manifest([a, n]), tiny_inventory)
    speech, _ = dg.build_scene(manifest([a]), tiny_inventory)
    noise = mix - speech
    assert abs(10 * np.log10(np.mean(speech ** 2) / np.mean(noise ** 2)) - 5.0) < 1e-6


def test_manifest_invariants(tiny_inventory):
    with pytest.raises(ContractError):
        manifest([dg.SourceEntry("speech", "a.wav", "p0", 0, 10, 0, "A"),
                  dg.SourceEntry("speech", "b.wav", "p1", 0, 10, 0, "A")])
    with pytest.raises(ContractError):
        dg.build_scene(manifest([dg.SourceEntry("speech", "a.wav", "p9", 0, 10, 0, "A")]), tiny_inventory)
    with pytest.raises(IngestionError, match="missing.wav"):
        dg.build_scene(manifest([dg.SourceEntry("speech", "missing.wav", "p0", 0, 10, 0, "A")]), tiny_inventory)
    m = manifest([dg.SourceEntry("speech", "a.wav", "p0", 0, 10, 0, "A")])
    assert dg.SceneManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m


def test_inventory_distance_range(tmp_path):
    with pytest.raises(ConfigError):
        dg.RirInventory({"s": [dg.RirPosition("p", "x.wav", 9.5)]})
    with pytest.raises(IngestionError):
        dg.RirInventory.load(tmp_path / "nope.json")


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    inv_path = dg.make_toy_assets(root / "assets", seed=0, n_speakers=6, utterances_per_speaker=2)
    inv = dg.RirInventory.load(inv_path)
    cfg = dg.DataConfig(mixtures_per_scene=2, mixture_s=1.0, speakers_per_mixture=2)
    manifests = dg.generate_corpus(cfg, inv, 7, root / "c1")
    return root, inv, cfg, manifests


def test_splits_are_disjoint(toy_corpus):
    root, _, _, manifests = toy_corpus
    index = dg.read_index(root / "c1")
    scenes, speakers = {}, {}
    for row in index:
        scenes.setdefault(row["split"], set()).add(row["scene_id"])
        speakers.setdefault(row["split"], set()).update(row["speakers"])
    assert [len(scenes[s]) for s in dg.SPLITS] == [6, 2, 2]
    for a in dg.SPLITS:
        for b in dg.SPLITS:
            if a < b:
                assert not scenes[a] & scenes[b]
                assert not speakers[a] & speakers[b]


def test_duration_accounting(toy_corpus):
    _, _, cfg, manifests = toy_corpus
    for split in dg.SPLITS:
        total = sum(m.duration for m in manifests if m.split == split) / RATE
        assert abs(total - cfg.target_duration_s(split)) <= 0.05 * cfg.target_duration_s(split)


def test_corpus_regenerates_bitwise(toy_corpus):
    root, inv, cfg, manifests = toy_corpus
    again = dg.generate_corpus(cfg, inv, 7, root / "c2")
    assert [m.to_dict() for m in again] == [m.to_dict() for m in manifests]
    files = sorted(p.relative_to(root / "c1") for p in (root / "c1").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (root / "c1" / f).read_bytes() == (root / "c2" / f).read_bytes()


def test_manifests_carry_codec_and_policy(toy_corpus):
    root, _, _, manifests = toy_corpus
    for m in manifests:
        assert 30000 <= m.codec["bitrate_bps"] <= 40000
        assert m.distortions["stages"][-1]["kind"] == "codec"
        assert m.noise_rir_policy == "independent-per-clip"
    doc = json.loads(next((root / "c1").rglob("scene.json")).read_text())
    assert doc["schema_version"] == dg.SCHEMA_VERSION
    pairs = dg.load_pairs(root / "c1", "test")
    assert len(pairs) == 4 and all(len(m) == len(c) for _, m, c in pairs)


def test_insufficient_pool(toy_corpus):
    _, inv, _, _ = toy_corpus
    with pytest.raises(ConfigError):
        dg.plan_corpus(dg.DataConfig(scenes_per_split=(9, 2, 2)), inv, 0)
