from pathlib import Path

import numpy as np
import pytest

from matter.datapipe import (
    CatalogEntry, DataError, MultiSpectralImage, SynthSpec, dense_windows, filter_catalog, read_catalog,
    read_raster, sample_triplet, synth_change_pair, synth_generate, synth_region, tile_array, tile_image,
    window_array, write_catalog, write_raster,
)


def entry(region="a", ts=0, cloud=0.0, cov=1.0, path="x.msr"):
    return CatalogEntry(region, ts, cloud, cov, path)


def test_raster_round_trip_and_header(tmp_path):
    a = np.random.default_rng(0).uniform(size=(3, 4, 5)).astype(np.float32)
    p = tmp_path / "r.msr"
    write_raster(p, a)
    raw = p.read_bytes()
    assert raw.startswith(b"MSR1 3 4 5\n")
    assert raw[len(b"MSR1 3 4 5\n"):] == a.astype("<f4").tobytes()
    assert np.array_equal(read_raster(p), a)


def test_raster_errors(tmp_path):
    p = tmp_path / "bad.msr"
    p.write_bytes(b"TIFF 1 2 2\n" + b"\0" * 16)
    with pytest.raises(DataError):
        read_raster(p)
    p.write_bytes(b"MSR1 1 2 2\n" + b"\0" * 12)
    with pytest.raises(DataError, match="payload"):
        read_raster(p)
    with pytest.raises(DataError):
        write_raster(tmp_path / "x.msr", np.zeros(4))


def test_image_validation():
    with pytest.raises(DataError):
        MultiSpectralImage(np.full((1, 2, 2), -1.0))
    with pytest.raises(DataError):
        MultiSpectralImage(np.full((1, 2, 2), np.nan))
    assert MultiSpectralImage(np.ones((4, 4))).bands == 1


def test_catalog_round_trip_with_comments(tmp_path):
    entries = [entry("b", 5, 0.1, 0.9, str(tmp_path / "img" / "b5.msr")), entry("a", 1, 0.0, 1.0, str(tmp_path / "a1.msr"))]
    path = tmp_path / "cat.tsv"
    write_catalog(path, entries)
    text = path.read_text()
    assert text.startswith("#")
    assert "img/b5.msr" in text
    assert read_catalog(path) == entries


def test_catalog_errors(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("a\t1\t0.1\n")
    with pytest.raises(DataError):
        read_catalog(p)
    p.write_text("a\t1\t1.5\t1.0\tx.msr\n")
    with pytest.raises(DataError):
        read_catalog(p)


def test_filter_thresholds():
    assert filter_catalog([entry(cloud=0.25)]) == []
    assert filter_catalog([entry(cov=0.79)]) == []
    kept = [entry(cloud=0.0, cov=1.0), entry(ts=1, cloud=0.20, cov=0.80)]
    assert filter_catalog(kept) == kept


def test_filter_caps_region_keeping_earliest():
    entries = [entry("r", ts) for ts in range(150, 0, -1)]
    out = filter_catalog(entries, 100)
    assert len(out) == 100
    assert [e.timestamp for e in out] == list(range(1, 101))


def test_filter_sorted_and_idempotent():
    rng = np.random.default_rng(1)
    entries = [entry(str(rng.choice(list("abc"))), int(rng.integers(100)), float(rng.uniform(0, 0.4)),
                     float(rng.uniform(0.6, 1))) for _ in range(60)]
    once = filter_catalog(entries, 5)
    assert once == sorted(once, key=lambda e: (e.region_id, e.timestamp))
    assert filter_catalog(once, 5) == once


def test_tiling_counts():
    assert len(tile_image(MultiSpectralImage(np.ones((2, 14, 14))), 7)) == 4
    assert len(tile_image(MultiSpectralImage(np.ones((2, 15, 15))), 7)) == 4
    assert len(tile_image(MultiSpectralImage(np.ones((1, 1096, 1096))), 1096)) == 1
    with pytest.raises(DataError):
        tile_image(MultiSpectralImage(np.ones((1, 5, 5))), 7)


def test_tiling_round_trip():
    px = np.random.default_rng(2).uniform(size=(3, 14, 21)).astype(np.float32)
    tiles = tile_image(MultiSpectralImage(px), 7)
    rebuilt = np.block([[tiles[r * 3 + c].pixels for c in range(3)] for r in range(2)])
    assert np.array_equal(rebuilt, px)
    arr, coords = tile_array(px, 7)
    assert np.array_equal(arr, np.stack([t.pixels for t in tiles]))
    assert coords[:4] == [(0, 0), (0, 7), (0, 14), (7, 0)]


def _two_region_catalog(tmp_path, gain=1.0, noise=0.0):
    spec = SynthSpec(seed=3, regions=2, timesteps=2, size=14, bands=2, cell=7, gain_range=(gain, gain),
                     noise_sigma=noise, heldout_pairs=0, heldout_mosaics=0)
    return synth_generate(spec, tmp_path).entries


def test_triplet_only_legal_assignment(tmp_path):
    cat = _two_region_catalog(tmp_path)
    for seed in range(5):
        t = sample_triplet(cat, seed, 7)
        assert t.anchor_key[0] == t.positive_key[0] != t.negative_key[0]
        assert t.positive_key[1] > t.anchor_key[1]
        assert t.anchor.shape == t.positive.shape == t.negative.shape == (4, 2, 7, 7)


def test_triplet_alignment_without_noise(tmp_path):
    t = sample_triplet(_two_region_catalog(tmp_path), 0, 7)
    assert np.array_equal(t.anchor, t.positive)


def test_triplet_deterministic_and_errors(tmp_path):
    cat = _two_region_catalog(tmp_path, gain=1.1, noise=0.01)
    a, b = sample_triplet(cat, 42, 7), sample_triplet(cat, 42, 7)
    assert np.array_equal(a.anchor, b.anchor) and np.array_equal(a.negative, b.negative)
    assert a.anchor_key == b.anchor_key and a.negative_key == b.negative_key
    with pytest.raises(DataError):
        sample_triplet([e for e in cat if e.region_id == cat[0].region_id], 0, 7)
    one_each = [cat[0], [e for e in cat if e.region_id != cat[0].region_id][0]]
    with pytest.raises(DataError):
        sample_triplet(one_each, 0, 7)


def test_dense_windows():
    px = np.random.default_rng(4).uniform(size=(2, 5, 5)).astype(np.float32)
    wins = list(dense_windows(MultiSpectralImage(px), 9))
    assert len(wins) == 25
    assert all(w.shape == (2, 9, 9) for _, w in wins)
    padded = np.stack([np.pad(c, 4, mode="reflect") for c in px])
    (r, c), corner = wins[0]
    assert (r, c) == (0, 0)
    assert np.array_equal(corner, padded[:, 0:9, 0:9])
    big = np.random.default_rng(5).uniform(size=(1, 12, 12)).astype(np.float32)
    w = window_array(big, 3)
    assert np.array_equal(w[5 * 12 + 6], big[:, 4:7, 5:8])
    with pytest.raises(DataError):
        window_array(big, 4)


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(seed=9, regions=2, timesteps=2, size=16, cell=8, heldout_pairs=1, heldout_mosaics=1)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_unit_gain_no_noise_timesteps_identical():
    spec = SynthSpec(regions=1, timesteps=3, size=16, cell=8, gain_range=(1, 1), noise_sigma=0)
    _, caps = synth_region(spec, 0)
    assert all(np.array_equal(caps[0], c) for c in caps[1:])


def test_synth_timesteps_differ_only_by_gain():
    spec = SynthSpec(regions=1, timesteps=3, size=16, cell=8, noise_sigma=0)
    _, caps = synth_region(spec, 0)
    ratio = caps[1] / caps[0]
    np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-5)


def test_synth_change_pair_mask():
    spec = SynthSpec(size=64, cell=32)
    img1, img2, mask, l1, l2 = synth_change_pair(spec, 0)
    assert mask.sum() == 32 * 32
    assert np.array_equal(mask, l1 != l2)
    assert img1.shape == img2.shape == (4, 64, 64)


def test_synth_validation():
    with pytest.raises(DataError):
        SynthSpec(textures=("noise",))
    with pytest.raises(DataError):
        SynthSpec(timesteps=1)
    with pytest.raises(DataError):
        SynthSpec(gain_range=(1.3, 0.7))


def test_catalog_relative_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    spec = SynthSpec(regions=2, timesteps=2, size=16, cell=8, heldout_pairs=0, heldout_mosaics=0)
    out = synth_generate(spec, "data")
    entries = read_catalog(out.catalog_path)
    assert all(Path(e.path).exists() for e in entries)
