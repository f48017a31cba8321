import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matter.acceptance import otsu_oracle
from matter.backbone import BackboneConfig
from matter.datapipe import DataError, window_array
from matter.selfsup import MatterModel
from matter.tasks import (
    WordMap, change_scores, detect_change, evaluate_pairs, format_grid, otsu_threshold, prf1, rf_sweep,
    word_map, word_purity,
)
from matter.tern import TernConfig


def model():
    cfg = BackboneConfig(in_bands=2, stem_channels=3, block_channels=(4,), descriptor_dim=5,
                         tern=TernConfig(blocks=1), seed=2)
    return MatterModel(cfg, n_clusters=6, bank_seed=3)


def image(seed, shape=(2, 8, 8)):
    return np.random.default_rng(seed).uniform(0.1, 1, size=shape).astype(np.float32)


def test_otsu_two_groups():
    res = otsu_threshold([0, 0, 0, 1, 1, 1])
    assert not res.degenerate
    assert 0 < res.threshold < 1
    v = np.array([0, 0, 0, 1, 1, 1])
    assert np.array_equal(v > res.threshold, v.astype(bool))


def test_otsu_degenerate_and_errors():
    assert otsu_threshold([3.0, 3.0]).degenerate
    assert otsu_threshold([5.0]).edge == -1
    with pytest.raises(ValueError):
        otsu_threshold([])
    with pytest.raises(ValueError):
        otsu_threshold([0.0, np.nan])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=60), st.sampled_from([4, 16, 256]))
def test_otsu_partition_matches_exhaustive_oracle(values, bins):
    v = np.array(values)
    res = otsu_threshold(v, bins)
    best = otsu_oracle(v, bins)
    if best == -1:
        assert res.degenerate
        return
    counts = np.histogram(v, bins=bins, range=(v.min(), v.max()))[0]
    lo, hi = sorted((res.edge, best))
    assert counts[lo:hi].sum() == 0


def test_change_scores_identity_and_symmetry():
    m, a, b = model(), image(0), image(1)
    assert np.all(change_scores(a, a, m) == 0)
    np.testing.assert_allclose(change_scores(a, b, m), change_scores(b, a, m), atol=1e-6)


def test_change_scores_loop_oracle():
    m, a, b = model(), image(2, (2, 5, 6)), image(3, (2, 5, 6))
    wa, wb = window_array(a, 3), window_array(b, 3)
    expect = np.array([np.linalg.norm(m.describe(wa[i:i + 1])[0] - m.describe(wb[i:i + 1])[0]) for i in range(30)])
    np.testing.assert_allclose(change_scores(a, b, m, 3).ravel(), expect, atol=1e-5)


def test_change_shape_mismatch():
    with pytest.raises(DataError):
        change_scores(image(0), image(1, (2, 8, 9)), model())


def test_detect_change_identical_images_is_unchanged():
    cm = detect_change(image(4), image(4), model())
    assert cm.degenerate and not cm.mask.any()


def test_detect_change_mask_is_thresholded_score():
    cm = detect_change(image(5), image(6), model())
    assert np.array_equal(cm.mask, cm.score > cm.threshold)


def test_prf1_examples():
    rep = prf1([1, 1, 0, 0], [1, 0, 1, 0])
    assert (rep.precision, rep.recall, rep.f1) == (50.0, 50.0, 50.0)
    assert (rep.tp, rep.fp, rep.fn) == (1, 1, 1)
    assert prf1([0, 0], [0, 0]).f1 == 0.0
    assert prf1([1, 1], [1, 1]).f1 == 100.0
    with pytest.raises(ValueError):
        prf1([1], [1, 0])


def test_prf1_table_rows():
    for p, r, f in [(37.52, 72.65, 49.48), (61.80, 57.13, 59.37)]:
        tp = 1_000_000
        fp, fn = round(tp * (100 - p) / p), round(tp * (100 - r) / r)
        pred = np.r_[np.ones(tp + fp, bool), np.zeros(fn, bool)]
        gt = np.r_[np.ones(tp, bool), np.zeros(fp, bool), np.ones(fn, bool)]
        assert abs(prf1(pred, gt).f1 - f) <= 0.01


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_prf1_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.random(50) < 0.4, rng.random(50) < 0.5
    perm = rng.permutation(50)
    assert prf1(pred, gt) == prf1(pred[perm], gt[perm])


def test_word_map_constant_and_deterministic():
    m = model()
    const = np.full((2, 6, 6), 0.5, dtype=np.float32)
    wm = word_map(const, m)
    assert wm.words.shape == (6, 6) and np.all(wm.words == wm.words[0, 0])
    img = image(7)
    assert np.array_equal(word_map(img, m).words, word_map(img, m).words)
    assert word_map(img, m).words.max() < 6
    with pytest.raises(ValueError):
        WordMap(np.array([[6]]), 6)


def test_word_purity():
    words = np.array([0, 0, 1, 2, 2, 2])
    labels = np.array([0, 0, 0, 1, 1, 1])
    assert word_purity(words, labels) == {0: pytest.approx(2 / 3), 1: 1.0}


def test_rf_sweep_grid_and_consistency():
    m = model()
    a, b = image(8), image(9)
    gt = np.zeros((8, 8), bool)
    gt[:4] = True
    pairs = [(a, b, gt)]
    seen = []

    def train_fn(catalog, size):
        seen.append(size)
        return m

    grid = rf_sweep(None, [7, 17], [3, 9], pairs, train_fn)
    assert grid.shape == (2, 2) and seen == [7, 17]
    assert grid[0, 1] == pytest.approx(evaluate_pairs(m, pairs, 9).f1)
    with pytest.raises(ValueError):
        rf_sweep(None, [8], [9], pairs, train_fn)


def test_format_grid():
    text = format_grid([7, 17], [9], np.array([[48.58], [46.81]]))
    assert text == "train\\infer\t9\n7\t48.58\n17\t46.81\n"
