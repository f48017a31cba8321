import numpy as np
import pytest

from matter.backbone import BackboneConfig
from matter.datapipe import SynthSpec, synth_generate
from matter.numcore import NumericalError, finite_diff_check
from matter.selfsup import (
    Batch, MatterModel, TrainConfig, batch_nce, init_state, nce_loss, nce_loss_grad, pretrain, sample_batch,
    train_step, write_loss_curve,
)
from matter.tern import TernConfig


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_nce_two_equal_candidates_is_ln2():
    a = np.array([1.0, 0.0])
    assert nce_loss(a, a, a[None], 0.05) == pytest.approx(np.log(2))


def test_nce_orthogonal_negative():
    a, n = np.array([1.0, 0.0]), np.array([[0.0, 1.0]])
    assert nce_loss(a, a, n, 1.0) == pytest.approx(np.log(1 + np.exp(-1)))
    assert nce_loss(a, a, n, 0.05) < 1e-8


def test_nce_gradients():
    rng = np.random.default_rng(0)
    a, p, n = unit(rng.normal(size=4)), unit(rng.normal(size=4)), unit(rng.normal(size=(3, 4)))
    _, da, dp, dn = nce_loss_grad(a, p, n, 0.5)
    assert finite_diff_check(lambda x: nce_loss(x, p, n, 0.5), a, da, eps=1e-6) < 1e-4
    assert finite_diff_check(lambda x: nce_loss(a, x, n, 0.5), p, dp, eps=1e-6) < 1e-4
    assert finite_diff_check(lambda x: nce_loss(a, p, x, 0.5), n, dn, eps=1e-6) < 1e-4


def test_nce_errors():
    a = np.ones(2)
    with pytest.raises(ValueError):
        nce_loss(a, a, np.zeros((0, 2)))
    with pytest.raises(ValueError):
        nce_loss(a, a, a[None], 0.0)


def test_batch_nce_matches_per_anchor_oracle():
    rng = np.random.default_rng(1)
    fa, fp, fn = (unit(rng.normal(size=(4, 3))) for _ in range(3))
    loss, *_ = batch_nce(fa, fp, fn, 0.3)
    expect = []
    for m in range(4):
        negs = [fp[j] for j in range(4) if j != m] + list(fn) + [fa[j] for j in range(4) if j != m]
        expect.append(nce_loss(fa[m], fp[m], np.array(negs), 0.3))
    assert loss == pytest.approx(np.mean(expect), rel=1e-12)


def test_batch_nce_grouped_matches_oracle():
    rng = np.random.default_rng(2)
    fa, fp, fn = (unit(rng.normal(size=(4, 3))) for _ in range(3))
    group = np.array([0, 0, 1, 1])
    loss, *_ = batch_nce(fa, fp, fn, 0.3, group)
    expect = [nce_loss(fa[m], fp[m], fn[group == group[m]], 0.3) for m in range(4)]
    assert loss == pytest.approx(np.mean(expect), rel=1e-12)


@pytest.mark.parametrize("grouped", [False, True])
def test_batch_nce_gradients(grouped):
    rng = np.random.default_rng(3)
    fa, fp, fn = (unit(rng.normal(size=(4, 3))) for _ in range(3))
    group = np.array([0, 0, 1, 1]) if grouped else None
    _, da, dp, dn = batch_nce(fa, fp, fn, 0.5, group)
    for x, g in ((fa, da), (fp, dp), (fn, dn)):
        assert finite_diff_check(lambda _: batch_nce(fa, fp, fn, 0.5, group)[0], x, g, eps=1e-6) < 1e-4


def tiny_setup(tmp_path, **train):
    spec = SynthSpec(seed=1, regions=2, timesteps=2, size=14, bands=2, cell=7, heldout_pairs=0, heldout_mosaics=0)
    catalog = synth_generate(spec, tmp_path).entries
    bcfg = BackboneConfig(in_bands=2, stem_channels=3, block_channels=(3,), descriptor_dim=4, tern=TernConfig(blocks=1))
    tcfg = TrainConfig(**{"batch_size": 2, "patches_per_triplet": 2, "iterations": 3, **train})
    return catalog, bcfg, tcfg


def test_sample_batch_deterministic(tmp_path):
    catalog, _, tcfg = tiny_setup(tmp_path)
    a, b = sample_batch(catalog, tcfg, 5), sample_batch(catalog, tcfg, 5)
    assert np.array_equal(a.anchor, b.anchor) and np.array_equal(a.negative, b.negative)
    assert a.anchor.shape == (4, 2, 7, 7) and a.group.tolist() == [0, 0, 1, 1]
    assert not np.array_equal(sample_batch(catalog, tcfg, 6).anchor, a.anchor)


@pytest.mark.parametrize("negatives", ["batch", "triplet"])
def test_pretrain_deterministic_and_finite(tmp_path, negatives):
    catalog, bcfg, tcfg = tiny_setup(tmp_path, negatives=negatives)
    runs = [pretrain(catalog, tcfg, init_state(bcfg, tcfg, 4)) for _ in range(2)]
    assert runs[0].losses == runs[1].losses and len(runs[0].losses) == 3
    assert all(np.isfinite(runs[0].losses))
    for (_, p), (_, q) in zip(runs[0].model.named_parameters(), runs[1].model.named_parameters()):
        assert np.array_equal(p, q)


def test_resume_matches_uninterrupted(tmp_path):
    catalog, bcfg, tcfg = tiny_setup(tmp_path)
    full = pretrain(catalog, tcfg, init_state(bcfg, tcfg, 4))
    part = pretrain(catalog, TrainConfig(**{**tcfg.__dict__, "iterations": 1}), init_state(bcfg, tcfg, 4))
    resumed = pretrain(catalog, tcfg, part)
    assert resumed.losses == full.losses


def test_checkpoint_callback(tmp_path):
    catalog, bcfg, tcfg = tiny_setup(tmp_path, iterations=4, checkpoint_every=2)
    seen = []
    pretrain(catalog, tcfg, init_state(bcfg, tcfg, 4), on_checkpoint=lambda s: seen.append(s.iteration))
    assert seen == [2, 4, 4]


def test_train_step_rejects_nan_and_wrong_size(tmp_path):
    catalog, bcfg, tcfg = tiny_setup(tmp_path)
    state = init_state(bcfg, tcfg, 4)
    batch = sample_batch(catalog, tcfg, 0)
    bad = Batch(batch.anchor * np.nan, batch.positive, batch.negative, batch.group)
    with pytest.raises(NumericalError):
        train_step(state, bad, tcfg)
    with pytest.raises(Exception):
        train_step(state, Batch(batch.anchor[..., :5, :5], batch.positive, batch.negative, batch.group), tcfg)


def test_gradient_clipping_bounds_update(tmp_path):
    catalog, bcfg, _ = tiny_setup(tmp_path)
    tcfg = TrainConfig(batch_size=2, patches_per_triplet=2, grad_clip=1e-3, momentum=0.0, weight_decay=0.0)
    state = init_state(bcfg, tcfg, 4)
    before = [p.copy() for _, p in state.model.named_parameters()]
    train_step(state, sample_batch(catalog, tcfg, 0), tcfg)
    step = np.sqrt(sum(np.sum((p - b).astype(np.float64) ** 2) for (_, p), b in zip(state.model.named_parameters(), before)))
    assert step <= tcfg.learning_rate * 1e-3 * (1 + 1e-4)


def test_model_without_residual_encoder_has_no_bank_params():
    cfg = BackboneConfig(in_bands=1, stem_channels=2, block_channels=(2,), descriptor_dim=3)
    names = [n for n, _ in MatterModel(cfg, n_clusters=2, use_residual_encoder=False).named_parameters()]
    assert not any(n.startswith("bank") for n in names)
    assert [n for n, _ in MatterModel(cfg, n_clusters=2).named_parameters()][-2:] == ["bank.centers", "bank.log_s"]


def test_train_config_validation():
    for bad in ({"temperature": 0}, {"batch_size": 0}, {"negatives": "all"}, {"momentum": 1.0}, {"train_patch": 2}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_loss_curve_format(tmp_path):
    p = tmp_path / "loss.tsv"
    write_loss_curve(p, [0.5, 0.25])
    assert p.read_text() == "1\t0.5\n2\t0.25\n"
