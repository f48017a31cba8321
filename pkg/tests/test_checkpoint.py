import struct

import numpy as np
import pytest

from matter.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from matter.config import RunConfig, build_state
from matter.datapipe import synth_generate
from matter.selfsup import pretrain

TINY = dict(in_bands=2, stem_channels=3, block_channels=(3,), descriptor_dim=4, clusters=3, tern_blocks=1,
            batch_size=2, patches_per_triplet=2, iterations=2, synth_bands=2, synth_size=14, synth_cell=7,
            synth_regions=2, synth_timesteps=2)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = RunConfig(**TINY)
    cat = synth_generate(cfg.synth_spec(), tmp_path_factory.mktemp("data")).entries
    return cfg, pretrain(cat, cfg.train_config(), build_state(cfg)), cat


def test_round_trip_is_byte_identical(tmp_path, trained):
    cfg, state, _ = trained
    save_checkpoint(state, tmp_path / "a.mtck", cfg)
    ck = load_checkpoint(tmp_path / "a.mtck")
    assert ck.config == cfg and ck.state.iteration == 2 and ck.state.losses == pytest.approx(state.losses)
    assert encode_checkpoint(ck.config, ck.state) == (tmp_path / "a.mtck").read_bytes()
    for (_, p), (_, q) in zip(state.model.named_parameters(), ck.state.model.named_parameters()):
        assert np.array_equal(p, q)


def test_resume_from_checkpoint_matches(tmp_path, trained):
    cfg, state, cat = trained
    half = pretrain(cat, cfg.replace(iterations=1).train_config(), build_state(cfg))
    blob = encode_checkpoint(cfg, half)
    resumed = pretrain(cat, cfg.train_config(), decode_checkpoint(blob).state)
    assert encode_checkpoint(cfg, resumed) == encode_checkpoint(cfg, state)


def test_no_residual_encoder_keeps_bank(trained):
    cfg = RunConfig(**{**TINY, "use_residual_encoder": False})
    state = build_state(cfg)
    ck = decode_checkpoint(encode_checkpoint(cfg, state))
    assert np.array_equal(ck.state.model.bank.centers, state.model.bank.centers)


def test_truncation_and_corruption(trained):
    cfg, state, _ = trained
    blob = encode_checkpoint(cfg, state)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(blob[:4] + struct.pack("<I", 99) + blob[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(blob + b"\0")


def test_refuses_other_config_hash(trained, tmp_path):
    cfg, state, _ = trained
    blob = encode_checkpoint(cfg, state)
    other = cfg.replace(seed=1).config_hash()
    with pytest.raises(CheckpointError, match="hash mismatch"):
        decode_checkpoint(blob, other)
    assert decode_checkpoint(blob, cfg.config_hash()).state.iteration == 2
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.mtck")
