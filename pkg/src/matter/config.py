"""Flat ``key = value`` run configuration with typed validation."""
from __future__ import annotations

import dataclasses
import hashlib
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .datapipe import SynthSpec
from .selfsup import TrainConfig, TrainState, init_state
from .tern import TernConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # training
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.6
    weight_decay: float = 0.001
    temperature: float = 0.05
    train_patch: int = 7
    iterations: int = 2000
    checkpoint_every: int = 500
    patches_per_triplet: int = 8
    negatives: str = "triplet"
    grad_clip: float = 5.0
    max_per_region: int = 100
    # encoder
    in_bands: int = 4
    stem_channels: int = 16
    block_channels: tuple = (16, 32)
    descriptor_dim: int = 64
    use_tern: bool = True
    clusters: int = 64
    use_residual_encoder: bool = True
    # texture refinement
    tern_blocks: int = 10
    tern_layers_per_block: int = 3
    tern_kernel_size: int = 3
    tern_dilations: tuple = (1, 1, 2)
    tern_epsilon: float = 1e-6
    tern_normalize: bool = True
    # inference
    window: int = 9
    otsu_bins: int = 256
    # synthetic corpus
    synth_regions: int = 4
    synth_timesteps: int = 8
    synth_size: int = 64
    synth_bands: int = 4
    synth_textures: tuple = ("checkerboard", "grating", "noise")
    synth_cell: int = 32
    synth_gain_low: float = 0.7
    synth_gain_high: float = 1.3
    synth_noise_sigma: float = 0.01
    synth_heldout_pairs: int = 2
    synth_heldout_mosaics: int = 1
    # paths
    catalog: str = ""
    output_dir: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        try:
            self.tern_config()
            self.backbone_config()
            self.train_config()
            self.synth_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.clusters < 1:
            raise ConfigError("clusters must be positive")
        if self.window % 2 == 0 or self.window < 1:
            raise ConfigError("window must be a positive odd integer")
        if self.otsu_bins < 2:
            raise ConfigError("otsu_bins must be at least 2")
        if self.max_per_region < 1:
            raise ConfigError("max_per_region must be positive")

    def substream(self, name: str) -> int:
        """Seed for a named random stream derived from the master seed."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode()),))
        return int(ss.generate_state(1)[0])

    def tern_config(self) -> TernConfig:
        return TernConfig(self.tern_blocks, self.tern_layers_per_block, self.tern_kernel_size,
                          self.tern_dilations, self.tern_epsilon, self.tern_normalize)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.in_bands, self.stem_channels, self.block_channels, self.descriptor_dim,
                              self.tern_config(), self.use_tern, self.substream("init"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.momentum, self.weight_decay,
                           self.temperature, self.train_patch, self.iterations, self.substream("sampling"),
                           self.checkpoint_every, self.patches_per_triplet, self.negatives, self.grad_clip)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(self.substream("synth"), self.synth_regions, self.synth_timesteps, self.synth_size,
                         self.synth_bands, self.synth_textures, self.synth_cell,
                         (self.synth_gain_low, self.synth_gain_high), self.synth_noise_sigma,
                         self.synth_heldout_pairs, self.synth_heldout_mosaics)

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Digest of every key that shapes the model or its training trajectory."""
        text = serialize_config(self, keys=HASHED_KEYS)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}
HASHED_KEYS = tuple(
    name for name in _FIELDS
    if not name.startswith("synth_")
    and name not in {"iterations", "checkpoint_every", "catalog", "output_dir", "checkpoint",
                     "window", "otsu_bins", "max_per_region"}
)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    text = text.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_assignments(lines, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, text = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, text)
    return values


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (``None`` means defaults) then apply ``key=value`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        values = parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p))
    values.update(parse_assignments(list(overrides), "<overrides>"))
    return RunConfig(**values)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg: RunConfig, keys=None) -> str:
    names = keys if keys is not None else list(_FIELDS)
    return "".join(f"{k} = {_format(getattr(cfg, k))}\n" for k in names)


def build_state(cfg: RunConfig) -> TrainState:
    """Freshly initialised model and optimiser for ``cfg``."""
    return init_state(cfg.backbone_config(), cfg.train_config(), cfg.clusters, cfg.use_residual_encoder,
                      bank_seed=cfg.substream("bank"))
