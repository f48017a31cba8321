"""Self-supervised material and texture descriptors for multi-spectral imagery."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_state, parse_config, serialize_config
from .datapipe import CatalogEntry, DataError, MultiSpectralImage, SynthSpec, read_raster, synth_generate, write_raster
from .estimator import ChangeDetector, MatterEncoder
from .numcore import NumericalError
from .selfsup import MatterModel, TrainConfig, TrainState, pretrain
from .tasks import detect_change, otsu_threshold, prf1, word_map

__version__ = "0.1.0"

__all__ = [
    "CatalogEntry", "ChangeDetector", "CheckpointError", "ConfigError", "DataError", "MatterEncoder",
    "MatterModel", "MultiSpectralImage", "NumericalError", "RunConfig", "SynthSpec", "TrainConfig",
    "TrainState", "build_state", "detect_change", "load_checkpoint", "otsu_threshold", "parse_config",
    "prf1", "pretrain", "read_raster", "save_checkpoint", "serialize_config", "synth_generate",
    "word_map", "write_raster",
]
