"""Imagery I/O, catalog curation, triplet sampling and the synthetic corpus."""
from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .numcore import reflect_pad

log = logging.getLogger(__name__)

RASTER_MAGIC = "MSR1"
MAX_CLOUD = 0.20
MIN_COVERAGE = 0.80
TEXTURE_KINDS = ("checkerboard", "grating", "noise")


class DataError(ValueError):
    """Malformed imagery, manifest, or an unsatisfiable sampling request."""


@dataclass
class MultiSpectralImage:
    pixels: np.ndarray
    region_id: str = ""
    timestamp: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3 or min(self.pixels.shape) < 1:
            raise DataError(f"pixels must be B x H x W, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataError("pixels must be finite")
        if np.any(self.pixels < 0):
            raise DataError("pixels must be non-negative")
        if self.bands < 2:
            log.debug("image %s has a single band; cosine guidance is uninformative", self.region_id)

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class CatalogEntry:
    region_id: str
    timestamp: int
    cloud_cover: float
    data_coverage: float
    path: str

    def __post_init__(self):
        for name in ("cloud_cover", "data_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name}={v} outside [0, 1]")


@dataclass
class Triplet:
    anchor: np.ndarray  # P,B,h,w
    positive: np.ndarray
    negative: np.ndarray
    coords: list  # (row, col) of each anchor/positive patch
    anchor_key: tuple
    positive_key: tuple
    negative_key: tuple

    @property
    def n_patches(self) -> int:
        return self.anchor.shape[0]


# --- raster and manifest formats -------------------------------------------

def write_raster(path, pixels: np.ndarray) -> None:
    a = np.asarray(pixels, dtype="<f4")
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DataError(f"raster must be B x H x W, got {a.shape}")
    b, h, w = a.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{RASTER_MAGIC} {b} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) != 4 or parts[0] != RASTER_MAGIC:
        raise DataError(f"{path}: not an {RASTER_MAGIC} raster")
    try:
        b, h, w = (int(p) for p in parts[1:])
    except ValueError as exc:
        raise DataError(f"{path}: bad raster header {header!r}") from exc
    if len(payload) != 4 * b * h * w:
        raise DataError(f"{path}: expected {4 * b * h * w} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(b, h, w).astype(np.float32)


@lru_cache(maxsize=512)
def _cached_raster(path: str, mtime: float) -> np.ndarray:
    a = read_raster(path)
    a.setflags(write=False)
    return a


def load_raster(path) -> np.ndarray:
    """Read-only cached :func:`read_raster`."""
    path = os.fspath(path)
    return _cached_raster(path, os.path.getmtime(path))


def load_image(entry: CatalogEntry) -> MultiSpectralImage:
    return MultiSpectralImage(load_raster(entry.path), entry.region_id, entry.timestamp)


def read_catalog(path) -> list:
    """Parse a tab-separated manifest; relative raster paths resolve against it."""
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated fields")
            region, ts, cloud, cov, raster = parts
            try:
                entry = CatalogEntry(region, int(ts), float(cloud), float(cov), str(base / raster))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            entries.append(entry)
    return entries


def write_catalog(path, entries: Sequence[CatalogEntry]) -> None:
    base = Path(path).parent
    lines = ["# region_id\ttimestamp\tcloud\tcoverage\tpath"]
    for e in entries:
        rel = os.path.relpath(os.path.abspath(e.path), os.path.abspath(base))
        lines.append(f"{e.region_id}\t{e.timestamp}\t{e.cloud_cover:g}\t{e.data_coverage:g}\t{rel}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- catalog curation and sampling -----------------------------------------

def filter_catalog(entries: Sequence[CatalogEntry], max_per_region: int = 100) -> list:
    """Drop cloudy or poorly covered captures and cap each region's history.

    Keeps the earliest ``max_per_region`` captures per region; output is
    sorted by (region, timestamp).
    """
    kept = [e for e in entries if e.cloud_cover <= MAX_CLOUD and e.data_coverage >= MIN_COVERAGE]
    kept.sort(key=lambda e: (e.region_id, e.timestamp, e.path))
    out, counts = [], {}
    for e in kept:
        n = counts.get(e.region_id, 0)
        if n < max_per_region:
            out.append(e)
            counts[e.region_id] = n + 1
    return out


def tile_image(img: MultiSpectralImage, tile: int) -> list:
    """Non-overlapping tile x tile crops in row-major order; remainders dropped."""
    if tile < 1:
        raise DataError("tile must be positive")
    if img.height < tile or img.width < tile:
        raise DataError(f"image {img.height}x{img.width} smaller than tile {tile}")
    tiles = []
    for r in range(0, img.height - tile + 1, tile):
        for c in range(0, img.width - tile + 1, tile):
            tiles.append(MultiSpectralImage(img.pixels[:, r:r + tile, c:c + tile], img.region_id, img.timestamp))
    return tiles


def tile_array(pixels: np.ndarray, tile: int) -> tuple:
    """Vectorised :func:`tile_image`: returns (P,B,tile,tile) array and coords."""
    b, h, w = pixels.shape
    if h < tile or w < tile:
        raise DataError(f"image {h}x{w} smaller than tile {tile}")
    nr, nc = h // tile, w // tile
    t = pixels[:, :nr * tile, :nc * tile].reshape(b, nr, tile, nc, tile).transpose(1, 3, 0, 2, 4)
    coords = [(r * tile, c * tile) for r in range(nr) for c in range(nc)]
    return np.ascontiguousarray(t.reshape(nr * nc, b, tile, tile)), coords


def _by_region(catalog: Sequence[CatalogEntry]) -> dict:
    regions = {}
    for e in sorted(catalog, key=lambda e: (e.region_id, e.timestamp, e.path)):
        regions.setdefault(e.region_id, []).append(e)
    return regions


def sample_triplet(catalog: Sequence[CatalogEntry], rng_seed, patch: int = 7, loader=None) -> Triplet:
    """Anchor, its next capture, and a capture of another region, tiled into patches.

    ``rng_seed`` may be an int, a sequence of ints, or a ``numpy`` Generator.
    """
    loader = loader or load_raster
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    regions = _by_region(catalog)
    if len(regions) < 2:
        raise DataError("triplet sampling needs at least two regions")
    anchors = [(rid, i) for rid, es in regions.items() for i in range(len(es) - 1)]
    if not anchors:
        raise DataError("no region has a temporal successor")
    rid, i = anchors[rng.integers(len(anchors))]
    a_entry, p_entry = regions[rid][i], regions[rid][i + 1]
    others = sorted(r for r in regions if r != rid)
    n_rid = others[rng.integers(len(others))]
    n_entry = regions[n_rid][rng.integers(len(regions[n_rid]))]

    a, coords = tile_array(loader(a_entry.path), patch)
    p, _ = tile_array(loader(p_entry.path), patch)
    n, _ = tile_array(loader(n_entry.path), patch)
    if a.shape != p.shape or a.shape[1:] != n.shape[1:]:
        raise DataError("anchor, positive and negative rasters have incompatible shapes")
    n = n[rng.permutation(n.shape[0])]
    return Triplet(
        a, p, n, coords,
        (a_entry.region_id, a_entry.timestamp),
        (p_entry.region_id, p_entry.timestamp),
        (n_entry.region_id, n_entry.timestamp),
    )


def window_array(pixels: np.ndarray, win: int) -> np.ndarray:
    """All reflect-padded win x win windows as a read-only (H*W, B, win, win) view."""
    if win % 2 == 0 or win < 1:
        raise DataError(f"window size must be odd, got {win}")
    b, h, w = pixels.shape
    padded = reflect_pad(pixels, win // 2)
    view = np.lib.stride_tricks.sliding_window_view(padded, (win, win), axis=(1, 2))
    return view.transpose(1, 2, 0, 3, 4).reshape(h * w, b, win, win)


def dense_windows(img: MultiSpectralImage, win: int) -> Iterator:
    """Yield ((row, col), B x win x win window) for every pixel, row-major."""
    windows = window_array(img.pixels, win)
    for idx in range(img.height * img.width):
        yield divmod(idx, img.width), windows[idx]


# --- synthetic multi-temporal corpus ---------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    regions: int = 4
    timesteps: int = 8
    size: int = 64
    bands: int = 4
    textures: tuple = TEXTURE_KINDS
    cell: int = 32
    gain_range: tuple = (0.7, 1.3)
    noise_sigma: float = 0.01
    heldout_pairs: int = 2
    heldout_mosaics: int = 1

    def __post_init__(self):
        object.__setattr__(self, "textures", tuple(self.textures))
        object.__setattr__(self, "gain_range", tuple(float(g) for g in self.gain_range))
        if len(self.textures) < 2:
            raise DataError("need at least two texture classes")
        if self.timesteps < 2:
            raise DataError("need at least two timesteps")
        unknown = set(self.textures) - set(TEXTURE_KINDS)
        if unknown:
            raise DataError(f"unknown texture kinds {sorted(unknown)}")
        lo, hi = self.gain_range
        if not 0 < lo <= hi:
            raise DataError("gain range must satisfy 0 < low <= high")
        if self.noise_sigma < 0 or self.size < 1 or self.cell < 1 or self.bands < 1:
            raise DataError("size, cell and bands must be positive; noise non-negative")


def _rng(seed: int, *names) -> np.random.Generator:
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def texture_signatures(spec: SynthSpec) -> np.ndarray:
    """One positive spectral signature per texture class (n_classes x B)."""
    rng = _rng(spec.seed, "signatures")
    return rng.uniform(0.2, 1.0, size=(len(spec.textures), spec.bands))


def texture_pattern(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Intensity pattern in [0.3, 1] over a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "checkerboard":
        return np.where(((yy // 2) + (xx // 2)) % 2 == 0, 1.0, 0.4)
    if kind == "grating":
        return 0.65 + 0.35 * np.sin(2 * np.pi * (xx + yy) / 6.0)
    if kind == "noise":
        f = ndimage.gaussian_filter(rng.normal(size=(size, size)), 1.0, mode="wrap")
        f = (f - f.min()) / max(f.max() - f.min(), 1e-12)
        return 0.3 + 0.7 * f
    raise DataError(f"unknown texture kind {kind!r}")


def region_layout(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Label map of square cells, each assigned a class; every class used when cells allow."""
    n_cells = -(-spec.size // spec.cell)
    k = len(spec.textures)
    total = n_cells * n_cells
    labels = np.arange(total) % k
    rng.shuffle(labels)
    grid = labels.reshape(n_cells, n_cells)
    full = np.kron(grid, np.ones((spec.cell, spec.cell), dtype=np.int64))
    return full[:spec.size, :spec.size]


def render(labels: np.ndarray, signatures: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Noise-free B x H x W image: per-pixel class signature times class pattern."""
    intensity = np.take_along_axis(patterns, labels[None], axis=0)[0]
    return signatures[labels].transpose(2, 0, 1) * intensity[None]


def capture(base: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One acquisition: a global illumination gain plus additive noise, clipped at 0."""
    gain = rng.uniform(*spec.gain_range)
    img = gain * base
    if spec.noise_sigma > 0:
        img = img + rng.normal(scale=spec.noise_sigma, size=base.shape)
    return np.clip(img, 0.0, None).astype(np.float32)


def _patterns(spec: SynthSpec, *names) -> np.ndarray:
    rng = _rng(spec.seed, "patterns", *names)
    return np.stack([texture_pattern(kind, spec.size, rng) for kind in spec.textures])


def synth_region(spec: SynthSpec, index: int) -> tuple:
    """Label map and list of captures for training region ``index``."""
    labels = region_layout(spec, _rng(spec.seed, "layout", index))
    base = render(labels, texture_signatures(spec), _patterns(spec, index))
    captures = [capture(base, spec, _rng(spec.seed, "capture", index, t)) for t in range(spec.timesteps)]
    return labels, captures


def synth_change_pair(spec: SynthSpec, index: int) -> tuple:
    """Held-out capture pair where one cell's texture class is swapped.

    Returns (img1, img2, change_mask, labels1, labels2).
    """
    rng = _rng(spec.seed, "heldout-pair", index)
    labels1 = region_layout(spec, rng)
    n_cells = -(-spec.size // spec.cell)
    cr, cc = rng.integers(n_cells), rng.integers(n_cells)
    r0, c0 = cr * spec.cell, cc * spec.cell
    labels2 = labels1.copy()
    old = labels1[r0, c0]
    choices = [k for k in range(len(spec.textures)) if k != old]
    labels2[r0:r0 + spec.cell, c0:c0 + spec.cell] = choices[rng.integers(len(choices))]
    sig = texture_signatures(spec)
    pats = _patterns(spec, "heldout-pair", index)
    img1 = capture(render(labels1, sig, pats), spec, _rng(spec.seed, "heldout-pair", index, 0))
    img2 = capture(render(labels2, sig, pats), spec, _rng(spec.seed, "heldout-pair", index, 1))
    return img1, img2, labels1 != labels2, labels1, labels2


def synth_mosaic(spec: SynthSpec, index: int) -> tuple:
    """Held-out single capture with its texture label map."""
    labels = region_layout(spec, _rng(spec.seed, "heldout-mosaic", index))
    base = render(labels, texture_signatures(spec), _patterns(spec, "heldout-mosaic", index))
    return capture(base, spec, _rng(spec.seed, "heldout-mosaic", index, 0)), labels


@dataclass
class SynthOutput:
    catalog_path: Path
    entries: list
    pairs: list = field(default_factory=list)  # (img1, img2, gt) paths
    mosaics: list = field(default_factory=list)  # (img, labels) paths


SYNTH_T0 = 1_577_836_800
SYNTH_DT = 5 * 86_400


def synth_generate(spec: SynthSpec, out_dir) -> SynthOutput:
    """Write training rasters, label maps, held-out pairs/mosaics and a manifest."""
    out = Path(out_dir)
    entries = []
    for r in range(spec.regions):
        rid = f"region{r:02d}"
        labels, caps = synth_region(spec, r)
        write_raster(out / "labels" / f"{rid}.msr", labels.astype(np.float32))
        for t, img in enumerate(caps):
            path = out / "images" / f"{rid}_t{t:03d}.msr"
            write_raster(path, img)
            entries.append(CatalogEntry(rid, SYNTH_T0 + t * SYNTH_DT, 0.0, 1.0, str(path)))
    catalog_path = out / "catalog.tsv"
    write_catalog(catalog_path, entries)
    result = SynthOutput(catalog_path, read_catalog(catalog_path))
    for k in range(spec.heldout_pairs):
        img1, img2, gt, _, _ = synth_change_pair(spec, k)
        paths = tuple(out / "heldout" / f"pair{k:02d}_{s}.msr" for s in ("a", "b", "gt"))
        for p, a in zip(paths, (img1, img2, gt.astype(np.float32))):
            write_raster(p, a)
        result.pairs.append(paths)
    for k in range(spec.heldout_mosaics):
        img, labels = synth_mosaic(spec, k)
        paths = (out / "heldout" / f"mosaic{k:02d}.msr", out / "heldout" / f"mosaic{k:02d}_labels.msr")
        write_raster(paths[0], img)
        write_raster(paths[1], labels.astype(np.float32))
        result.mosaics.append(paths)
    return result
