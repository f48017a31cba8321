"""Patch encoder: stem conv, texture refinement, residual blocks, pooled projection.

All convolutions are 3x3, stride 1 and reflect padded so spatial size never
changes and the refinement guidance stays aligned with the stem features.
No layer carries a bias; together with the final L2 normalisation this
makes descriptors invariant to a global positive gain on the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import conv2d_nhwc, conv2d_nhwc_backward
from .tern import TernConfig, TernStack

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class BackboneConfig:
    in_bands: int = 4
    stem_channels: int = 16
    block_channels: tuple = (16, 32)
    descriptor_dim: int = 64
    tern: TernConfig = field(default_factory=TernConfig)
    use_tern: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        if min((self.in_bands, self.stem_channels, self.descriptor_dim) + self.block_channels) < 1:
            raise ValueError("channel counts and descriptor_dim must be positive")

    def param_shapes(self) -> dict:
        shapes = {"stem": (self.stem_channels, self.in_bands, 3, 3)}
        c_in = self.stem_channels
        for i, c in enumerate(self.block_channels):
            shapes[f"block{i}.conv1"] = (c, c_in, 3, 3)
            shapes[f"block{i}.conv2"] = (c, c, 3, 3)
            if c != c_in:
                shapes[f"block{i}.skip"] = (c, c_in, 1, 1)
            c_in = c
        shapes["proj"] = (self.descriptor_dim, c_in)
        return shapes


def init_backbone(cfg: BackboneConfig, dtype=np.float32) -> dict:
    """He-scaled uniform initialisation: U(-a, a) with a = sqrt(6 / fan_in)."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in cfg.param_shapes().items():
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def l2_normalize(y: np.ndarray) -> tuple:
    """Row-wise unit vectors; all-zero rows map to the first basis vector."""
    norm = np.linalg.norm(y, axis=-1, keepdims=True)
    safe = np.where(norm > NORM_FLOOR, norm, 1.0)
    z = y / safe
    degenerate = (norm <= NORM_FLOOR)[..., 0]
    if degenerate.any():
        z[degenerate] = 0
        z[degenerate, 0] = 1
    return z, safe, degenerate


def l2_normalize_backward(z: np.ndarray, norm: np.ndarray, degenerate: np.ndarray, dz: np.ndarray) -> np.ndarray:
    dy = (dz - z * np.sum(z * dz, axis=-1, keepdims=True)) / norm
    dy[degenerate] = 0
    return dy


class Backbone:
    """Forward/backward over a batch of N,B,h,w patches."""

    def __init__(self, cfg: BackboneConfig, params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_backbone(cfg)
        expected = cfg.param_shapes()
        if set(self.params) != set(expected):
            raise ValueError(f"parameter names {sorted(self.params)} do not match config")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def forward(self, patches: np.ndarray, guidance: np.ndarray | None = None) -> tuple:
        p = self.params
        dtype = p["stem"].dtype
        x = np.asarray(patches, dtype=dtype)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_bands:
            raise ValueError(f"patches must be N x {self.cfg.in_bands} x h x w, got {x.shape}")
        g = x if guidance is None else np.asarray(guidance, dtype=dtype)
        if g.shape != x.shape:
            raise ValueError("guidance must match patch shape")
        xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        cache = {"x": xl}
        k0 = {}
        a0 = conv2d_nhwc(xl, p["stem"], padding="reflect", keep=k0)
        cache["stem_cols"] = k0.get("cols")
        h = np.maximum(a0, 0)
        cache["stem_pre"] = a0
        if self.cfg.use_tern and self.cfg.tern.blocks > 0:
            stack = TernStack(g, self.cfg.tern)
            h = stack.forward_nhwc(h)
            cache["tern"] = stack
        blocks = []
        for i in range(len(self.cfg.block_channels)):
            k1, k2 = {}, {}
            u = conv2d_nhwc(h, p[f"block{i}.conv1"], padding="reflect", keep=k1)
            v = np.maximum(u, 0)
            w = conv2d_nhwc(v, p[f"block{i}.conv2"], padding="reflect", keep=k2)
            skip = p.get(f"block{i}.skip")
            s = h if skip is None else conv2d_nhwc(h, skip)
            o_pre = w + s
            blocks.append((h, u, v, o_pre, k1.get("cols"), k2.get("cols")))
            h = np.maximum(o_pre, 0)
        cache["blocks"] = blocks
        pooled = h.mean(axis=(1, 2))
        y = pooled @ p["proj"].T
        z, norm, degenerate = l2_normalize(y)
        cache.update(last_shape=h.shape, pooled=pooled, z=z, norm=norm, degenerate=degenerate)
        return z, cache

    def backward(self, cache: dict, dz: np.ndarray) -> dict:
        p = self.params
        grads = {}
        dy = l2_normalize_backward(cache["z"], cache["norm"], cache["degenerate"], dz)
        grads["proj"] = dy.T @ cache["pooled"]
        dpooled = dy @ p["proj"]
        n, hh, ww, c = cache["last_shape"]
        dh = np.broadcast_to(dpooled[:, None, None, :] / (hh * ww), cache["last_shape"])
        for i in reversed(range(len(cache["blocks"]))):
            h_in, u, v, o_pre, cols1, cols2 = cache["blocks"][i]
            do = dh * (o_pre > 0)
            dv, grads[f"block{i}.conv2"] = conv2d_nhwc_backward(v, p[f"block{i}.conv2"], do, "reflect", cols2)
            du = dv * (u > 0)
            dh_in, grads[f"block{i}.conv1"] = conv2d_nhwc_backward(
                h_in, p[f"block{i}.conv1"], du, "reflect", cols1
            )
            skip = p.get(f"block{i}.skip")
            if skip is None:
                dh_in = dh_in + do
            else:
                ds, grads[f"block{i}.skip"] = conv2d_nhwc_backward(h_in, skip, do)
                dh_in = dh_in + ds
            dh = dh_in
        if "tern" in cache:
            dh = cache["tern"].backward_nhwc(dh)
        da0 = dh * (cache["stem_pre"] > 0)
        _, grads["stem"] = conv2d_nhwc_backward(cache["x"], p["stem"], da0, "reflect", cache["stem_cols"])
        return grads


def encode_batch(params: dict, cfg: BackboneConfig, patches: np.ndarray, guidance=None, chunk: int = 512) -> np.ndarray:
    """N x D unit descriptors, evaluated in chunks to bound memory."""
    net = Backbone(cfg, params)
    patches = np.asarray(patches)
    if patches.ndim != 4:
        raise ValueError(f"patches must be N x B x h x w, got {patches.shape}")
    out = []
    for s in range(0, patches.shape[0], chunk):
        g = None if guidance is None else guidance[s:s + chunk]
        out.append(net.forward(patches[s:s + chunk], g)[0])
    if not out:
        return np.zeros((0, cfg.descriptor_dim), dtype=params["stem"].dtype)
    return np.concatenate(out)


def encode_patch(params: dict, cfg: BackboneConfig, patch: np.ndarray, guidance=None) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ValueError(f"patch must be B x h x w, got {patch.shape}")
    g = None if guidance is None else np.asarray(guidance)[None]
    return encode_batch(params, cfg, patch[None], g)[0]
