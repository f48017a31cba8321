"""Texture refinement: a parameter-free stack of pixel-adaptive convolutions.

Each layer builds one k x k kernel per pixel from the guidance image: the
cosine similarity between the centre pixel and every neighbour, scaled by
``-1 / (window variance + eps)`` and optionally normalised to unit absolute
sum. The same per-pixel kernel is shared by all feature channels. Kernels
depend only on the guidance, so they are computed once per dilation and
treated as constants during backpropagation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .numcore import reflect_pad, reflect_pad_adjoint


@dataclass(frozen=True)
class TernConfig:
    blocks: int = 10
    layers_per_block: int = 3
    kernel_size: int = 3
    dilations: tuple = (1, 1, 2)
    epsilon: float = 1e-6
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be a positive odd integer")
        if len(self.dilations) != self.layers_per_block:
            raise ValueError("dilations must have one entry per layer in a block")
        if self.blocks < 0 or any(d < 1 for d in self.dilations):
            raise ValueError("blocks must be >= 0 and dilations >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def layer_dilations(self) -> list:
        return list(self.dilations) * self.blocks

    @property
    def receptive_radius(self) -> int:
        """Pixels of context one output pixel depends on, per side."""
        return sum(d * (self.kernel_size - 1) // 2 for d in self.layer_dilations)


def compute_kernel(window: np.ndarray, epsilon: float = 1e-6, normalize: bool = True) -> np.ndarray:
    """Kernel for one B x k x k guidance window centred on its middle pixel."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[1] != window.shape[2] or window.shape[1] % 2 == 0:
        raise ValueError(f"window must be B x k x k with odd k, got {window.shape}")
    c = window.shape[1] // 2
    centre = window[:, c, c]
    dots = np.einsum("b,buv->uv", centre, window)
    norms = np.linalg.norm(window, axis=0)
    cos = dots / (np.linalg.norm(centre) * norms + epsilon)
    weights = -cos / (window.var() + epsilon)
    if normalize:
        total = np.abs(weights).sum()
        if total >= epsilon:
            weights = weights / total
    return weights


def compute_kernels(
    guidance: np.ndarray,
    kernel_size: int = 3,
    dilation: int = 1,
    epsilon: float = 1e-6,
    normalize: bool = True,
) -> np.ndarray:
    """Per-pixel kernels for an (N,)B,H,W guidance; returns (N,)H,W,k,k."""
    single = guidance.ndim == 3
    g = (guidance[None] if single else guidance).astype(np.float64, copy=False)
    n, b, h, w = g.shape
    k = kernel_size
    half = dilation * (k - 1) // 2
    gp = reflect_pad(g, half)
    shifts = [gp[:, :, u * dilation:u * dilation + h, v * dilation:v * dilation + w]
              for u in range(k) for v in range(k)]
    centre = g
    centre_norm = np.sqrt((centre * centre).sum(axis=1))
    count = b * k * k
    mean = sum(s.sum(axis=1) for s in shifts) / count
    var = sum(((s - mean[:, None]) ** 2).sum(axis=1) for s in shifts) / count
    weights = np.empty((n, h, w, k * k))
    for t, s in enumerate(shifts):
        cos = (s * centre).sum(axis=1) / (centre_norm * np.sqrt((s * s).sum(axis=1)) + epsilon)
        weights[..., t] = -cos / (var + epsilon)
    if normalize:
        total = np.abs(weights).sum(axis=-1, keepdims=True)
        ok = total >= epsilon
        weights = np.where(ok, weights / np.where(ok, total, 1.0), weights)
    weights = weights.reshape(n, h, w, k, k).astype(guidance.dtype, copy=False)
    return weights[0] if single else weights


def _check_spatial(features: np.ndarray, guidance: np.ndarray) -> None:
    if features.shape[-2:] != guidance.shape[-2:]:
        raise ValueError(
            f"guidance {guidance.shape[-2:]} and features {features.shape[-2:]} differ spatially"
        )
    if features.ndim == 4 and guidance.ndim == 4 and features.shape[0] != guidance.shape[0]:
        raise ValueError("guidance and feature batch sizes differ")


def apply_kernels(features: np.ndarray, kernels: np.ndarray, dilation: int) -> np.ndarray:
    """Pixel-adaptive convolution of N,C,H,W features with N,H,W,k,k kernels."""
    k = kernels.shape[-1]
    half = dilation * (k - 1) // 2
    fp = reflect_pad(features, half)
    h, w = features.shape[-2:]
    out = np.zeros_like(features)
    for u in range(k):
        for v in range(k):
            shifted = fp[:, :, u * dilation:u * dilation + h, v * dilation:v * dilation + w]
            out += kernels[:, None, :, :, u, v] * shifted
    return out


def apply_kernels_adjoint(grad_out: np.ndarray, kernels: np.ndarray, dilation: int) -> np.ndarray:
    k = kernels.shape[-1]
    half = dilation * (k - 1) // 2
    n, c, h, w = grad_out.shape
    gp = np.zeros((n, c, h + 2 * half, w + 2 * half), dtype=grad_out.dtype)
    for u in range(k):
        for v in range(k):
            gp[:, :, u * dilation:u * dilation + h, v * dilation:v * dilation + w] += (
                kernels[:, None, :, :, u, v] * grad_out
            )
    return reflect_pad_adjoint(gp, half)


def refine_layer(
    features: np.ndarray,
    guidance: np.ndarray,
    kernel_size: int = 3,
    dilation: int = 1,
    epsilon: float = 1e-6,
    normalize: bool = True,
) -> np.ndarray:
    """One refinement layer on C,H,W (or N,C,H,W) features guided by B,H,W pixels."""
    _check_spatial(features, guidance)
    single = features.ndim == 3
    f = features[None] if single else features
    g = guidance[None] if guidance.ndim == 3 else guidance
    kern = compute_kernels(g, kernel_size, dilation, epsilon, normalize).astype(f.dtype, copy=False)
    out = apply_kernels(f, kern, dilation)
    return out[0] if single else out


@lru_cache(maxsize=64)
def _reflect_index(h: int, w: int, k: int, dilation: int) -> np.ndarray:
    """Flat source pixel of every (pixel, offset) pair under reflect padding: (h*w, k*k)."""
    half = k // 2
    offs = (np.arange(k) - half) * dilation

    def reflect(x, n):
        x = np.where(x < 0, -x, x)
        return np.where(x > n - 1, 2 * (n - 1) - x, x)

    rows = reflect(np.arange(h)[:, None] + offs[None, :], h)  # h,k
    cols = reflect(np.arange(w)[:, None] + offs[None, :], w)  # w,k
    src = rows[:, None, :, None] * w + cols[None, :, None, :]  # h,w,k,k
    return src.reshape(h * w, k * k)


def kernel_operator(kernels: np.ndarray, dilation: int) -> sparse.csr_matrix:
    """Sparse (N*H*W) x (N*H*W) matrix applying N,H,W,k,k per-pixel kernels.

    Reflect padding is folded into the column indices, so the transpose is
    the exact adjoint.
    """
    n, h, w, k, _ = kernels.shape
    src = _reflect_index(h, w, k, dilation)
    cols = (np.arange(n)[:, None, None] * (h * w) + src[None]).reshape(-1)
    indptr = np.arange(0, n * h * w * k * k + 1, k * k)
    return sparse.csr_matrix((kernels.reshape(-1), cols, indptr), shape=(n * h * w, n * h * w))


class TernStack:
    """Kernels of a full refinement stack for one batch of guidance images.

    Layers sharing a dilation share a kernel field, so at most
    ``len(set(dilations))`` operators are ever built. Features are carried
    as an (N*H*W, C) matrix between layers.
    """

    def __init__(self, guidance: np.ndarray, cfg: TernConfig):
        g = guidance[None] if guidance.ndim == 3 else guidance
        self.cfg = cfg
        self.shape = g.shape
        self.ops = {}
        for d in set(cfg.layer_dilations):
            kern = compute_kernels(g, cfg.kernel_size, d, cfg.epsilon, cfg.normalize)
            self.ops[d] = kernel_operator(kern, d)
        self._adjoints = {}

    def _run(self, x: np.ndarray, ops: dict, order: list) -> np.ndarray:
        n, h, w, c = x.shape
        if (n, h, w) != (self.shape[0],) + tuple(self.shape[2:]):
            raise ValueError(f"features {x.shape} do not match guidance {self.shape}")
        m = np.ascontiguousarray(x).reshape(n * h * w, c)
        for d in order:
            m = ops[d] @ m
        return m.reshape(n, h, w, c)

    def forward_nhwc(self, features: np.ndarray) -> np.ndarray:
        ops = {d: op.astype(features.dtype, copy=False) for d, op in self.ops.items()}
        return self._run(features, ops, self.cfg.layer_dilations)

    def backward_nhwc(self, grad_out: np.ndarray) -> np.ndarray:
        if not self._adjoints:
            self._adjoints = {d: op.T.tocsr() for d, op in self.ops.items()}
        ops = {d: op.astype(grad_out.dtype, copy=False) for d, op in self._adjoints.items()}
        return self._run(grad_out, ops, list(reversed(self.cfg.layer_dilations)))

    def forward(self, features: np.ndarray) -> np.ndarray:
        """N,C,H,W in and out."""
        out = self.forward_nhwc(features.transpose(0, 2, 3, 1))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        out = self.backward_nhwc(grad_out.transpose(0, 2, 3, 1))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def tern_forward(features: np.ndarray, guidance: np.ndarray, cfg: TernConfig = TernConfig()) -> np.ndarray:
    """Apply every configured refinement layer in sequence."""
    _check_spatial(features, guidance)
    single = features.ndim == 3
    f = features[None] if single else features
    out = TernStack(guidance, cfg).forward(f)
    return out[0] if single else out
