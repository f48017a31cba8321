"""Residual encoding against a learned cluster bank.

For a descriptor ``z`` and centres ``q_k`` the residuals are ``z - q_k``.
Soft affinities are ``softmax_k(-s_k * |z - q_k|^2)`` with positive per-cluster
smoothing ``s_k`` stored as ``log_s``. The cumulative residual is the
affinity-weighted residual sum divided by the number of clusters, and the
encoder output is that vector scaled to unit length.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_NORM = 1e-8


@dataclass
class ClusterBank:
    centers: np.ndarray  # K x D
    log_s: np.ndarray  # K

    def __post_init__(self):
        self.centers = np.asarray(self.centers)
        self.log_s = np.asarray(self.log_s, dtype=self.centers.dtype)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise ValueError(f"centers must be K x D with K >= 1, got {self.centers.shape}")
        if self.log_s.shape != (self.centers.shape[0],):
            raise ValueError("log_s must have one entry per cluster")
        if not (np.all(np.isfinite(self.centers)) and np.all(np.isfinite(self.log_s))):
            raise ValueError("cluster bank must be finite")

    @classmethod
    def init(cls, n_clusters: int = 64, dim: int = 64, seed: int = 0, dtype=np.float32) -> "ClusterBank":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(dim)
        centers = rng.uniform(-bound, bound, size=(n_clusters, dim)).astype(dtype)
        return cls(centers, np.zeros(n_clusters, dtype=dtype))

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def smoothing(self) -> np.ndarray:
        return np.exp(self.log_s)


def _as_batch(z: np.ndarray, bank: ClusterBank) -> tuple:
    z = np.asarray(z, dtype=bank.centers.dtype)
    single = z.ndim == 1
    zb = z[None] if single else z
    if zb.ndim != 2 or zb.shape[1] != bank.dim:
        raise ValueError(f"descriptor dim {zb.shape[-1]} does not match bank dim {bank.dim}")
    return zb, single


def residuals(z: np.ndarray, bank: ClusterBank) -> np.ndarray:
    """Residual of ``z`` to every centre: (N,)K x D."""
    zb, single = _as_batch(z, bank)
    r = zb[:, None, :] - bank.centers[None]
    return r[0] if single else r


def _logits(zb: np.ndarray, bank: ClusterBank) -> tuple:
    diff = zb[:, None, :] - bank.centers[None]
    d2 = np.einsum("nkd,nkd->nk", diff, diff)
    return -bank.smoothing[None] * d2, d2, diff


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def affinity_weights(z: np.ndarray, bank: ClusterBank) -> np.ndarray:
    zb, single = _as_batch(z, bank)
    theta = _softmax(_logits(zb, bank)[0])
    return theta[0] if single else theta


def word_assign(z: np.ndarray, bank: ClusterBank):
    """Index of the most affine cluster; exact ties resolve to the lowest index."""
    zb, single = _as_batch(z, bank)
    idx = np.argmax(_logits(zb, bank)[0], axis=-1)
    return int(idx[0]) if single else idx


class ResidualEncoder:
    """Batched forward/backward of the normalised cumulative residual."""

    def __init__(self, bank: ClusterBank):
        self.bank = bank

    def forward(self, z: np.ndarray) -> tuple:
        zb, _ = _as_batch(z, self.bank)
        k = self.bank.n_clusters
        logits, d2, diff = _logits(zb, self.bank)
        theta = _softmax(logits)
        r = np.einsum("nk,nkd->nd", theta, diff) / k
        norm = np.linalg.norm(r, axis=1, keepdims=True)
        degenerate = norm[:, 0] < DEGENERATE_NORM
        safe = np.where(degenerate[:, None], 1.0, norm)
        f = np.where(degenerate[:, None], 0.0, r / safe).astype(r.dtype)
        cache = dict(z=zb, theta=theta, diff=diff, d2=d2, r=r, f=f, norm=safe, degenerate=degenerate)
        return f, cache

    def backward(self, cache: dict, df: np.ndarray) -> tuple:
        """Returns (dz, dcenters, dlog_s)."""
        bank = self.bank
        k = bank.n_clusters
        s = bank.smoothing
        f, theta, diff, d2 = cache["f"], cache["theta"], cache["diff"], cache["d2"]
        dr = (df - f * np.sum(f * df, axis=1, keepdims=True)) / cache["norm"]
        dr[cache["degenerate"]] = 0
        dr = dr / k
        # r = sum_k theta_k * diff_k (scaled)
        dtheta = np.einsum("nd,nkd->nk", dr, diff)
        ddiff = theta[:, :, None] * dr[:, None, :]
        dlogits = theta * (dtheta - np.sum(theta * dtheta, axis=1, keepdims=True))
        # logits = -s * d2, d2 = |diff|^2
        dd2 = -s[None] * dlogits
        ddiff = ddiff + 2 * dd2[:, :, None] * diff
        dlog_s = -np.sum(dlogits * d2, axis=0) * s
        dz = ddiff.sum(axis=1)
        dcenters = -ddiff.sum(axis=0)
        return dz, dcenters, dlog_s


def cumulative_residual(z: np.ndarray, bank: ClusterBank, return_raw: bool = False):
    """Unit-length cumulative residual ``f`` (zero vector when degenerate).

    With ``return_raw`` also returns the unnormalised vector and the
    degenerate flag(s).
    """
    zb, single = _as_batch(z, bank)
    f, cache = ResidualEncoder(bank).forward(zb)
    if single:
        f, r, deg = f[0], cache["r"][0], bool(cache["degenerate"][0])
    else:
        r, deg = cache["r"], cache["degenerate"]
    return (f, r, deg) if return_raw else f
