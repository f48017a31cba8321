"""Contrastive pre-training of the encoder and cluster bank."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import Backbone, BackboneConfig, init_backbone
from .datapipe import DataError, load_raster, sample_triplet
from .numcore import NumericalError, SgdState, sgd_step
from .resenc import ClusterBank, ResidualEncoder, word_assign

log = logging.getLogger(__name__)

NEGATIVE_MODES = ("batch", "triplet")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.6
    weight_decay: float = 0.001
    temperature: float = 0.05
    train_patch: int = 7
    iterations: int = 2000
    seed: int = 0
    checkpoint_every: int = 500
    patches_per_triplet: int = 8
    negatives: str = "triplet"
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.patches_per_triplet < 1:
            raise ValueError("batch_size and patches_per_triplet must be positive")
        if self.train_patch < 3:
            raise ValueError("train_patch must be at least 3")
        if self.iterations < 0 or self.checkpoint_every < 0:
            raise ValueError("iterations and checkpoint_every must be non-negative")
        if self.negatives not in NEGATIVE_MODES:
            raise ValueError(f"negatives must be one of {NEGATIVE_MODES}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be non-negative (0 disables clipping)")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimiser hyperparameters")


def nce_loss(anchor: np.ndarray, positive: np.ndarray, negatives: np.ndarray, temperature: float = 0.05) -> float:
    """``-log softmax_0([a.p, a.n_1, ..., a.n_N] / temperature)``."""
    return nce_loss_grad(anchor, positive, negatives, temperature)[0]


def nce_loss_grad(anchor, positive, negatives, temperature: float = 0.05) -> tuple:
    """Loss and its gradients w.r.t. anchor, positive and negatives."""
    negatives = np.atleast_2d(np.asarray(negatives))
    if negatives.shape[0] == 0 or negatives.size == 0:
        raise ValueError("need at least one negative")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cands = np.vstack([np.asarray(positive)[None], negatives])
    logits = cands @ np.asarray(anchor) / temperature
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = float(lse - logits[0])
    p = np.exp(logits - lse)
    p[0] -= 1.0
    da = p @ cands / temperature
    dc = np.outer(p, anchor) / temperature
    return loss, da, dc[0], dc[1:]


def batch_nce(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray, temperature: float, group: np.ndarray | None = None) -> tuple:
    """Mean NCE over M anchors with in-batch candidates.

    Candidates for anchor m are its positive, then every negative patch and
    every other positive and anchor in the batch. With ``group`` given, only
    negatives from the anchor's own triplet are used. Returns the loss and
    gradients w.r.t. ``fa``, ``fp`` and ``fn``.
    """
    m = fa.shape[0]
    cands = np.vstack([fp, fn, fa])
    logits = fa @ cands.T / temperature
    mask = np.ones_like(logits, dtype=bool)
    mask[np.arange(m), 2 * m + np.arange(m)] = False
    if group is not None:
        mask[:, :m] = np.eye(m, dtype=bool)
        mask[:, m:2 * m] = group[:, None] == group[None, :]
        mask[:, 2 * m:] = False
    logits = np.where(mask, logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    lse = mx[:, 0] + np.log(e.sum(axis=1))
    idx = np.arange(m)
    losses = lse - logits[idx, idx]
    p = e / e.sum(axis=1, keepdims=True)
    p[idx, idx] -= 1.0
    p /= m
    da = p @ cands / temperature
    dc = p.T @ fa / temperature
    da = da + dc[2 * m:]
    return float(losses.mean()), da, dc[:m], dc[m:2 * m]


class MatterModel:
    """Backbone plus optional residual encoder, with a flat parameter view."""

    def __init__(self, cfg: BackboneConfig, params: dict | None = None, bank: ClusterBank | None = None,
                 n_clusters: int = 64, use_residual_encoder: bool = True, bank_seed: int | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_backbone(cfg)
        dtype = self.params["stem"].dtype
        seed = cfg.seed + 1 if bank_seed is None else bank_seed
        self.bank = bank if bank is not None else ClusterBank.init(n_clusters, cfg.descriptor_dim, seed, dtype)
        if self.bank.dim != cfg.descriptor_dim:
            raise ValueError("cluster bank dimension differs from descriptor_dim")
        self.use_residual_encoder = use_residual_encoder
        self.backbone = Backbone(cfg, self.params)

    @property
    def n_clusters(self) -> int:
        return self.bank.n_clusters

    def named_parameters(self) -> list:
        """Trainable tensors in a fixed order (backbone names sorted, then bank)."""
        named = [(k, self.params[k]) for k in sorted(self.params)]
        if self.use_residual_encoder:
            named += [("bank.centers", self.bank.centers), ("bank.log_s", self.bank.log_s)]
        return named

    def astype(self, dtype) -> "MatterModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        bank = ClusterBank(self.bank.centers.astype(dtype), self.bank.log_s.astype(dtype))
        return MatterModel(self.cfg, params, bank, use_residual_encoder=self.use_residual_encoder)

    def forward(self, patches: np.ndarray) -> tuple:
        z, bcache = self.backbone.forward(patches)
        if not self.use_residual_encoder:
            return z, (bcache, None)
        f, rcache = ResidualEncoder(self.bank).forward(z)
        return f, (bcache, rcache)

    def backward(self, cache: tuple, df: np.ndarray) -> list:
        """Gradients aligned with :meth:`named_parameters`."""
        bcache, rcache = cache
        if rcache is None:
            dz = df
            bank_grads = []
        else:
            dz, dc, dls = ResidualEncoder(self.bank).backward(rcache, df)
            bank_grads = [dc, dls]
        g = self.backbone.backward(bcache, dz)
        return [g[k] for k in sorted(self.params)] + bank_grads

    def describe(self, patches: np.ndarray, chunk: int = 1024) -> np.ndarray:
        """Unit descriptors used for comparison (cumulative residual or raw)."""
        out = [self.forward(patches[s:s + chunk])[0] for s in range(0, patches.shape[0], chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.cfg.descriptor_dim))

    def words(self, patches: np.ndarray, chunk: int = 1024) -> np.ndarray:
        out = []
        for s in range(0, patches.shape[0], chunk):
            z, _ = self.backbone.forward(patches[s:s + chunk])
            out.append(np.atleast_1d(word_assign(z, self.bank)))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class TrainState:
    model: MatterModel
    sgd: SgdState
    iteration: int = 0
    losses: list = field(default_factory=list)


def init_state(backbone_cfg: BackboneConfig, train_cfg: TrainConfig, n_clusters: int = 64,
               use_residual_encoder: bool = True, bank_seed: int | None = None) -> TrainState:
    model = MatterModel(backbone_cfg, n_clusters=n_clusters, use_residual_encoder=use_residual_encoder,
                        bank_seed=bank_seed)
    sgd = SgdState(train_cfg.learning_rate, train_cfg.momentum, train_cfg.weight_decay)
    sgd.velocity = [np.zeros_like(p) for _, p in model.named_parameters()]
    return TrainState(model, sgd)


@dataclass
class Batch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    group: np.ndarray  # triplet index of each patch


def sample_batch(catalog: Sequence, cfg: TrainConfig, iteration: int, loader: Callable = load_raster) -> Batch:
    """Training batch for one iteration, fully determined by (seed, iteration)."""
    rng = np.random.default_rng([cfg.seed, iteration])
    a, p, n, g = [], [], [], []
    for t in range(cfg.batch_size):
        trip = sample_triplet(catalog, rng, cfg.train_patch, loader)
        k = min(cfg.patches_per_triplet, trip.n_patches)
        idx = rng.choice(trip.n_patches, size=k, replace=False)
        a.append(trip.anchor[idx])
        p.append(trip.positive[idx])
        n.append(trip.negative[idx % trip.negative.shape[0]])
        g.append(np.full(k, t))
    return Batch(np.concatenate(a), np.concatenate(p), np.concatenate(n), np.concatenate(g))


def batch_loss_and_grads(model: MatterModel, batch: Batch, cfg: TrainConfig) -> tuple:
    m = batch.anchor.shape[0]
    patches = np.concatenate([batch.anchor, batch.positive, batch.negative])
    f, cache = model.forward(patches)
    group = batch.group if cfg.negatives == "triplet" else None
    loss, dfa, dfp, dfn = batch_nce(f[:m], f[m:2 * m], f[2 * m:], cfg.temperature, group)
    grads = model.backward(cache, np.concatenate([dfa, dfp, dfn]))
    return loss, grads


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> float:
    """One optimiser step on ``batch``; records and returns the loss."""
    if batch.anchor.shape[-1] != cfg.train_patch or batch.anchor.shape[-2] != cfg.train_patch:
        raise DataError(f"batch patches are {batch.anchor.shape[-2:]}, expected {cfg.train_patch}")
    loss, grads = batch_loss_and_grads(state.model, batch, cfg)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError(f"non-finite loss or gradient at iteration {state.iteration} (loss={loss})")
    if cfg.grad_clip:
        total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
        if total > cfg.grad_clip:
            grads = [g * (cfg.grad_clip / total) for g in grads]
    params = [p for _, p in state.model.named_parameters()]
    sgd_step(params, grads, state.sgd)
    state.iteration += 1
    state.losses.append(loss)
    return loss


def pretrain(catalog: Sequence, cfg: TrainConfig, state: TrainState, on_checkpoint: Callable | None = None,
             loader: Callable = load_raster) -> TrainState:
    """Run ``cfg.iterations`` total steps, resuming from ``state.iteration``.

    ``on_checkpoint(state)`` fires every ``cfg.checkpoint_every`` steps and at
    the end of training.
    """
    while state.iteration < cfg.iterations:
        batch = sample_batch(catalog, cfg, state.iteration, loader)
        loss = train_step(state, batch, cfg)
        if state.iteration % 100 == 0:
            log.info("iteration %d loss %.4f", state.iteration, loss)
        if on_checkpoint and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    if on_checkpoint:
        on_checkpoint(state)
    return state


def write_loss_curve(path, losses: Sequence[float], start: int = 1) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, loss in enumerate(losses, start):
            fh.write(f"{i}\t{loss!r}\n")
