"""Acceptance suite A1-A9, shared by ``matter eval`` and the test-suite.

Each check returns a :class:`Result`; :meth:`Result.line` is the one-line
report. Expensive artefacts (synthetic corpus, trained models) are built
once per :class:`Suite` and reused across checks.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import decode_checkpoint, encode_checkpoint, save_checkpoint
from .config import RunConfig, build_state
from .datapipe import filter_catalog, read_catalog, read_raster, synth_generate
from .numcore import finite_diff_check
from .resenc import ClusterBank, cumulative_residual
from .selfsup import Batch, MatterModel, TrainConfig, batch_loss_and_grads, nce_loss_grad, pretrain
from .tasks import evaluate_pairs, otsu_threshold, prf1, rf_sweep, word_map, word_purity
from .tern import TernConfig, compute_kernel, compute_kernels, tern_forward

log = logging.getLogger(__name__)

CRITERIA = ("A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9")


@dataclass
class Result:
    key: str
    passed: bool
    summary: str
    seconds: float = 0.0
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{self.key} {'PASS' if self.passed else 'FAIL'} {self.summary} [{self.seconds:.1f}s]"


def _timed(key: str, fn: Callable[[], tuple]) -> Result:
    t0 = time.perf_counter()
    passed, summary, values = fn()
    return Result(key, bool(passed), summary, time.perf_counter() - t0, values)


# A1 -------------------------------------------------------------------------

def _a1() -> tuple:
    rng = np.random.default_rng(101)
    errs = {}

    def unit(*shape):
        v = rng.normal(size=shape)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    a, p, n = unit(8), unit(8), unit(5, 8)
    _, da, dp, dn = nce_loss_grad(a, p, n, 0.05)
    # at temperature 0.05 some entries are ~1e-8, below the round-off of a 1e-6 step
    loss = lambda _: nce_loss_grad(a, p, n, 0.05)[0]  # noqa: E731
    errs["nce.anchor"] = finite_diff_check(loss, a, da, eps=1e-4)
    errs["nce.positive"] = finite_diff_check(loss, p, dp, eps=1e-4)
    errs["nce.negatives"] = finite_diff_check(loss, n, dn, eps=1e-4)

    from .resenc import ResidualEncoder
    bank = ClusterBank(rng.uniform(-0.4, 0.4, (4, 8)), rng.uniform(-0.5, 0.5, 4))
    z = unit(3, 8)
    w = rng.normal(size=(3, 8))
    enc = ResidualEncoder(bank)
    f, cache = enc.forward(z)
    dz, dc, dls = enc.backward(cache, w)

    def obj(_):
        return float(np.sum(w * cumulative_residual(z, bank)))

    errs["residual.z"] = finite_diff_check(obj, z, dz, eps=1e-6)
    errs["residual.centers"] = finite_diff_check(obj, bank.centers, dc, eps=1e-6)
    errs["residual.log_s"] = finite_diff_check(obj, bank.log_s, dls, eps=1e-6)

    cfg = BackboneConfig(in_bands=2, stem_channels=3, block_channels=(3, 4), descriptor_dim=8,
                         tern=TernConfig(blocks=2), seed=5)
    model = MatterModel(cfg, n_clusters=4, bank_seed=6).astype(np.float64)
    tc = TrainConfig(batch_size=2, patches_per_triplet=1)
    batch = Batch(*(rng.uniform(0.1, 1.0, (2, 2, 7, 7)) for _ in range(3)), np.arange(2))
    _, grads = batch_loss_and_grads(model, batch, tc)
    for (name, param), g in zip(model.named_parameters(), grads):
        errs[f"train_step.{name}"] = finite_diff_check(
            lambda _: batch_loss_and_grads(model, batch, tc)[0], param, g, eps=1e-6
        )
    worst = max(errs.values())
    return worst <= 1e-3, f"max relative error {worst:.2e} over {len(errs)} tensors (tol 1e-3)", errs


def check_a1() -> Result:
    res = _timed("A1", _a1)
    if res.seconds >= 60:
        res.passed = False
        res.summary += f"; runtime {res.seconds:.1f}s exceeds 60s"
    return res


# A2 -------------------------------------------------------------------------

def _a2() -> tuple:
    rng = np.random.default_rng(202)
    g = rng.uniform(0.1, 1.0, (4, 32, 32))
    base = compute_kernels(g, 3, 1)
    scale_err = max(float(np.abs(compute_kernels(g * s, 3, 1) - base).max()) for s in (0.5, 2.0, 10.0))
    cfg = TernConfig(blocks=2)
    feats = rng.normal(size=(3, 32, 32))
    out = tern_forward(feats, g, cfg)
    dy, dx = 3, 2
    out_s = tern_forward(np.roll(feats, (dy, dx), (1, 2)), np.roll(g, (dy, dx), (1, 2)), cfg)
    # compare only pixels whose receptive field stays clear of every border and the wrap seam
    r, h, w = cfg.receptive_radius, g.shape[1], g.shape[2]
    shift_err = float(np.abs(out_s[:, r + dy:h - r, r + dx:w - r] - out[:, r:h - r - dy, r:w - r - dx]).max())
    params = len(BackboneConfig(use_tern=True).param_shapes()) - len(BackboneConfig(use_tern=False).param_shapes())
    kern = compute_kernel(np.full((4, 3, 3), 0.37))
    uniform_err = float(np.abs(kern - kern.flat[0]).max())
    uniform_err = max(uniform_err, abs(abs(float(kern.flat[0])) - 1 / 9))
    ok = scale_err <= 1e-5 and shift_err <= 1e-5 and params == 0 and uniform_err <= 1e-6
    summary = (f"scale {scale_err:.1e} (tol 1e-5), translation {shift_err:.1e} (tol 1e-5), "
               f"trainable params {params}, uniform kernel {uniform_err:.1e} (tol 1e-6)")
    return ok, summary, dict(scale=scale_err, translation=shift_err, params=params, uniform=uniform_err)


def check_a2() -> Result:
    return _timed("A2", _a2)


# A3 -------------------------------------------------------------------------

def otsu_oracle(values, bins: int = 256) -> int:
    """Exhaustive search of w0*w1*(mu0-mu1)^2 over every interior edge.

    Class means are taken in bin-index units, an affine map of the bin
    centres that leaves the arg-max unchanged. Exact rational arithmetic so
    ties are real ties. Returns the first edge of the best partition, or -1
    when all values are equal.
    """
    from fractions import Fraction
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if lo == hi:
        return -1
    counts = [int(c) for c in np.histogram(v, bins=bins, range=(lo, hi))[0]]
    n = sum(counts)
    total = sum(i * c for i, c in enumerate(counts))
    best, best_t = None, -1
    n0 = s0 = 0
    for t in range(1, bins):
        n0 += counts[t - 1]
        s0 += (t - 1) * counts[t - 1]
        n1, s1 = n - n0, total - s0
        if n0 == 0 or n1 == 0:
            continue
        score = Fraction(n0 * n1, n * n) * (Fraction(s0, n0) - Fraction(s1, n1)) ** 2
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def _same_partition(counts: np.ndarray, t_a: int, t_b: int) -> bool:
    lo, hi = sorted((t_a, t_b))
    return counts[lo:hi].sum() == 0


def _a3(n_sets: int = 1000) -> tuple:
    rng = np.random.default_rng(303)
    agree = 0
    for i in range(n_sets):
        kind = i % 4
        size = int(rng.integers(2, 400))
        if kind == 0:
            v = rng.normal(size=size)
        elif kind == 1:
            v = np.concatenate([rng.normal(0, 1, size), rng.normal(rng.uniform(2, 8), 1, size)])
        elif kind == 2:
            v = rng.integers(0, 5, size).astype(float)
        else:
            v = rng.exponential(size=size) ** 2
        res = otsu_threshold(v, 256)
        oracle = otsu_oracle(v, 256)
        if res.degenerate or oracle < 0:
            agree += res.degenerate and oracle < 0
            continue
        counts, _ = np.histogram(v, bins=256, range=(v.min(), v.max()))
        agree += _same_partition(counts, res.edge, oracle)
    return agree == n_sets, f"{agree}/{n_sets} threshold bins agree with exhaustive search", dict(agree=agree)


def check_a3() -> Result:
    res = _timed("A3", _a3)
    if res.seconds >= 30:
        res.passed = False
        res.summary += f"; runtime {res.seconds:.1f}s exceeds 30s"
    return res


# A4 -------------------------------------------------------------------------

def _f1_for(precision: float, recall: float) -> float:
    # build masks whose precision and recall hit the target to 1e-4
    tp = 1_000_000
    fp = round(tp * (100 - precision) / precision)
    fn = round(tp * (100 - recall) / recall)
    pred = np.zeros(tp + fp + fn, dtype=bool)
    gt = np.zeros_like(pred)
    pred[:tp + fp] = True
    gt[:tp] = True
    gt[tp + fp:] = True
    return prf1(pred, gt).f1


def _a4() -> tuple:
    rows = [(37.52, 72.65, 49.48), (61.80, 57.13, 59.37)]
    got = [_f1_for(p, r) for p, r, _ in rows]
    errs = [abs(g - want) for g, (_, _, want) in zip(got, rows)]
    summary = ", ".join(f"P={p} R={r} -> F1 {g:.3f} (want {w})" for (p, r, w), g in zip(rows, got))
    return max(errs) <= 0.01, summary, dict(f1=got)


def check_a4() -> Result:
    return _timed("A4", _a4)


# A5-A9 ----------------------------------------------------------------------

@dataclass
class Trained:
    state: object
    config: RunConfig
    seconds: float
    snapshots: dict = field(default_factory=dict)  # iteration -> checkpoint bytes


class Suite:
    """Synthetic corpus and trained models, built lazily under ``workdir``."""

    def __init__(self, workdir, cfg: RunConfig | None = None):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg or RunConfig()
        self._corpus = None
        self._models = {}
        self._corpus_seconds = 0.0

    def corpus(self):
        if self._corpus is None:
            t0 = time.perf_counter()
            out = synth_generate(self.cfg.synth_spec(), self.workdir / "data")
            catalog = filter_catalog(read_catalog(out.catalog_path), self.cfg.max_per_region)
            pairs = [(read_raster(a), read_raster(b), read_raster(g)[0] > 0.5) for a, b, g in out.pairs]
            mosaics = [(read_raster(a), read_raster(lab)[0].astype(np.int64)) for a, lab in out.mosaics]
            self._corpus = (catalog, pairs, mosaics)
            self._corpus_seconds = time.perf_counter() - t0
        return self._corpus

    def trained(self, **changes) -> Trained:
        cfg = self.cfg.replace(**changes)
        key = cfg.config_hash()
        if key not in self._models:
            catalog, _, _ = self.corpus()
            t0 = time.perf_counter()
            state = build_state(cfg)
            tag = "_".join(f"{k}-{v}" for k, v in sorted(changes.items())) or "default"
            ckpt = self.workdir / f"model_{tag}.mtck"
            snapshots = {}

            def on_checkpoint(s):
                save_checkpoint(s, ckpt, cfg)
                snapshots[s.iteration] = ckpt.read_bytes()

            pretrain(catalog, cfg.train_config(), state, on_checkpoint=on_checkpoint)
            self._models[key] = Trained(state, cfg, time.perf_counter() - t0, snapshots)
            log.info("trained %s in %.1fs", tag, self._models[key].seconds)
        return self._models[key]

    def f1(self, trained: Trained, win: int | None = None) -> float:
        _, pairs, _ = self.corpus()
        return evaluate_pairs(trained.state.model, pairs, win or self.cfg.window).f1

    # individual criteria

    def check_a5(self) -> Result:
        def run():
            self.corpus()
            model = self.trained()
            t0 = time.perf_counter()
            f1 = self.f1(model)
            total = self._corpus_seconds + model.seconds + time.perf_counter() - t0
            ok = f1 >= 80.0 and total <= 600
            return ok, f"change F1 {f1:.2f}% (need >= 80), pipeline {total:.0f}s (limit 600s)", dict(f1=f1, seconds=total)
        return _timed("A5", run)

    def check_a6(self) -> Result:
        def run():
            _, _, mosaics = self.corpus()
            model = self.trained().state.model
            purities = {}
            for i, (img, labels) in enumerate(mosaics):
                for lab, p in word_purity(word_map(img, model, self.cfg.window).words, labels).items():
                    purities[f"mosaic{i}.texture{lab}"] = p
            worst = min(purities.values())
            detail = ", ".join(f"{k} {v:.3f}" for k, v in purities.items())
            return worst >= 0.70, f"min purity {worst:.3f} (need >= 0.70): {detail}", purities
        return _timed("A6", run)

    def check_a7(self) -> Result:
        def run():
            catalog, pairs, _ = self.corpus()
            grid = rf_sweep(catalog, [7, 17], [9], pairs,
                            lambda _cat, size: self.trained(**({} if size == self.cfg.train_patch
                                                               else {"train_patch": size})).state.model)
            f7, f17 = float(grid[0, 0]), float(grid[1, 0])
            return f7 >= f17, f"F1 train7/infer9 {f7:.2f} vs train17/infer9 {f17:.2f} (need 7 >= 17)", dict(f7=f7, f17=f17)
        return _timed("A7", run)

    def check_a8(self) -> Result:
        def run():
            full = self.f1(self.trained())
            no_tern = self.f1(self.trained(use_tern=False))
            plain = self.f1(self.trained(use_tern=False, use_residual_encoder=False))
            ok = full >= no_tern >= plain
            return ok, (f"full {full:.2f} >= no-refinement {no_tern:.2f} >= plain backbone {plain:.2f}"), \
                dict(full=full, no_tern=no_tern, plain=plain)
        return _timed("A8", run)

    def check_a9(self) -> Result:
        def run():
            model = self.trained()
            losses = np.asarray(model.state.losses)
            k = max(1, len(losses) // 10)
            first, last = float(losses[:k].mean()), float(losses[-k:].mean())
            ratio = last / first
            resumed_ok, where = self._resume_matches(model)
            ok = ratio <= 0.5 and resumed_ok
            return ok, (f"loss first10% {first:.3f} last10% {last:.3f} ratio {ratio:.3f} (need <= 0.5); "
                        f"resume from {where} bit-identical: {resumed_ok}"), dict(ratio=ratio, resume=resumed_ok)
        return _timed("A9", run)

    def _resume_matches(self, model: Trained) -> tuple:
        """Finish training from the last intermediate snapshot and compare bytes."""
        cfg = model.config
        catalog, _, _ = self.corpus()
        final = model.state.iteration
        earlier = [i for i in model.snapshots if i < final]
        if earlier:
            resume_at = max(earlier)
            restored = decode_checkpoint(model.snapshots[resume_at], cfg.config_hash()).state
        else:
            resume_at = 0
            restored = build_state(cfg)
        pretrain(catalog, cfg.train_config(), restored)
        return encode_checkpoint(cfg, restored) == encode_checkpoint(cfg, model.state), resume_at

    def run(self, keys=CRITERIA, report: Callable[[str], None] | None = print) -> list:
        checks = {"A1": check_a1, "A2": check_a2, "A3": check_a3, "A4": check_a4,
                  "A5": self.check_a5, "A6": self.check_a6, "A7": self.check_a7,
                  "A8": self.check_a8, "A9": self.check_a9}
        results = []
        for key in keys:
            res = checks[key]()
            results.append(res)
            if report:
                report(res.line())
        return results
