"""Downstream use without fine-tuning: change maps, word maps and metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .datapipe import DataError, MultiSpectralImage, window_array

log = logging.getLogger(__name__)


class OtsuResult(NamedTuple):
    threshold: float
    edge: int  # index into the histogram edges; -1 when degenerate
    degenerate: bool


@dataclass
class ChangeMap:
    score: np.ndarray
    mask: np.ndarray
    threshold: float
    degenerate: bool


@dataclass
class WordMap:
    words: np.ndarray
    n_clusters: int

    def __post_init__(self):
        if self.words.size and (self.words.min() < 0 or self.words.max() >= self.n_clusters):
            raise ValueError("word index out of range")


@dataclass
class PrfReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    def as_rows(self) -> list:
        return [("precision", self.precision), ("recall", self.recall), ("f1", self.f1),
                ("tp", self.tp), ("fp", self.fp), ("fn", self.fn)]


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, MultiSpectralImage) else np.asarray(img, dtype=np.float32)


def otsu_threshold(values, bins: int = 256) -> OtsuResult:
    """Histogram Otsu threshold on ``bins`` equal bins over [min, max].

    Between-class variance is maximised over interior bin edges. Among
    equally good distinct partitions the lowest wins; edges separated only
    by empty bins give the same partition, and the threshold is placed at
    the middle edge of that empty gap.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("otsu_threshold needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return OtsuResult(lo, -1, True)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    idx = np.arange(bins, dtype=np.int64)
    n0 = np.cumsum(counts)[:-1]  # class 0 = bins < t, for t = 1..bins-1
    s0 = np.cumsum(counts * idx)[:-1]
    n, s = counts.sum(), (counts * idx).sum()
    n1, s1 = n - n0, s - s0
    valid = (n0 > 0) & (n1 > 0)
    num = (n1 * s0 - n0 * s1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(valid, num * num / (n0.astype(np.float64) * n1), -1.0)
    t = int(np.argmax(between)) + 1
    end = t
    while end < bins - 1 and counts[end] == 0:
        end += 1
    edge = (t + end) // 2
    return OtsuResult(float(edges[edge]), edge, False)


def window_descriptors(img, model, win: int = 9, chunk: int = 1024) -> np.ndarray:
    """H*W x D descriptors of the dense reflect-padded windows, row-major."""
    px = _pixels(img)
    windows = window_array(px, win)
    out = [model.describe(np.ascontiguousarray(windows[s:s + chunk])) for s in range(0, windows.shape[0], chunk)]
    return np.concatenate(out)


def change_scores(img1, img2, model, win: int = 9) -> np.ndarray:
    """Per-pixel Euclidean distance between window descriptors of two captures."""
    a, b = _pixels(img1), _pixels(img2)
    if a.shape != b.shape:
        raise DataError(f"images differ in shape: {a.shape} vs {b.shape}")
    fa = window_descriptors(a, model, win)
    fb = window_descriptors(b, model, win)
    return np.linalg.norm(fa - fb, axis=1).reshape(a.shape[1:])


def detect_change(img1, img2, model, win: int = 9, bins: int = 256) -> ChangeMap:
    score = change_scores(img1, img2, model, win)
    res = otsu_threshold(score, bins)
    if res.degenerate:
        mask = np.zeros(score.shape, dtype=bool)
    else:
        mask = score > res.threshold
    return ChangeMap(score, mask, res.threshold, res.degenerate)


def word_map(img, model, win: int = 9, chunk: int = 1024) -> WordMap:
    """Most affine cluster of every pixel's window."""
    px = _pixels(img)
    windows = window_array(px, win)
    words = np.concatenate(
        [model.words(np.ascontiguousarray(windows[s:s + chunk])) for s in range(0, windows.shape[0], chunk)]
    )
    return WordMap(words.reshape(px.shape[1:]).astype(np.int64), model.n_clusters)


def prf1(pred_mask, gt_mask) -> PrfReport:
    """Precision, recall and F-1 (percent) of the positive class."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pred, gt = pred.astype(bool), gt.astype(bool)
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~gt))
    fn = int(np.sum(~pred & gt))
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    return PrfReport(precision, recall, f1_from_pr(precision, recall), tp, fp, fn)


def f1_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def word_purity(words: np.ndarray, labels: np.ndarray) -> dict:
    """Fraction of each label's pixels carrying that label's most common word."""
    words = np.asarray(words).ravel()
    labels = np.asarray(labels).ravel()
    out = {}
    for lab in np.unique(labels):
        w = words[labels == lab]
        out[int(lab)] = float(np.bincount(w).max() / w.size)
    return out


def format_grid(train_sizes: Sequence[int], infer_sizes: Sequence[int], grid: np.ndarray) -> str:
    lines = ["train\\infer\t" + "\t".join(str(s) for s in infer_sizes)]
    for t, row in zip(train_sizes, grid):
        lines.append(f"{t}\t" + "\t".join(f"{v:.2f}" for v in row))
    return "\n".join(lines) + "\n"


def format_metrics(rows) -> str:
    return "".join(f"{k}\t{v}\n" for k, v in rows)


def evaluate_pairs(model, pairs: Sequence, win: int = 9) -> PrfReport:
    """Pooled change-class PRF over (img1, img2, gt) pairs."""
    tp = fp = fn = 0
    for img1, img2, gt in pairs:
        rep = prf1(detect_change(img1, img2, model, win).mask, gt)
        tp, fp, fn = tp + rep.tp, fp + rep.fp, fn + rep.fn
    p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    r = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    return PrfReport(p, r, f1_from_pr(p, r), tp, fp, fn)


def rf_sweep(catalog, train_sizes: Sequence[int], infer_sizes: Sequence[int], pairs: Sequence, train_fn) -> np.ndarray:
    """F-1 (percent) grid: one model per training crop size, evaluated per inference size.

    ``train_fn(catalog, train_size)`` returns a trained model.
    """
    for s in list(train_sizes) + list(infer_sizes):
        if s % 2 == 0:
            raise ValueError(f"crop sizes must be odd, got {s}")
    grid = np.zeros((len(train_sizes), len(infer_sizes)))
    for i, t in enumerate(train_sizes):
        model = train_fn(catalog, t)
        for j, s in enumerate(infer_sizes):
            grid[i, j] = evaluate_pairs(model, pairs, s).f1
            log.info("train %d infer %d F1 %.2f", t, s, grid[i, j])
    return grid
