"""Dense-array numerics shared by every learned component.

Arrays are plain ``numpy.ndarray`` objects. Forward functions return the
values needed by their backward counterparts so that callers can chain
gradients by hand without a general autodiff engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

PAD_MODES = ("none", "reflect")


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


def reflect_pad(x: np.ndarray, pad: int, axes: tuple = (-2, -1)) -> np.ndarray:
    """Reflect-pad two spatial axes (edge pixel not repeated)."""
    if pad == 0:
        return x
    for ax in axes:
        if pad >= x.shape[ax]:
            raise ValueError(f"reflect padding {pad} too large for extent {x.shape[ax]}")
    widths = [(0, 0)] * x.ndim
    for ax in axes:
        widths[ax] = (pad, pad)
    return np.pad(x, widths, mode="reflect")


def reflect_pad_adjoint(g: np.ndarray, pad: int, axes: tuple = (-2, -1)) -> np.ndarray:
    """Adjoint of :func:`reflect_pad`: fold padded gradient back onto the source."""
    if pad == 0:
        return g
    g = np.moveaxis(g.copy(), axes, (-2, -1))
    n = g.shape[-2]
    for r in range(pad):
        g[..., 2 * pad - r, :] += g[..., r, :]
        g[..., n - 1 - 2 * pad + r, :] += g[..., n - 1 - r, :]
    g = g[..., pad:n - pad, :]
    m = g.shape[-1]
    for c in range(pad):
        g[..., 2 * pad - c] += g[..., c]
        g[..., m - 1 - 2 * pad + c] += g[..., m - 1 - c]
    return np.moveaxis(g[..., pad:m - pad], (-2, -1), axes)


def _pad_amount(k: int, padding: str) -> int:
    if padding not in PAD_MODES:
        raise ValueError(f"padding must be one of {PAD_MODES}, got {padding!r}")
    return (k - 1) // 2 if padding == "reflect" else 0


def _check_conv_shapes(x: np.ndarray, w: np.ndarray) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"weights must be C_out x C_in x k x k, got {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
    if x.shape[-3] != w.shape[1]:
        raise ValueError(f"input has {x.shape[-3]} channels, weights expect {w.shape[1]}")


def _im2col_nhwc(xp: np.ndarray, k: int, h: int, w: int, stride: int = 1) -> np.ndarray:
    """N,H+2p,W+2p,C padded input -> N,H',W',k*k*C patch matrix (offset-major)."""
    span_h = (h - 1) * stride + 1
    span_w = (w - 1) * stride + 1
    return np.concatenate(
        [xp[:, u:u + span_h:stride, v:v + span_w:stride, :] for u in range(k) for v in range(k)], axis=-1
    )


def conv2d_nhwc(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: str = "none", keep: dict | None = None) -> np.ndarray:
    """Channels-last :func:`conv2d`: N,H,W,C_in input, C_out,C_in,k,k weights.

    When ``keep`` is a dict the patch matrix is stored in it for reuse by
    :func:`conv2d_nhwc_backward`.
    """
    c_out, c_in, k, _ = w.shape
    p = _pad_amount(k, padding)
    xp = reflect_pad(x, p, axes=(1, 2))
    hp, wp = xp.shape[1:3]
    if hp < k or wp < k:
        raise ValueError("input smaller than kernel")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    wm = w.transpose(0, 2, 3, 1).reshape(c_out, -1)
    if k == 1:
        return xp[:, ::stride, ::stride, :] @ wm.T
    cols = _im2col_nhwc(xp, k, ho, wo, stride)
    if keep is not None:
        keep["cols"] = cols
    return cols @ wm.T


def conv2d_nhwc_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, padding: str = "none", cols: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Input and weight gradients of a stride-1 :func:`conv2d_nhwc`."""
    c_out, c_in, k, _ = w.shape
    p = _pad_amount(k, padding)
    n, h, wd = grad_out.shape[:3]
    g2 = grad_out.reshape(-1, c_out)
    if k == 1:
        wm = w[:, :, 0, 0]
        grad_w = (g2.T @ x.reshape(-1, c_in)).reshape(c_out, c_in, 1, 1)
        return grad_out @ wm, grad_w
    if cols is None:
        cols = _im2col_nhwc(reflect_pad(x, p, axes=(1, 2)), k, h, wd)
    grad_w = (g2.T @ cols.reshape(-1, cols.shape[-1])).reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
    # input gradient: full correlation of grad_out with the flipped kernel
    gz = np.pad(grad_out, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    wf = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c_in, -1)
    grad_xp = _im2col_nhwc(gz, k, h + k - 1, wd + k - 1) @ wf.T
    return reflect_pad_adjoint(grad_xp, p, axes=(1, 2)), grad_w


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: str = "none") -> np.ndarray:
    """Cross-correlate ``x`` (C_in,H,W or N,C_in,H,W) with ``w`` (C_out,C_in,k,k).

    Output extent is ``(H + 2p - k) // stride + 1`` with ``p = (k - 1) / 2``
    for reflect padding and 0 otherwise.
    """
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    _check_conv_shapes(x, w)
    single = x.ndim == 3
    xb = x[None] if single else x
    out = conv2d_nhwc(xb.transpose(0, 2, 3, 1), w, stride, padding).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return out[0] if single else out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, padding: str = "none"
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a stride-1 batched :func:`conv2d` w.r.t. input and weights."""
    gx, gw = conv2d_nhwc_backward(x.transpose(0, 2, 3, 1), w, grad_out.transpose(0, 2, 3, 1), padding)
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.6
    weight_decay: float = 0.001
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: SgdState) -> list:
    """Classic momentum SGD with weight decay folded into the gradient.

    ``v <- m*v + (g + wd*p)``, ``p <- p - lr*v``. Parameters are updated in
    place and also returned.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("velocity list does not match params")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        g_eff = g + state.weight_decay * p if state.weight_decay else g
        v *= state.momentum
        v += g_eff
        p -= state.learning_rate * v
    return list(params)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-3,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    ``x`` is perturbed in place and restored. ``indices`` restricts the check
    to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be contiguous so it can be perturbed in place")
    ga = np.asarray(analytic_grad).reshape(-1)
    if ga.size != flat.size:
        raise ValueError(f"gradient has {ga.size} entries, x has {flat.size}")
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite objective at coordinate {i}")
        num = (fp - fm) / (2 * eps)
        a = float(ga[i])
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
