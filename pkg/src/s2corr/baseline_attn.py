"""Attention-based aggregation used as the comparison arm.

Single-head, no shifted windows: windowed spatial attention per class over a clipped
(2r+1)^2 neighbourhood, and full attention over the class tokens at each position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correlation import CorrelationVolume
from .numerics import DimensionError


@dataclass
class AttnParams:
    spatial_wq: np.ndarray
    spatial_wk: np.ndarray
    spatial_wv: np.ndarray
    class_wq: np.ndarray
    class_wk: np.ndarray
    class_wv: np.ndarray
    window: int = 1

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window radius must be >= 0")

    @property
    def d_f(self) -> int:
        return self.spatial_wq.shape[0]

    @classmethod
    def init(cls, d_f: int, rng: np.random.Generator, window: int = 1, dtype=np.float64) -> AttnParams:
        bound = 1.0 / np.sqrt(d_f)
        mats = [rng.uniform(-bound, bound, size=(d_f, d_f)).astype(dtype) for _ in range(6)]
        return cls(*mats, window=window)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - np.max(scores, axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=axis, keepdims=True)


def _project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # BLAS is fine here: the baseline is not part of the bit-reproducible refine path
    return np.matmul(x, w.T)


def _check(e: CorrelationVolume, p: AttnParams) -> None:
    if e.d_f != p.d_f:
        raise DimensionError(f"volume d_f {e.d_f} != attention d_f {p.d_f}")
    if e.values.shape[0] != e.height * e.width:
        raise DimensionError("volume token count does not match its grid")


def spatial_attention(e: CorrelationVolume, p: AttnParams, return_weights: bool = False):
    """Windowed attention within each class slice; the same weights serve every class."""
    _check(e, p)
    H, W, r = e.height, e.width, p.window
    n, d_f = e.num_classes, e.d_f
    q = _project(e.values, p.spatial_wq).reshape(H, W, n, d_f)
    k = _project(e.values, p.spatial_wk).reshape(H, W, n, d_f)
    v = _project(e.values, p.spatial_wv).reshape(H, W, n, d_f)

    side = 2 * r + 1
    pad = ((r, r), (r, r), (0, 0), (0, 0))
    kp = np.pad(k, pad)
    vp = np.pad(v, pad)
    valid = np.pad(np.ones((H, W), dtype=bool), r)
    scores = np.full((H, W, n, side * side), -np.inf, dtype=e.values.dtype)
    neigh_v = np.empty((H, W, n, side * side, d_f), dtype=e.values.dtype)
    scale = 1.0 / np.sqrt(d_f)
    for oi in range(side):
        for oj in range(side):
            m = oi * side + oj
            ks = kp[oi : oi + H, oj : oj + W]
            s = np.sum(q * ks, axis=-1) * scale
            inside = valid[oi : oi + H, oj : oj + W]
            scores[..., m] = np.where(inside[:, :, None], s, -np.inf)
            neigh_v[..., m, :] = vp[oi : oi + H, oj : oj + W]
    weights = softmax(scores, axis=-1)
    out = np.einsum("hwnm,hwnmd->hwnd", weights, neigh_v).reshape(H * W, n, d_f)
    vol = CorrelationVolume(H, W, out)
    return (vol, weights) if return_weights else vol


def class_attention(e: CorrelationVolume, p: AttnParams, return_weights: bool = False):
    """Full attention across the N_C class tokens at every position."""
    _check(e, p)
    q = _project(e.values, p.class_wq)
    k = _project(e.values, p.class_wk)
    v = _project(e.values, p.class_wv)
    scores = np.matmul(q, k.transpose(0, 2, 1)) / np.sqrt(e.d_f)
    weights = softmax(scores, axis=-1)
    vol = CorrelationVolume(e.height, e.width, np.matmul(weights, v))
    return (vol, weights) if return_weights else vol
