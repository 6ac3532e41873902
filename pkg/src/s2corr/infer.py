"""Prediction utilities: argmax labels, bilinear upsampling, sliding-window inference, mIoU."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError

IGNORE_INDEX = 255


class ContractError(RuntimeError):
    """A window model returned logits of the wrong shape."""


@dataclass
class TileConfig:
    kernel: int = 448
    overlap: float = 0.333
    out_h: int = 448
    out_w: int = 896

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must be in [0, 1)")
        if self.kernel < 1 or self.kernel > min(self.out_h, self.out_w):
            raise ValueError(f"kernel {self.kernel} must be in [1, min(out_h, out_w)]")


@dataclass
class SegPrediction:
    labels: np.ndarray  # (out_h, out_w)
    logits: np.ndarray  # (out_h, out_w, N_C)
    coverage: np.ndarray  # (out_h, out_w) window count per pixel


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=-1)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def window_origins(extent: int, kernel: int, overlap: float) -> list[int]:
    """Origins of overlapping windows; the last one is pulled back to end at ``extent``."""
    if kernel > extent:
        raise ValueError(f"kernel {kernel} larger than extent {extent}")
    if kernel < 1:
        raise ValueError("kernel must be positive")
    stride = max(1, round_half_up((1.0 - overlap) * kernel))
    origins = []
    o = 0
    while o + kernel < extent:
        origins.append(o)
        o += stride
    last = extent - kernel
    if not origins or origins[-1] != last:
        origins.append(last)
    return origins


def tiled_infer(model: Callable[[int, int, int], np.ndarray], cfg: TileConfig) -> SegPrediction:
    """Sum window logits over the output canvas and divide by the per-pixel window count.

    ``model(y0, x0, kernel)`` returns ``(kernel, kernel, N_C)`` logits for the window whose
    top-left corner is ``(y0, x0)``. Windows are accumulated in a fixed raster order.
    """
    ys = window_origins(cfg.out_h, cfg.kernel, cfg.overlap)
    xs = window_origins(cfg.out_w, cfg.kernel, cfg.overlap)
    acc = None
    count = np.zeros((cfg.out_h, cfg.out_w))
    k = cfg.kernel
    for y0 in ys:
        for x0 in xs:
            win = np.asarray(model(y0, x0, k))
            if win.ndim != 3 or win.shape[:2] != (k, k):
                raise ContractError(f"window at ({y0}, {x0}) returned shape {win.shape}, expected ({k}, {k}, N_C)")
            if acc is None:
                acc = np.zeros((cfg.out_h, cfg.out_w, win.shape[2]), dtype=np.float64)
            elif win.shape[2] != acc.shape[2]:
                raise ContractError(f"window at ({y0}, {x0}) has {win.shape[2]} classes, expected {acc.shape[2]}")
            acc[y0 : y0 + k, x0 : x0 + k] += win
            count[y0 : y0 + k, x0 : x0 + k] += 1.0
    logits = acc / count[..., None]
    return SegPrediction(argmax_labels(logits), logits, count)


def bilinear_upsample(logits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an ``(h, w, C)`` field with half-pixel centres (align_corners=False)."""
    logits = np.asarray(logits)
    if logits.ndim != 3:
        raise DimensionError(f"expected (h, w, C), got {logits.shape}")
    h, w, _ = logits.shape
    if out_h < h or out_w < w:
        raise ValueError(f"cannot downscale {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return logits.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    rows = logits[y0] * (1 - fy)[:, None, None] + logits[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = IGNORE_INDEX
         ) -> tuple[list[float], float]:
    """Per-class IoU and their mean over classes present in the ground truth.

    Classes absent from both prediction and ground truth get NaN. A class predicted but
    absent from ground truth reports IoU 0 but is left out of the mean.
    """
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore
    pred, gt = pred[keep], gt[keep]
    if gt.size == 0:
        raise ValueError("no pixels left after ignore masking")
    if np.any((gt < 0) | (gt >= num_classes)) or np.any((pred < 0) | (pred >= num_classes)):
        raise ValueError("labels out of range")
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = [float(tp[c] / denom[c]) if denom[c] > 0 else float("nan") for c in range(num_classes)]
    present = conf.sum(axis=1) > 0
    mean = float(np.mean([per_class[c] for c in range(num_classes) if present[c]]))
    return per_class, mean
