"""Gaussian label maps and the two response-map losses.

``naive_loss`` is the plain squared error. ``masked_loss`` weights each cell by
``a * exp(b * label)`` and drops cells whose absolute error is below ``th``, so
the many near-zero background cells cannot drown out the few positive ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    a: float = 0.1
    b: float = 3.0
    th: float = 0.05
    sigma_frac: float = 0.1

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("weighting factors a and b must be positive")
        if not 0 < self.th < 1:
            raise ValueError("threshold th must lie in (0, 1)")
        if self.sigma_frac <= 0:
            raise ValueError("sigma_frac must be positive")


@dataclass
class LabelMap:
    values: np.ndarray
    peak: tuple


def make_label_map(peak, map_side, sigma_frac=0.1, dtype=np.float64):
    """Isotropic Gaussian over a ``map_side`` grid, value exactly 1 at ``peak = (row, col)``."""
    r, c = peak
    if not (0 <= r < map_side and 0 <= c < map_side):
        raise ValueError(f"peak {peak} outside a {map_side}x{map_side} map")
    sigma = sigma_frac * map_side
    rows, cols = np.mgrid[0:map_side, 0:map_side]
    d2 = (rows - r) ** 2 + (cols - c) ** 2
    return LabelMap(np.exp(-d2 / (2.0 * sigma ** 2)).astype(dtype), (int(r), int(c)))


def _check(m, ml):
    m = np.asarray(m)
    ml = np.asarray(ml)
    if m.shape != ml.shape:
        raise ValueError(f"prediction shape {m.shape} != label shape {ml.shape}")
    return m, ml


def naive_loss(m, ml):
    m, ml = _check(m, ml)
    return float(np.sum((m - ml) ** 2))


def naive_loss_grad(m, ml):
    m, ml = _check(m, ml)
    return 2.0 * (m - ml)


def weighting_map(ml, a=0.1, b=3.0):
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    return a * np.exp(b * np.asarray(ml))


def indicator_map(m, ml, th=0.05):
    """1 where ``|m - ml| >= th`` (sign(0) counts as +1), else 0."""
    m, ml = _check(m, ml)
    return (np.abs(m - ml) >= th).astype(m.dtype if m.dtype.kind == "f" else np.float64)


def masked_loss(m, ml, cfg=LossConfig()):
    m, ml = _check(m, ml)
    e = weighting_map(ml, cfg.a, cfg.b) * indicator_map(m, ml, cfg.th) * (m - ml)
    return float(np.sum(e * e))


def masked_loss_grad(m, ml, cfg=LossConfig()):
    """``2 W^2 S (m - ml)``; the weight and the mask are held constant."""
    m, ml = _check(m, ml)
    w = weighting_map(ml, cfg.a, cfg.b)
    return 2.0 * w * w * indicator_map(m, ml, cfg.th) * (m - ml)


def batch_loss(maps, labels, cfg=LossConfig(), kind="masked"):
    """Mean per-pair loss over a ``B x m x m`` batch.

    Returns ``(mean_loss, per_pair_losses, grad)`` with ``grad`` taken w.r.t.
    ``maps`` of the mean.
    """
    maps, labels = _check(maps, labels)
    diff = maps - labels
    if kind == "masked":
        w = weighting_map(labels, cfg.a, cfg.b)
        ws = w * indicator_map(maps, labels, cfg.th)
        per_pair = np.sum((ws * diff) ** 2, axis=(1, 2))
        grad = 2.0 * w * ws * diff
    elif kind == "naive":
        per_pair = np.sum(diff ** 2, axis=(1, 2))
        grad = 2.0 * diff
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    grad = (grad / len(maps)).astype(maps.dtype, copy=False)
    return float(per_pair.mean()), per_pair, grad
