"""Evaluation metrics (l1 / PSNR / TV), pixel-space sample diversity, and
discriminator-based sample ranking.

Perceptual metrics (LPIPS, Inception Score) need pretrained networks and are
out of scope; diversity is a pixel-l1 proxy and only orderings across
training variants are ever asserted on it, never absolute values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ShapeError, Tensor

PSNR_CAP = 100.0
_MSE_FLOOR = 1e-10

CSV_HEADER = "name,l1,psnr,tv,diversity_full,diversity_masked"


@dataclass
class MetricsReport:
    l1: float
    psnr: float
    tv: float
    diversity_full: float = 0.0
    diversity_masked: float = 0.0

    def csv_row(self, name: str) -> str:
        vals = (self.l1, self.psnr, self.tv, self.diversity_full, self.diversity_masked)
        return name + "," + ",".join("%.10g" % v for v in vals)


def format_table(rows) -> str:
    """Pretty-print (name, MetricsReport) pairs as an aligned text table."""
    header = CSV_HEADER.split(",")
    cells = [header] + [r.csv_row(name).split(",") for name, r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in cells)


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(img_a, img_b) -> float:
    """Mean absolute error."""
    a, b = _check_pair(img_a, img_b)
    return float(np.abs(a - b).mean())


def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio in dB.

    Inputs live in [-1, 1] and are remapped to [0, 1] so MAX = 1; capped at
    100 dB when the MSE vanishes.
    """
    a, b = _check_pair(img_a, img_b)
    mse = float(np.square((a - b) * 0.5).mean())
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def tv(img) -> float:
    """Anisotropic total variation: mean |horizontal diff| + mean |vertical
    diff| over the trailing two axes."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] < 2 or a.shape[-2] < 2:
        raise ShapeError(f"tv needs at least 2x2 spatial extents, got {a.shape}")
    dh = np.abs(np.diff(a, axis=-1)).mean()
    dv = np.abs(np.diff(a, axis=-2)).mean()
    return float(dh + dv)


def diversity(samples, mask) -> tuple:
    """Mean pairwise l1 distance over all unordered sample pairs.

    Returns (full, masked): over every pixel, and over hole pixels only
    (mask == 0). The mask broadcasts across channels.
    """
    if len(samples) < 2:
        raise ValueError(f"diversity needs >= 2 samples, got {len(samples)}")
    arrs = [np.asarray(s, dtype=np.float64) for s in samples]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeError(f"sample shape mismatch: {a.shape} vs {shape}")
    m = np.asarray(mask, dtype=np.float64)
    hole = np.broadcast_to(m == 0.0, shape)
    n_hole = int(hole.sum())
    if n_hole == 0:
        raise ValueError("mask has no hidden pixels")
    full_total, masked_total, pairs = 0.0, 0.0, 0
    for i in range(len(arrs)):
        for j in range(i + 1, len(arrs)):
            d = np.abs(arrs[i] - arrs[j])
            full_total += d.mean()
            masked_total += d[hole].sum() / n_hole
            pairs += 1
    return full_total / pairs, masked_total / pairs


def rank_scores(scores, k) -> list:
    """Indices of the k highest scores, ties broken by lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a non-empty 1-D sequence")
    if not 1 <= k <= s.size:
        raise ValueError(f"k must be in [1, {s.size}], got {k}")
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def rank_samples(disc, completions, k) -> list:
    """Top-k completion indices by discriminator score (stable ties)."""
    if len(completions) == 0:
        raise ValueError("no completions to rank")
    scores = [float(disc(Tensor(np.asarray(c)[None]))[0].item()) for c in completions]
    return rank_scores(scores, k)
