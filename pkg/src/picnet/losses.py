"""The six training losses and their weighted total.

Three groups, each with a reconstructive and a generative member: latent
KL terms (posterior against the adaptive prior; posterior against the
conditional prior), appearance terms (full-image l1 for reconstructions;
visible-only l1 for free generations), and adversarial terms (feature
matching against D1; least-squares realism against D2). The generative
appearance loss never sees hidden pixels, which is what lets that path
produce diverse hole contents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .dists import DiagGaussian, kl_divergence

CSV_HEADER = "step,kl_r,kl_g,app_r,app_g,ad_r,ad_g,total"


@dataclass
class LossWeights:
    alpha_kl: float = 20.0
    alpha_app: float = 20.0
    alpha_ad: float = 1.0
    kl_scale_mult: float = 1.0  # set to n_scale when training multi-scale

    def __post_init__(self):
        if min(self.alpha_kl, self.alpha_app, self.alpha_ad, self.kl_scale_mult) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def effective_kl(self):
        return self.alpha_kl * self.kl_scale_mult


@dataclass
class LossReport:
    step: int
    kl_r: float
    kl_g: float
    app_r: float
    app_g: float
    ad_r: float
    ad_g: float
    total: float

    def csv_row(self):
        vals = (self.kl_r, self.kl_g, self.app_r, self.app_g, self.ad_r, self.ad_g, self.total)
        return f"{self.step}," + ",".join(f"{v:.10g}" for v in vals)

    def finite(self):
        return all(np.isfinite(v) for v in
                   (self.kl_r, self.kl_g, self.app_r, self.app_g, self.ad_r, self.ad_g, self.total))


def downsample_image(arr: np.ndarray, size: int) -> np.ndarray:
    """Area-average a [B,C,H,W] array down to size x size (H = W = 2^k s)."""
    B, C, H, W = arr.shape
    f = H // size
    if f * size != H:
        raise dc.ShapeError(f"cannot downsample {H} to {size}")
    if f == 1:
        return arr
    return arr.reshape(B, C, size, f, size, f).mean(axis=(3, 5))


def loss_kl_r(q_psi: DiagGaussian, prior: DiagGaussian) -> Tensor:
    """KL of the posterior against the adaptive hole prior N(0, sigma^2(n)I)."""
    return kl_divergence(q_psi, prior)


def loss_kl_g(q_psi: DiagGaussian, p_phi: DiagGaussian) -> Tensor:
    """KL of the posterior against the conditional prior; couples the two
    heads so p_phi is not freely learned."""
    return kl_divergence(q_psi, p_phi)


def loss_app_r(rec_scales, gt_scales) -> Tensor:
    """Full-image l1 between reconstruction and ground truth, averaged over
    pixels and scales."""
    if len(rec_scales) != len(gt_scales):
        raise dc.ShapeError(f"scale count mismatch {len(rec_scales)} vs {len(gt_scales)}")
    total = None
    for rec, gt in zip(rec_scales, gt_scales):
        if rec.shape != gt.shape:
            raise dc.ShapeError(f"scale shapes {rec.shape} vs {gt.shape}")
        term = dc.tmean(dc.absolute(rec - gt))
        total = term if total is None else total + term
    return dc.scale(total, 1.0 / len(rec_scales))


def loss_app_g(gen_scales, gt_scales, mask_scales) -> Tensor:
    """l1 restricted to visible pixels (per the binary mask at each scale),
    normalized by the visible count; hidden pixels cannot influence it."""
    if not len(gen_scales) == len(gt_scales) == len(mask_scales):
        raise dc.ShapeError("scale count mismatch between images and masks")
    total = None
    for gen, gt, m in zip(gen_scales, gt_scales, mask_scales):
        m_arr = m.data if isinstance(m, Tensor) else np.asarray(m)
        if not np.all((m_arr == 0) | (m_arr == 1)):
            raise ValueError("mask must be exactly binary")
        mb = np.broadcast_to(m_arr, gen.shape)
        visible = float(mb.sum())
        if visible == 0:
            raise ValueError("mask hides every pixel; visible l1 undefined")
        diff = dc.absolute(gen - gt) * Tensor(mb.astype(gen.dtype))
        term = dc.scale(dc.tsum(diff), 1.0 / visible)
        total = term if total is None else total + term
    return dc.scale(total, 1.0 / len(gen_scales))


def loss_ad_r(feat_rec: Tensor, feat_real: Tensor) -> Tensor:
    """Feature match against D1: per-instance L2 norm of the final-layer
    feature difference, batch-averaged."""
    if feat_rec.shape != feat_real.shape:
        raise dc.ShapeError(f"feature shapes {feat_rec.shape} vs {feat_real.shape}")
    d = feat_rec - feat_real
    axes = tuple(range(1, len(d.shape)))
    return dc.tmean(dc.sqrt(dc.tsum(dc.square(d), axes=axes)))


def loss_ad_g(score_gen: Tensor) -> Tensor:
    """LSGAN generator objective: push D2's score toward the real target 1."""
    return dc.tmean(dc.square(score_gen - 1.0))


def loss_disc(score_real: Tensor, score_fake: Tensor) -> Tensor:
    """LSGAN discriminator objective with targets 1 (real) and 0 (fake)."""
    real = dc.tmean(dc.square(score_real - 1.0))
    fake = dc.tmean(dc.square(score_fake))
    return dc.scale(real + fake, 0.5)


def total_loss(kl_r, kl_g, app_r, app_g, ad_r, ad_g, w: LossWeights) -> Tensor:
    return (
        dc.scale(kl_r + kl_g, w.effective_kl)
        + dc.scale(app_r + app_g, w.alpha_app)
        + dc.scale(ad_r + ad_g, w.alpha_ad)
    )
