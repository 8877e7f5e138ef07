"""Diagonal Gaussians: reparameterized sampling, closed-form KL, and the
schedule that widens the latent prior with the number of visible pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

# log-variance outputs are clamped into this range before any exp
LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass
class DiagGaussian:
    """N(mu, diag(exp(logvar))) over [B, Z] latents."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape or len(self.mu.shape) != 2:
            raise dc.ShapeError(f"DiagGaussian expects matching [B,Z], got {self.mu.shape} and {self.logvar.shape}")

    @property
    def batch(self):
        return self.mu.shape[0]

    @property
    def dim(self):
        return self.mu.shape[1]

    def sample(self, rng: dc.Rng):
        """Reparameterized draw z = mu + sigma * eps; returns (z, eps)."""
        eps = Tensor(rng.normal(self.mu.shape, dtype=self.mu.dtype))
        sigma = dc.exp(dc.scale(self.logvar, 0.5))
        return self.mu + sigma * eps, eps

    def sigma(self):
        return dc.exp(dc.scale(self.logvar, 0.5))


def kl_divergence(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over latent dims and
    averaged over the batch.

    Per dimension: 0.5 * (log vp - log vq + (vq + (mq - mp)^2) / vp - 1).
    """
    if q.mu.shape != p.mu.shape:
        raise dc.ShapeError(f"KL shape mismatch {q.mu.shape} vs {p.mu.shape}")
    dlog = p.logvar - q.logvar
    ratio = dc.exp(q.logvar - p.logvar)
    dmu2 = dc.square(q.mu - p.mu) * dc.exp(dc.scale(p.logvar, -1.0))
    per_dim = dc.scale(dlog + ratio + dmu2 - 1.0, 0.5)
    return dc.tmean(dc.tsum(per_dim, axes=1))


def standard_prior(batch: int, dim: int, sigma_sq: float = 1.0, dtype=np.float32) -> DiagGaussian:
    """Constant (non-learnable) N(0, sigma_sq I) prior broadcast to [B, Z]."""
    if sigma_sq <= 0:
        raise ValueError(f"sigma_sq must be positive, got {sigma_sq}")
    mu = Tensor(np.zeros((batch, dim), dtype=dtype))
    logvar = Tensor(np.full((batch, dim), np.log(sigma_sq), dtype=dtype))
    return DiagGaussian(mu, logvar)


def adaptive_sigma_sq(n_hidden, n_total, sigma_min_sq: float = 0.25):
    """Prior variance as a function of hidden-pixel count: larger holes get
    wider priors (sigma^2 = n/N), floored so tiny holes keep some spread.

    Accepts scalars or numpy arrays of counts; returns the same shape.
    """
    frac = np.asarray(n_hidden, dtype=np.float64) / float(n_total)
    out = np.maximum(sigma_min_sq, frac)
    if np.ndim(n_hidden) == 0:
        return float(out)
    return out


def adaptive_prior(n_hidden, n_total: int, batch: int, dim: int, sigma_min_sq: float = 0.25, dtype=np.float32) -> DiagGaussian:
    """Per-instance N(0, sigma^2(n) I) prior as constant tensors [B, Z].

    ``n_hidden`` is a scalar or a length-``batch`` array of hidden-pixel
    counts; each row of the prior uses its own variance.
    """
    s2 = adaptive_sigma_sq(n_hidden, n_total, sigma_min_sq)
    s2 = np.broadcast_to(np.asarray(s2, dtype=np.float64).reshape(-1, 1), (batch, dim))
    mu = Tensor(np.zeros((batch, dim), dtype=dtype))
    logvar = Tensor(np.log(s2).astype(dtype))
    return DiagGaussian(mu, logvar)
