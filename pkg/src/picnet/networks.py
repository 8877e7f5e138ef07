"""The five sub-networks and their dual-path wiring.

One encoder serves both paths (shared weights): applied to the masked image
it yields f_m (and the skip feature used by long-term attention), applied to
the complement image it yields f_c. Infer1 reads f_c into the posterior
q_psi; Infer2 reads f_m into the conditional prior p_phi. One generator
decodes either latent against f_m. Two discriminators judge the paths
separately: D1 scores reconstructions (and supplies feature-match targets),
D2 scores free generations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import layers as L
from .diffcore import Rng, Tensor
from .dists import LOGVAR_MAX, LOGVAR_MIN, DiagGaussian, adaptive_prior

BOTTLENECK = 4


@dataclass
class NetConfig:
    image_size: int = 32
    channels: int = 1
    ch: int = 8
    z_dim: int = 32
    attention_size: int = 8
    n_scale: int = 2
    infer2_blocks: int = 3

    def __post_init__(self):
        size, att = self.image_size, self.attention_size
        if size < BOTTLENECK * 2 or size & (size - 1):
            raise ValueError(f"image_size must be a power of two >= {BOTTLENECK * 2}, got {size}")
        if att < BOTTLENECK or att > size or att & (att - 1):
            raise ValueError(f"attention_size must be a power of two in [{BOTTLENECK}, {size}], got {att}")
        if self.n_scale < 1 or self.n_scale > self.n_down:
            raise ValueError(f"n_scale must be in [1, {self.n_down}], got {self.n_scale}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def n_down(self):
        return int(np.log2(self.image_size // BOTTLENECK))

    @property
    def widths(self):
        """Channel widths after the start block and each down block."""
        return [min((2 ** i) * self.ch, 4 * self.ch) for i in range(self.n_down + 1)]

    @property
    def bottleneck_ch(self):
        return self.widths[-1]

    @property
    def n_pixels(self):
        return self.image_size * self.image_size


def downsample_mask(m: np.ndarray, size: int) -> np.ndarray:
    """Reduce a [B,1,H,W] binary mask to [B,1,size,size]; a coarse pixel is
    visible only when every fine pixel under it is visible."""
    B, one, H, W = m.shape
    f = H // size
    if f * size != H:
        raise dc.ShapeError(f"mask size {H} not divisible by {size}")
    if f == 1:
        return m.copy()
    red = m.reshape(B, 1, size, f, size, f).min(axis=(3, 5))
    return np.ascontiguousarray(red)


class Encoder(L.Module):
    """Representation network: start block then down blocks to the 4x4
    bottleneck; also exposes the feature at the attention resolution."""

    def __init__(self, rng: Rng, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.start = L.ResBlock(rng, "start", cfg.channels, w[0])
        self.downs = L.ModuleList(
            L.ResBlock(rng, "down", w[i], w[i + 1]) for i in range(cfg.n_down)
        )
        self.skip_ch = w[int(np.log2(cfg.image_size // cfg.attention_size))]

    def __call__(self, img):
        if img.shape[1:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise dc.ShapeError(f"encoder expects [B,{self.cfg.channels},{self.cfg.image_size},{self.cfg.image_size}], got {img.shape}")
        h = self.start(img)
        skip = h if self.cfg.attention_size == self.cfg.image_size else None
        res = self.cfg.image_size
        for blk in self.downs:
            h = blk(h)
            res //= 2
            if res == self.cfg.attention_size:
                skip = h
        return h, skip


class InferHead(L.Module):
    """Residual stack then linear projections to (mu, logvar) of a
    diagonal Gaussian over the latent code."""

    def __init__(self, rng: Rng, cfg: NetConfig, n_blocks):
        super().__init__()
        c = cfg.bottleneck_ch
        self.blocks = L.ModuleList(L.ResBlock(rng, "plain", c, c) for _ in range(n_blocks))
        flat = c * BOTTLENECK * BOTTLENECK
        self.mu = L.Linear(rng, flat, cfg.z_dim)
        self.logvar = L.Linear(rng, flat, cfg.z_dim)

    def __call__(self, f):
        h = f
        for blk in self.blocks:
            h = blk(h)
        h = dc.reshape(h, (f.shape[0], int(np.prod(f.shape[1:]))))
        mu = self.mu(h)
        logvar = dc.clamp(self.logvar(h), LOGVAR_MIN, LOGVAR_MAX)
        return DiagGaussian(mu, logvar)


class Generator(L.Module):
    """Decoder: latent projected to the bottleneck, fused with f_m, then
    up blocks with short+long attention at the configured resolution and a
    tanh output head at each of the last n_scale resolutions."""

    def __init__(self, rng: Rng, cfg: NetConfig, skip_ch):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        c = cfg.bottleneck_ch
        flat = c * BOTTLENECK * BOTTLENECK
        self.z_proj = L.Linear(rng, cfg.z_dim, flat)
        self.fuse_z = L.Conv2d(rng, 2 * c, c, 1)
        self.ups = L.ModuleList(
            L.ResBlock(rng, "up", w[i + 1], w[i]) for i in reversed(range(cfg.n_down))
        )
        self.attention = L.AttentionLayer(rng, self._res_ch(cfg.attention_size))
        self.fuse_attn = L.Conv2d(
            rng, self._res_ch(cfg.attention_size) + skip_ch, self._res_ch(cfg.attention_size), 1
        )
        head_res = [cfg.image_size // (2 ** s) for s in reversed(range(cfg.n_scale))]
        self.heads = L.ModuleList(
            L.Conv2d(rng, self._res_ch(r), cfg.channels, 3, pad=1) for r in head_res
        )
        self.head_res = head_res

    def _res_ch(self, res):
        # channel width of the decoder feature at a given resolution
        return self.cfg.widths[int(np.log2(self.cfg.image_size // res))]

    def __call__(self, z, f_m, f_skip, mask):
        cfg = self.cfg
        if z.shape[1] != cfg.z_dim:
            raise dc.ShapeError(f"latent dim {z.shape[1]}, expected {cfg.z_dim}")
        B = z.shape[0]
        c = cfg.bottleneck_ch
        h = dc.reshape(self.z_proj(z), (B, c, BOTTLENECK, BOTTLENECK))
        h = self.fuse_z(dc.concat([h, f_m], axis=1))
        res = BOTTLENECK
        outputs = []
        att_mask = Tensor(downsample_mask(mask.data, cfg.attention_size).astype(mask.dtype))
        if res == cfg.attention_size:
            h = self._attend(h, f_skip, att_mask)
        if res in self.head_res:
            outputs.append(self._head(res, h))
        for blk in self.ups:
            h = blk(h)
            res *= 2
            if res == cfg.attention_size:
                h = self._attend(h, f_skip, att_mask)
            if res in self.head_res:
                outputs.append(self._head(res, h))
        return outputs

    def _attend(self, h, f_skip, att_mask):
        y_d, y_e, _ = self.attention(h, f_skip, att_mask)
        return self.fuse_attn(dc.concat([y_d, y_e], axis=1))

    def _head(self, res, h):
        conv = self.heads[self.head_res.index(res)]
        return dc.tanh(conv(dc.leaky_relu(h, L.LEAK)))


class Discriminator(L.Module):
    """Down stack with self-attention, closed by LeakyReLU and an unpadded
    3x3 conv to a small score map; the score is its spatial mean and the
    features are the final-layer activations entering that conv."""

    def __init__(self, rng: Rng, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.start = L.ResBlock(rng, "start", cfg.channels, w[0])
        self.downs = L.ModuleList(
            L.ResBlock(rng, "down", w[i], w[i + 1]) for i in range(cfg.n_down)
        )
        self.attn = L.SelfAttention(rng, w[int(np.log2(cfg.image_size // cfg.attention_size))])
        self.tail = L.ResBlock(rng, "plain", w[-1], w[-1])
        self.final = L.Conv2d(rng, w[-1], 1, 3, pad=0)

    def __call__(self, img):
        if img.shape[1:] != (self.cfg.channels, self.cfg.image_size, self.cfg.image_size):
            raise dc.ShapeError(f"discriminator expects image size {self.cfg.image_size}, got {img.shape}")
        h = self.start(img)
        res = self.cfg.image_size
        if res == self.cfg.attention_size:
            h = self.attn(h)
        for blk in self.downs:
            h = blk(h)
            res //= 2
            if res == self.cfg.attention_size:
                h = self.attn(h)
        h = self.tail(h)
        feat = dc.leaky_relu(h, L.LEAK)
        score_map = self.final(feat)
        score = dc.reshape(dc.tmean(score_map, axes=(2, 3)), (img.shape[0], 1))
        return score, feat


class ModelBundle(L.Module):
    def __init__(self, rng: Rng, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(rng.fork(0), cfg)
        self.infer1 = InferHead(rng.fork(1), cfg, 1)
        self.infer2 = InferHead(rng.fork(2), cfg, cfg.infer2_blocks)
        self.generator = Generator(rng.fork(3), cfg, self.encoder.skip_ch)
        self.disc_rec = Discriminator(rng.fork(4), cfg)
        self.disc_gen = Discriminator(rng.fork(5), cfg)

    def g_side(self):
        """Modules updated in the generator phase (jointly)."""
        return {
            "encoder": self.encoder,
            "infer1": self.infer1,
            "infer2": self.infer2,
            "generator": self.generator,
        }


@dataclass
class PathOutputs:
    I_rec: list  # reconstructive-path images, ascending scale
    I_gen: list  # generative-path images, ascending scale
    q_psi: DiagGaussian
    p_phi: DiagGaussian
    prior: DiagGaussian  # adaptive N(0, sigma^2(n) I)
    f_m: Tensor
    f_skip: Tensor
    d1_feat_rec: Tensor | None = None
    d1_feat_real: Tensor | None = None
    d2_score_gen: Tensor | None = None


def forward_dual(model: ModelBundle, batch, rng: Rng, with_disc=False, sigma_min_sq=0.25) -> PathOutputs:
    """Run both pipelines on a batch.

    batch carries I_g [B,C,H,W], M [B,1,H,W] (1 = visible), and n [B]
    hidden-pixel counts. The reconstructive path encodes the complement
    image and samples q_psi; the generative path encodes the masked image
    and samples p_phi; one shared generator decodes both latents against
    the same visible-region features.
    """
    cfg = model.cfg
    I_g, M = batch.I_g, batch.M
    L.check_binary_mask(M)
    mask_b = np.broadcast_to(M.data, I_g.shape)
    I_m = Tensor((I_g.data * mask_b).astype(I_g.dtype))
    I_c = Tensor((I_g.data * (1.0 - mask_b)).astype(I_g.dtype))

    f_m, f_skip = model.encoder(I_m)
    f_c, _ = model.encoder(I_c)
    q_psi = model.infer1(f_c)
    p_phi = model.infer2(f_m)
    prior = adaptive_prior(batch.n, cfg.n_pixels, I_g.shape[0], cfg.z_dim,
                           sigma_min_sq=sigma_min_sq, dtype=I_g.dtype)

    z_rec, _ = q_psi.sample(rng.fork(0))
    z_gen, _ = p_phi.sample(rng.fork(1))
    I_rec = model.generator(z_rec, f_m, f_skip, M)
    I_gen = model.generator(z_gen, f_m, f_skip, M)

    out = PathOutputs(I_rec=I_rec, I_gen=I_gen, q_psi=q_psi, p_phi=p_phi,
                      prior=prior, f_m=f_m, f_skip=f_skip)
    if with_disc:
        _, out.d1_feat_rec = model.disc_rec(I_rec[-1])
        with dc.no_record():
            _, out.d1_feat_real = model.disc_rec(I_g)
        out.d2_score_gen, _ = model.disc_gen(I_gen[-1])
    return out
