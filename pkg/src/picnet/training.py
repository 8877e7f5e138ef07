"""Training loop: alternating discriminator/generator Adam steps over the
dual pipeline, with deterministic per-step randomness so any step can be
reproduced (and resumed) from (seed, step) alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import diffcore as dc
from . import layers as L
from . import losses
from . import networks as N
from .diffcore import Rng, Tape, Tensor

# rng fork domains: every consumer of randomness gets its own key path so
# streams never alias across purposes or steps
DOM_INIT = 0
DOM_BATCH = 1
DOM_MASK = 2
DOM_STEP = 3
DOM_PROBE = 4


class TrainAbort(RuntimeError):
    """Numerical failure (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    net: N.NetConfig = field(default_factory=N.NetConfig)
    mask: data.MaskSpec = field(default_factory=data.MaskSpec)
    weights: losses.LossWeights | None = None
    total_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    d_steps_per_g: int = 1
    seed: int = 1
    sigma_min_sq: float = 0.25
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.weights is None:
            # KL terms are rescaled by the output-scale count
            self.weights = losses.LossWeights(kl_scale_mult=float(self.net.n_scale))
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.d_steps_per_g < 1:
            raise ValueError(f"d_steps_per_g must be >= 1, got {self.d_steps_per_g}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size >= 1 and total_steps >= 0 required")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


def orthogonal_init(shape, rng: Rng, dtype=np.float32):
    """QR-based orthogonal initializer (gain 1); see layers.orthogonal."""
    return L.orthogonal(shape, rng, dtype=dtype)


class Adam:
    """Adam over a named parameter group, with bias correction.

    With beta1 = 0 the first moment is the raw gradient. Parameters whose
    grad is None are skipped entirely (no moment decay). A non-finite
    gradient aborts, naming the parameter.
    """

    def __init__(self, params: dict, lr, beta1=0.0, beta2=0.999, eps=1e-8):
        self._group = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = float(lr), float(beta1), float(beta2), float(eps)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self._group.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self._group.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self._group.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainAbort(f"non-finite gradient for parameter {name!r}")
            dt = p.data.dtype.type
            m = self._m[name] * dt(self.beta1) + g * dt(1.0 - self.beta1)
            v = self._v[name] * dt(self.beta2) + (g * g) * dt(1.0 - self.beta2)
            self._m[name], self._v[name] = m, v
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = p.data - dt(self.lr) * update

    def state_entries(self, tag):
        out = {f"opt.{tag}.t": np.asarray(float(self.t))}
        for name in self._group:
            out[f"opt.{tag}.m.{name}"] = self._m[name]
            out[f"opt.{tag}.v.{name}"] = self._v[name]
        return out

    def restore(self, tag, entries):
        self.t = int(_pull(entries, f"opt.{tag}.t"))
        for name in self._group:
            self._m[name] = _require_like(entries, f"opt.{tag}.m.{name}", self._m[name])
            self._v[name] = _require_like(entries, f"opt.{tag}.v.{name}", self._v[name])


def _pull(entries, key):
    if key not in entries:
        raise ckpt.CheckpointError(f"missing checkpoint entry {key!r}")
    return entries[key]


def _require_like(entries, key, ref):
    arr = _pull(entries, key)
    if arr.shape != ref.shape:
        raise ckpt.CheckpointError(f"entry {key!r} has shape {arr.shape}, expected {ref.shape}")
    if arr.dtype != ref.dtype:
        raise ckpt.CheckpointError(
            f"entry {key!r} has dtype {arr.dtype}, expected {ref.dtype} (no silent cast)"
        )
    return arr


def build_optimizers(model: N.ModelBundle, cfg: TrainConfig):
    """One Adam per network group: the G side jointly, and each D."""
    g_params = {}
    for tag, mod in model.g_side().items():
        for name, t in mod.named_params().items():
            g_params[f"{tag}.{name}"] = t
    kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    return (
        Adam(g_params, **kw),
        Adam({f"disc_rec.{k}": v for k, v in model.disc_rec.named_params().items()}, **kw),
        Adam({f"disc_gen.{k}": v for k, v in model.disc_gen.named_params().items()}, **kw),
    )


def train_step(model: N.ModelBundle, batch: data.Batch, opt_g: Adam, opt_d1: Adam,
               opt_d2: Adam, cfg: TrainConfig, rng: Rng) -> losses.LossReport:
    """One alternation: d_steps_per_g discriminator updates on detached
    fakes, then one joint generator-side update through both paths."""
    model.zero_grads()
    w = cfg.weights
    with L.sn_updates():
        with Tape() as g_tape:
            out = N.forward_dual(model, batch, rng.fork(0), sigma_min_sq=cfg.sigma_min_sq)

            # discriminator phase: fakes are constants here
            rec_d = out.I_rec[-1].detach()
            gen_d = out.I_gen[-1].detach()
            for _ in range(cfg.d_steps_per_g):
                for disc, fake, opt in ((model.disc_rec, rec_d, opt_d1),
                                        (model.disc_gen, gen_d, opt_d2)):
                    disc.zero_grads()
                    with Tape() as d_tape:
                        s_real, _ = disc(batch.I_g)
                        s_fake, _ = disc(fake)
                        d_tape.backward(losses.loss_disc(s_real, s_fake))
                    opt.step()
                    disc.zero_grads()
            for mod in model.g_side().values():
                for name, t in mod.named_params().items():
                    if t.grad is not None:
                        raise TrainAbort(f"discriminator phase leaked gradient into {name!r}")

            # generator phase: all six terms, one joint step
            gt_scales = [Tensor(losses.downsample_image(batch.I_g.data, img.shape[2]))
                         for img in out.I_rec]
            mask_scales = [N.downsample_mask(batch.M.data, img.shape[2]) for img in out.I_rec]
            kl_r = losses.loss_kl_r(out.q_psi, out.prior)
            kl_g = losses.loss_kl_g(out.q_psi, out.p_phi)
            app_r = losses.loss_app_r(out.I_rec, gt_scales)
            app_g = losses.loss_app_g(out.I_gen, gt_scales, mask_scales)
            _, feat_rec = model.disc_rec(out.I_rec[-1])
            with dc.no_record():
                _, feat_real = model.disc_rec(batch.I_g)
            ad_r = losses.loss_ad_r(feat_rec, feat_real.detach())
            score_gen, _ = model.disc_gen(out.I_gen[-1])
            ad_g = losses.loss_ad_g(score_gen)
            total = losses.total_loss(kl_r, kl_g, app_r, app_g, ad_r, ad_g, w)
            g_tape.backward(total)
    opt_g.step()
    model.zero_grads()
    return losses.LossReport(
        step=-1,
        kl_r=kl_r.item(), kl_g=kl_g.item(),
        app_r=app_r.item(), app_g=app_g.item(),
        ad_r=ad_r.item(), ad_g=ad_g.item(),
        total=total.item(),
    )


# ---------------------------------------------------------------------------
# checkpoint state


_NET_FIELDS = ("image_size", "channels", "ch", "z_dim", "attention_size", "n_scale", "infer2_blocks")
_TRAIN_FIELDS = ("total_steps", "batch_size", "lr", "beta1", "beta2", "eps",
                 "d_steps_per_g", "seed", "sigma_min_sq", "checkpoint_every")
_WEIGHT_FIELDS = ("alpha_kl", "alpha_app", "alpha_ad", "kl_scale_mult")
_MASK_FIELDS = ("min_fraction", "max_fraction")


def config_entries(cfg: TrainConfig) -> dict:
    out = {}
    for f in _NET_FIELDS:
        out[f"config.net.{f}"] = np.asarray(float(getattr(cfg.net, f)))
    for f in _TRAIN_FIELDS:
        out[f"config.train.{f}"] = np.asarray(float(getattr(cfg, f)))
    for f in _WEIGHT_FIELDS:
        out[f"config.weights.{f}"] = np.asarray(float(getattr(cfg.weights, f)))
    out["config.mask.kind"] = np.asarray(float(data.MASK_KINDS.index(cfg.mask.kind)))
    for f in _MASK_FIELDS:
        out[f"config.mask.{f}"] = np.asarray(float(getattr(cfg.mask, f)))
    return out


def config_from_entries(entries) -> TrainConfig:
    net = N.NetConfig(**{f: int(_pull(entries, f"config.net.{f}")) for f in _NET_FIELDS})
    weights = losses.LossWeights(**{f: float(_pull(entries, f"config.weights.{f}")) for f in _WEIGHT_FIELDS})
    mask = data.MaskSpec(
        kind=data.MASK_KINDS[int(_pull(entries, "config.mask.kind"))],
        **{f: float(_pull(entries, f"config.mask.{f}")) for f in _MASK_FIELDS},
    )
    kw = {}
    for f in _TRAIN_FIELDS:
        v = float(_pull(entries, f"config.train.{f}"))
        kw[f] = int(v) if f in ("total_steps", "batch_size", "d_steps_per_g", "seed", "checkpoint_every") else v
    return TrainConfig(net=net, mask=mask, weights=weights, **kw)


def state_entries(model, opt_g, opt_d1, opt_d2, step, cfg) -> dict:
    out = {f"model.{k}": v.data for k, v in model.named_params().items()}
    out.update({f"model.{k}": v for k, v in model.named_buffers().items()})
    out.update(opt_g.state_entries("g"))
    out.update(opt_d1.state_entries("d1"))
    out.update(opt_d2.state_entries("d2"))
    out["trainer.step"] = np.asarray(float(step))
    out.update(config_entries(cfg))
    return out


def restore_state(model, opt_g, opt_d1, opt_d2, entries) -> int:
    """Load params, buffers, and optimizer moments in place; returns the
    step count already completed."""
    for name, t in model.named_params().items():
        t.data = _require_like(entries, f"model.{name}", t.data).copy()
    for name, (owner, attr) in model.buffer_owners().items():
        ref = getattr(owner, attr)
        setattr(owner, attr, _require_like(entries, f"model.{name}", ref).copy())
    opt_g.restore("g", entries)
    opt_d1.restore("d1", entries)
    opt_d2.restore("d2", entries)
    return int(_pull(entries, "trainer.step"))


def save_checkpoint(path, model, opt_g, opt_d1, opt_d2, step, cfg):
    ckpt.save_arrays(path, state_entries(model, opt_g, opt_d1, opt_d2, step, cfg))


# ---------------------------------------------------------------------------
# the loop


def make_batch_for_step(cfg: TrainConfig, dataset, step) -> data.Batch:
    """Deterministic batch for a given step: sampling with replacement, one
    fresh mask per instance."""
    base = Rng(cfg.seed)
    size = cfg.net.image_size
    idx = base.fork(DOM_BATCH, step).integers(0, len(dataset), cfg.batch_size)
    samples = []
    for i, j in enumerate(idx):
        mask = data.make_mask(cfg.mask, size, size, base.fork(DOM_MASK, step, i))
        samples.append(data.make_sample(dataset[int(j)], mask))
    return data.batch_samples(samples)


def train(cfg: TrainConfig, dataset, out_dir=None, resume=None, log_every=0):
    """Run the full loop; returns (model, reports, optimizers).

    With ``out_dir`` set, appends one CSV row per step to losses.csv, saves
    a checkpoint and a probe sample grid every checkpoint_every steps, and
    always saves ckpt_final.picn. ``resume`` restores a checkpoint and
    continues; the continuation is bit-identical to an uninterrupted run.
    """
    if not dataset:
        raise ValueError("empty dataset")
    size = cfg.net.image_size
    for im in dataset:
        if im.shape != (cfg.net.channels, size, size):
            raise ValueError(f"dataset image shape {im.shape} does not match config {cfg.net.channels}x{size}x{size}")

    model = N.ModelBundle(Rng(cfg.seed).fork(DOM_INIT), cfg.net)
    opt_g, opt_d1, opt_d2 = build_optimizers(model, cfg)
    start = 0
    if resume is not None:
        start = restore_state(model, opt_g, opt_d1, opt_d2, ckpt.load_arrays(resume))

    csv_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "losses.csv")
        if start == 0 or not os.path.exists(csv_path):
            with open(csv_path, "w") as f:
                f.write(losses.CSV_HEADER + "\n")

    reports = []
    for step in range(start, cfg.total_steps):
        batch = make_batch_for_step(cfg, dataset, step)
        report = train_step(model, batch, opt_g, opt_d1, opt_d2, cfg,
                            Rng(cfg.seed).fork(DOM_STEP, step))
        report.step = step
        if not report.finite():
            raise TrainAbort(f"non-finite loss at step {step}: {report.csv_row()}")
        reports.append(report)
        if csv_path is not None:
            with open(csv_path, "a") as f:
                f.write(report.csv_row() + "\n")
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{cfg.total_steps} total {report.total:.4f} "
                  f"app_g {report.app_g:.4f} kl_g {report.kl_g:.4f}", flush=True)
        done = step + 1
        if out_dir is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
            save_checkpoint(os.path.join(out_dir, f"ckpt_{done:06d}.picn"),
                            model, opt_g, opt_d1, opt_d2, done, cfg)
            _write_probe_grid(os.path.join(out_dir, f"samples_{done:06d}.pgm"),
                              model, cfg, dataset)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "ckpt_final.picn"),
                        model, opt_g, opt_d1, opt_d2, cfg.total_steps, cfg)
    return model, reports, (opt_g, opt_d1, opt_d2)


def _write_probe_grid(path, model, cfg, dataset, k=6):
    size = cfg.net.image_size
    rng = Rng(cfg.seed).fork(DOM_PROBE)
    mask = data.make_mask(cfg.mask, size, size, rng.fork(0))
    sample = data.make_sample(dataset[0], mask)
    comps, _, _ = sample_completions(model, sample, k, rng.fork(1), cfg.sigma_min_sq)
    tiles = [sample.I_m, sample.I_g] + comps
    data.write_grid(path, tiles, columns=4)


def sample_completions(model: N.ModelBundle, sample: data.Sample, count, rng: Rng,
                       sigma_min_sq=0.25):
    """Draw ``count`` completions from the conditional prior p_phi.

    Returns (composites, raw_gens, d2_scores): composites paste the
    generated hole into the visible input (exact on visible pixels), raw
    generations are the full decoder outputs, and scores are D2's judgment
    of each raw generation.
    """
    del sigma_min_sq  # test-time sampling uses p_phi, not the fixed prior
    I_m = Tensor(sample.I_m[None])
    M = Tensor(sample.M[None])
    f_m, skip = model.encoder(I_m)
    p_phi = model.infer2(f_m)
    comps, gens, scores = [], [], []
    hole = 1.0 - sample.M
    for i in range(count):
        z, _ = p_phi.sample(rng.fork(i))
        gen = model.generator(z, f_m, skip, M)[-1].data[0]
        comps.append(sample.I_m + hole * gen)
        gens.append(gen)
        scores.append(float(model.disc_gen(Tensor(gen[None]))[0].item()))
    return comps, gens, scores
