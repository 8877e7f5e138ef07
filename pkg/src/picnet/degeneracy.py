"""Prior-collapse degeneracy study on a toy completion task.

Four training variants share one encoder/decoder capacity and budget:

  cvae             -- classic conditional VAE bound: reconstruct from
                      z ~ q_psi(z|I_c) with KL(q_psi || p_phi) against the
                      learned conditional prior. With one ground-truth
                      completion per condition, nothing stops p_phi from
                      narrowing onto that instance's code (delta collapse).
  fixed_prior_cvae -- same bound but the prior is a frozen standard normal;
                      the decoder learns to ignore z instead.
  instance_blind   -- generative path only (visible-region l1 + LSGAN);
                      no per-instance grounding, stability not guaranteed.
  dual_path        -- the full dual-pipeline framework.

The toy task is deliberately single-instance-per-label: each unique visible
region appears exactly once, yet the stripe family admits several distinct
phase-shifted hole fillings, so diversity is meaningful. The study logs the
conditional prior's mean sigma every step and measures masked-region sample
diversity on held-out conditions.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import data
from . import diffcore as dc
from . import dists
from . import layers as L
from . import losses
from . import metrics
from . import networks as N
from . import training as T
from .diffcore import Rng, Tape, Tensor

VARIANTS = ("cvae", "fixed_prior_cvae", "instance_blind", "dual_path")

CSV_HEADER = "variant,seed,mean_prior_sigma,diversity_masked,diversity_full,stable"

# rng fork domains beyond the ones training defines
DOM_DATA = 5
DOM_EVAL = 6


def default_net() -> N.NetConfig:
    return N.NetConfig(image_size=16, channels=1, ch=8, z_dim=32,
                       attention_size=8, n_scale=2)


def toy_task(count, rng: Rng, size=16) -> list:
    """Stripe images with one fixed center mask: a dataset of
    (condition, completion) pairs where every visible region is unique.

    The sinusoidal stripe family itself admits ``period`` distinct
    integer-pixel phase shifts per orientation, each a valid filling of the
    hole, so the task is pluralistic even though each condition carries
    exactly one ground truth.
    """
    mask = data.make_mask(data.MaskSpec(kind="center"), size, size, rng.fork(0))
    samples, seen, draw = [], set(), 0
    while len(samples) < count:
        img = data.gen_dataset("stripes", 1, size, rng.fork(1, draw))[0]
        draw += 1
        s = data.make_sample(img, mask)
        key = s.I_m.tobytes()
        if key in seen:  # unique-condition guarantee (collisions are freak events)
            continue
        seen.add(key)
        samples.append(s)
    return samples


@dataclass
class VariantResult:
    variant: str
    seed: int
    mean_prior_sigma: float
    diversity_masked: float
    diversity_full: float
    stable: bool
    sigma_trace: list = field(default_factory=list, repr=False)

    @property
    def sigma_init(self):
        return self.sigma_trace[0] if self.sigma_trace else float("nan")

    def csv_row(self) -> str:
        return "%s,%d,%.10g,%.10g,%.10g,%d" % (
            self.variant, self.seed, self.mean_prior_sigma,
            self.diversity_masked, self.diversity_full, int(self.stable))


def moving_average(trace, window):
    """Trailing moving average; shorter prefixes average what exists."""
    x = np.asarray(trace, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    csum = np.cumsum(np.concatenate([[0.0], x]))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def sigma_tail_nonincreasing(trace, window=100, tail_fraction=0.5, tol=1e-3):
    """True when the smoothed sigma trace never rises by more than ``tol``
    across the last ``tail_fraction`` of training."""
    sm = moving_average(trace, window)
    tail = sm[int(len(sm) * (1.0 - tail_fraction)):]
    return bool(np.all(np.diff(tail) <= tol))


def _partial_images(batch):
    vis = batch.I_g.data * batch.M.data
    hid = batch.I_g.data * (1.0 - batch.M.data)
    return Tensor(vis), Tensor(hid)


def _scale_targets(batch, out_scales):
    gt = [Tensor(losses.downsample_image(batch.I_g.data, s.shape[2])) for s in out_scales]
    masks = [N.downsample_mask(batch.M.data, s.shape[2]) for s in out_scales]
    return gt, masks


def _cvae_step(model, batch, opt, rng, fixed_prior, recon_weight, kl_weight):
    model.zero_grads()
    with L.sn_updates(), Tape() as tape:
        I_m, I_c = _partial_images(batch)
        f_m, skip = model.encoder(I_m)
        f_c, _ = model.encoder(I_c)
        q = model.infer1(f_c)
        if fixed_prior:
            prior = dists.standard_prior(q.batch, q.dim)
            kl = losses.loss_kl_r(q, prior)
        else:
            kl = losses.loss_kl_g(q, model.infer2(f_m))
        z, _ = q.sample(rng.fork(0))
        out_scales = model.generator(z, f_m, skip, batch.M)
        gt, _ = _scale_targets(batch, out_scales)
        app = losses.loss_app_r(out_scales, gt)
        total = dc.scale(kl, kl_weight) + dc.scale(app, recon_weight)
        tape.backward(total)
    opt.step()
    model.zero_grads()
    return total.item()


def _instance_blind_step(model, batch, opt_g, opt_d, w, rng):
    model.zero_grads()
    with L.sn_updates(), Tape() as tape:
        I_m, _ = _partial_images(batch)
        f_m, skip = model.encoder(I_m)
        p_phi = model.infer2(f_m)
        z, _ = p_phi.sample(rng.fork(0))
        out_scales = model.generator(z, f_m, skip, batch.M)

        fake = out_scales[-1].detach()
        model.disc_gen.zero_grads()
        with Tape() as d_tape:
            s_real, _ = model.disc_gen(batch.I_g)
            s_fake, _ = model.disc_gen(fake)
            d_tape.backward(losses.loss_disc(s_real, s_fake))
        opt_d.step()
        model.disc_gen.zero_grads()

        gt, masks = _scale_targets(batch, out_scales)
        app_g = losses.loss_app_g(out_scales, gt, masks)
        score, _ = model.disc_gen(out_scales[-1])
        ad_g = losses.loss_ad_g(score)
        total = dc.scale(app_g, w.alpha_app) + dc.scale(ad_g, w.alpha_ad)
        tape.backward(total)
    opt_g.step()
    model.zero_grads()
    return total.item()


def _adam_over(modules: dict, lr) -> T.Adam:
    params = {}
    for tag, mod in modules.items():
        for name, t in mod.named_params().items():
            params[f"{tag}.{name}"] = t
    return T.Adam(params, lr=lr)


def _probe_sigma(model, probe_images: np.ndarray) -> float:
    """Mean conditional-prior sigma over a fixed set of visible regions."""
    with dc.no_record():
        f_m, _ = model.encoder(Tensor(probe_images))
        p_phi = model.infer2(f_m)
    return float(np.exp(0.5 * p_phi.logvar.data).mean())


def _draw_completion(model, sample, z, mask_t):
    with dc.no_record():
        f_m, skip = model.encoder(Tensor(sample.I_m[None]))
        gen = model.generator(z, f_m, skip, mask_t)[-1].data[0]
    return sample.I_m + (1.0 - sample.M) * gen


def _eval_diversity(kind, model, held, n_samples, rng, z_dim):
    """Mean over held-out conditions of pairwise-l1 diversity among
    composited completions drawn from the variant's test-time latent source."""
    fulls, maskeds = [], []
    for ci, sample in enumerate(held):
        mask_t = Tensor(sample.M[None])
        with dc.no_record():
            f_m, skip = model.encoder(Tensor(sample.I_m[None]))
            p_phi = model.infer2(f_m)
        comps = []
        for k in range(n_samples):
            if kind == "fixed_prior_cvae":
                z, _ = dists.standard_prior(1, z_dim).sample(rng.fork(ci, k))
            else:
                z, _ = p_phi.sample(rng.fork(ci, k))
            with dc.no_record():
                gen = model.generator(Tensor(z.data), f_m, skip, mask_t)[-1].data[0]
            comps.append(sample.I_m + (1.0 - sample.M) * gen)
        full, masked = metrics.diversity(comps, sample.M)
        fulls.append(full)
        maskeds.append(masked)
    return float(np.mean(fulls)), float(np.mean(maskeds))


def run_variant(kind, budget, seed, *, net=None, train_count=48, held_count=8,
                samples_per_condition=20, batch_size=16, lr=1e-4,
                bound_kl=None) -> VariantResult:
    """Train one variant on the toy task and measure collapse/diversity.

    The two VAE-bound variants use the likelihood-sum form of the bound:
    reconstruction error summed over pixels against an unweighted KL term
    (expressed here as mean reconstruction at the usual appearance weight
    with the KL scaled down by ``alpha_app / n_pixels``). ``bound_kl``
    overrides that KL weight for ablations.
    """
    if kind not in VARIANTS:
        raise ValueError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    net = net or default_net()
    w = losses.LossWeights(kl_scale_mult=float(net.n_scale))
    n_pix = net.image_size * net.image_size * net.channels
    if bound_kl is None:
        bound_kl = w.alpha_app / float(n_pix)
    base = Rng(seed)
    task = toy_task(train_count, base.fork(DOM_DATA, 0), size=net.image_size)
    held = toy_task(held_count, base.fork(DOM_DATA, 1), size=net.image_size)
    probe_images = np.stack([s.I_m for s in held])

    model = N.ModelBundle(base.fork(T.DOM_INIT), net)
    cfg = T.TrainConfig(net=net, mask=data.MaskSpec(kind="center"),
                        total_steps=budget, batch_size=batch_size, lr=lr, seed=seed)
    if kind == "dual_path":
        opt_g, opt_d1, opt_d2 = T.build_optimizers(model, cfg)
    elif kind == "instance_blind":
        opt_g = _adam_over({"encoder": model.encoder, "infer2": model.infer2,
                            "generator": model.generator}, lr)
        opt_d2 = _adam_over({"disc_gen": model.disc_gen}, lr)
    elif kind == "cvae":
        opt_g = _adam_over({"encoder": model.encoder, "infer1": model.infer1,
                            "infer2": model.infer2, "generator": model.generator}, lr)
    else:  # fixed_prior_cvae
        opt_g = _adam_over({"encoder": model.encoder, "infer1": model.infer1,
                            "generator": model.generator}, lr)

    fixed = kind == "fixed_prior_cvae"
    sigma_trace = [1.0 if fixed else _probe_sigma(model, probe_images)]
    stable = True
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for step in range(budget):
            idx = base.fork(T.DOM_BATCH, step).integers(0, train_count, batch_size)
            batch = data.batch_samples([task[int(j)] for j in idx])
            rng = base.fork(T.DOM_STEP, step)
            try:
                if kind == "dual_path":
                    report = T.train_step(model, batch, opt_g, opt_d1, opt_d2, cfg, rng)
                    total = report.total
                elif kind == "instance_blind":
                    total = _instance_blind_step(model, batch, opt_g, opt_d2, w, rng)
                else:
                    total = _cvae_step(model, batch, opt_g, rng, fixed,
                                       w.alpha_app, bound_kl)
            except T.TrainAbort:
                stable = False
                break
            if not np.isfinite(total):
                stable = False
                break
            sigma_trace.append(1.0 if fixed else _probe_sigma(model, probe_images))

        full, masked = _eval_diversity(kind, model, held, samples_per_condition,
                                       base.fork(DOM_EVAL), net.z_dim)
    return VariantResult(
        variant=kind, seed=seed,
        mean_prior_sigma=1.0 if fixed else sigma_trace[-1],
        diversity_masked=masked, diversity_full=full,
        stable=stable, sigma_trace=sigma_trace,
    )


# ---------------------------------------------------------------------------
# the full study


@dataclass
class DegeneracyReport:
    results: list
    csv_text: str
    markdown: str
    ordering_by_seed: dict
    ordering_pass: bool

    def by(self, variant, seed) -> VariantResult:
        for r in self.results:
            if r.variant == variant and r.seed == seed:
                return r
        raise KeyError((variant, seed))


def _ordering(results, seeds):
    """Per-seed verdict: dual_path beats cvae AND fixed_prior_cvae on
    masked diversity."""
    lookup = {(r.variant, r.seed): r for r in results}
    verdicts = {}
    for s in seeds:
        dual = lookup[("dual_path", s)].diversity_masked
        cvae = lookup[("cvae", s)].diversity_masked
        fixed = lookup[("fixed_prior_cvae", s)].diversity_masked
        verdicts[s] = bool(np.isfinite(dual) and dual > cvae and dual > fixed)
    need = max(1, (len(seeds) + 1) // 2)  # majority: 2 of 3
    return verdicts, sum(verdicts.values()) >= need


def _markdown(results, seeds, verdicts, ordering_pass):
    lines = ["# Prior-collapse degeneracy study", ""]
    lines.append("| variant | seed | mean prior sigma | diversity (masked) | diversity (full) | stable |")
    lines.append("|---|---|---|---|---|---|")
    for r in results:
        lines.append("| %s | %d | %.4g | %.4g | %.4g | %s |" % (
            r.variant, r.seed, r.mean_prior_sigma, r.diversity_masked,
            r.diversity_full, "yes" if r.stable else "NO"))
    lines.append("")
    lines.append("## Aggregates (mean over seeds)")
    lines.append("")
    lines.append("| variant | mean prior sigma | diversity (masked) |")
    lines.append("|---|---|---|")
    for v in VARIANTS:
        rs = [r for r in results if r.variant == v]
        lines.append("| %s | %.4g | %.4g |" % (
            v, np.mean([r.mean_prior_sigma for r in rs]),
            np.mean([r.diversity_masked for r in rs])))
    lines.append("")
    lines.append("## Verdicts")
    lines.append("")
    ok = sum(verdicts.values())
    lines.append("- masked-diversity ordering dual_path > cvae and dual_path > "
                 "fixed_prior_cvae: %d/%d seeds -> %s"
                 % (ok, len(seeds), "PASS" if ordering_pass else "FAIL"))
    lookup = {(r.variant, r.seed): r for r in results}
    ratios = []
    for s in seeds:
        r = lookup[("cvae", s)]
        ratios.append(r.mean_prior_sigma / r.sigma_init if r.sigma_init else float("nan"))
    collapse = all(np.isfinite(x) and x <= 0.5 for x in ratios)
    lines.append("- cvae prior-sigma contraction >= 50%% from init: ratios %s -> %s"
                 % (", ".join("%.3f" % x for x in ratios),
                    "PASS" if collapse else "FAIL"))
    quarter = []
    for s in seeds:
        dual = lookup[("dual_path", s)].diversity_masked
        fixed = lookup[("fixed_prior_cvae", s)].diversity_masked
        quarter.append(bool(np.isfinite(dual) and fixed < 0.25 * dual))
    lines.append("- fixed_prior_cvae masked diversity < 25%% of dual_path "
                 "(informational): %d/%d seeds" % (sum(quarter), len(seeds)))
    mono = [sigma_tail_nonincreasing(lookup[("cvae", s)].sigma_trace) for s in seeds]
    lines.append("- cvae sigma trace non-increasing over last half "
                 "(window 100): %d/%d seeds" % (sum(mono), len(seeds)))
    lines.append("")
    return "\n".join(lines)


def run_all(budget, seeds, out_dir=None, **variant_kw) -> DegeneracyReport:
    """Run all four variants over all seeds; write CSV, sigma traces, and a
    markdown summary when out_dir is given. Reruns are bit-identical."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    results = []
    for kind in VARIANTS:
        for seed in seeds:
            results.append(run_variant(kind, budget, seed, **variant_kw))
    csv_lines = [CSV_HEADER] + [r.csv_row() for r in results]
    csv_text = "\n".join(csv_lines) + "\n"
    verdicts, ordering_pass = _ordering(results, seeds)
    md = _markdown(results, seeds, verdicts, ordering_pass)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "degeneracy.csv"), "w") as f:
            f.write(csv_text)
        with open(os.path.join(out_dir, "degeneracy.md"), "w") as f:
            f.write(md)
        with open(os.path.join(out_dir, "sigma_traces.csv"), "w") as f:
            f.write("variant,seed,step,sigma\n")
            for r in results:
                for i, v in enumerate(r.sigma_trace):
                    f.write("%s,%d,%d,%.10g\n" % (r.variant, r.seed, i, v))
    return DegeneracyReport(results=results, csv_text=csv_text, markdown=md,
                            ordering_by_seed=verdicts, ordering_pass=ordering_pass)
