"""Command-line surface: train / complete / eval / degeneracy.

Configuration is a JSON document mirroring the training dataclasses plus a
``dataset`` section for the synthetic data generator. Unknown keys are
rejected with their full field path, and every command prints its fully
resolved configuration before doing work so runs can be reproduced exactly.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import degeneracy
from . import diffcore as dc
from . import losses
from . import metrics
from . import networks as N
from . import training as T
from .diffcore import Rng, Tensor

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# rng fork domains for the inference commands (5/6 belong to degeneracy)
DOM_COMPLETE = 7
DOM_EVAL = 8

DEFAULT_SAMPLES = 50
DEFAULT_TOPK = 10


class ConfigError(Exception):
    pass


class IOFail(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema


_INT, _NUM, _STR = "int", "num", "str"

_SCHEMA = {
    "net": {
        "image_size": _INT, "channels": _INT, "ch": _INT, "z_dim": _INT,
        "attention_size": _INT, "n_scale": _INT, "infer2_blocks": _INT,
    },
    "mask": {"kind": _STR, "min_fraction": _NUM, "max_fraction": _NUM},
    "weights": {"alpha_kl": _NUM, "alpha_app": _NUM, "alpha_ad": _NUM,
                "kl_scale_mult": _NUM},
    "train": {
        "total_steps": _INT, "batch_size": _INT, "lr": _NUM, "beta1": _NUM,
        "beta2": _NUM, "eps": _NUM, "d_steps_per_g": _INT, "seed": _INT,
        "sigma_min_sq": _NUM, "checkpoint_every": _INT,
    },
    "dataset": {"kind": _STR, "count": _INT, "seed": _INT},
}

_DATASET_DEFAULTS = {"kind": "stripes", "count": 500, "seed": 7}


def _check_field(path, value, kind):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    elif kind == _NUM:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
    elif kind == _STR and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def validate_config(doc) -> dict:
    """Schema-check a raw JSON document; returns {section: {field: value}}."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root: expected an object, got {type(doc).__name__}")
    out = {}
    for section, fields in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"{section}: unknown section (expected one of "
                              f"{', '.join(sorted(_SCHEMA))})")
        if not isinstance(fields, dict):
            raise ConfigError(f"{section}: expected an object, got {type(fields).__name__}")
        out[section] = {}
        for name, value in fields.items():
            if name not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{name}: unknown field")
            out[section][name] = _check_field(f"{section}.{name}", value,
                                              _SCHEMA[section][name])
    return out


def build_config(doc, seed_override=None):
    """Turn a validated document into (TrainConfig, dataset spec dict)."""
    sections = validate_config(doc)
    try:
        net = N.NetConfig(**sections.get("net", {}))
        mask = data.MaskSpec(**sections.get("mask", {}))
        weights = (losses.LossWeights(**sections["weights"])
                   if "weights" in sections else None)
        train_kw = dict(sections.get("train", {}))
        if seed_override is not None:
            train_kw["seed"] = seed_override
        cfg = T.TrainConfig(net=net, mask=mask, weights=weights, **train_kw)
    except ValueError as e:
        raise ConfigError(str(e))
    dataset = dict(_DATASET_DEFAULTS)
    dataset.update(sections.get("dataset", {}))
    if dataset["kind"] not in data.DATASET_KINDS:
        raise ConfigError(f"dataset.kind: unknown kind {dataset['kind']!r} "
                          f"(expected one of {', '.join(data.DATASET_KINDS)})")
    if dataset["count"] < 1:
        raise ConfigError(f"dataset.count: must be >= 1, got {dataset['count']}")
    return cfg, dataset


def resolved_config_dict(cfg: T.TrainConfig, dataset=None) -> dict:
    out = {
        "net": {f: getattr(cfg.net, f) for f in _SCHEMA["net"]},
        "mask": {f: getattr(cfg.mask, f) for f in _SCHEMA["mask"]},
        "weights": {f: getattr(cfg.weights, f) for f in _SCHEMA["weights"]},
        "train": {f: getattr(cfg, f) for f in _SCHEMA["train"]},
    }
    if dataset is not None:
        out["dataset"] = dict(dataset)
    return out


def _print_config(cfg, dataset=None, header="resolved configuration:"):
    print(header)
    print(json.dumps(resolved_config_dict(cfg, dataset), indent=2, sort_keys=True))
    sys.stdout.flush()


def _n_threads():
    raw = os.environ.get("PICNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PICNET_THREADS: expected an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"PICNET_THREADS: must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# shared loading


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")


def _load_session(path):
    """Rebuild (model, cfg) from a checkpoint file."""
    try:
        entries = ckpt.load_arrays(path)
    except OSError as e:
        raise IOFail(f"cannot read checkpoint {path}: {e}")
    except ckpt.CheckpointError as e:
        raise IOFail(f"unreadable checkpoint: {e}")
    try:
        cfg = T.config_from_entries(entries)
        model = N.ModelBundle(Rng(cfg.seed).fork(T.DOM_INIT), cfg.net)
        opts = T.build_optimizers(model, cfg)
        T.restore_state(model, *opts, entries)
    except (ckpt.CheckpointError, ValueError) as e:
        raise IOFail(f"unreadable checkpoint: {e}")
    return model, cfg


def _read_image_file(path):
    try:
        return data.read_image(path)
    except OSError as e:
        raise IOFail(f"cannot read image {path}: {e}")
    except ValueError as e:
        raise IOFail(f"unreadable image {path}: {e}")


def _resolve_mask(spec, size, img_channels_ignored):
    if spec == "center":
        return data.make_mask(data.MaskSpec(kind="center"), size, size, Rng(0))
    arr = _read_image_file(spec)
    if arr.shape != (1, size, size):
        raise ConfigError(f"mask shape {arr.shape} does not match image size "
                          f"(1, {size}, {size})")
    return (arr > 0.0).astype(np.float32)


def _draw_samples(model, sample, count, rng, threads):
    """Deterministic parallel sampling: completion i depends only on
    rng.fork(i), never on scheduling order."""
    with dc.no_record():
        f_m, skip = model.encoder(Tensor(sample.I_m[None]))
        p_phi = model.infer2(f_m)
    mask_t = Tensor(sample.M[None])
    hole = 1.0 - sample.M

    def one(i):
        z, _ = p_phi.sample(rng.fork(i))
        gen = model.generator(Tensor(z.data), f_m, skip, mask_t)[-1].data[0]
        comp = sample.I_m + hole * gen
        score = float(model.disc_gen(Tensor(gen[None]))[0].item())
        return comp, score

    if threads == 1:
        results = [one(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(count)))
    comps = [r[0] for r in results]
    scores = [r[1] for r in results]
    return comps, scores


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg, dataset_spec = build_config(_load_json(args.config), seed_override=args.seed)
    _print_config(cfg, dataset_spec)
    images = data.gen_dataset(dataset_spec["kind"], dataset_spec["count"],
                              cfg.net.image_size, Rng(dataset_spec["seed"]))
    try:
        T.train(cfg, images, out_dir=args.out, resume=args.resume,
                log_every=args.log_every)
    except ckpt.CheckpointError as e:
        raise IOFail(f"resume failed: {e}")
    except OSError as e:
        raise IOFail(str(e))
    print(f"training complete; artifacts in {args.out}")
    return 0


def cmd_complete(args) -> int:
    if args.topk > args.samples:
        raise ConfigError(f"--topk {args.topk} exceeds --samples {args.samples}")
    if args.samples < 1:
        raise ConfigError(f"--samples must be >= 1, got {args.samples}")
    threads = _n_threads()
    model, cfg = _load_session(args.ckpt)
    _print_config(cfg, header="checkpoint configuration:")
    size, channels = cfg.net.image_size, cfg.net.channels
    img = _read_image_file(args.image)
    if img.shape != (channels, size, size):
        raise ConfigError(f"image shape {img.shape} does not match checkpoint "
                          f"config ({channels}, {size}, {size})")
    mask = _resolve_mask(args.mask, size, channels)
    sample = data.make_sample(img, mask)

    comps, scores = _draw_samples(model, sample, args.samples,
                                  Rng(cfg.seed).fork(DOM_COMPLETE), threads)
    top = metrics.rank_scores(scores, args.topk)

    try:
        os.makedirs(args.out, exist_ok=True)
        ext = "pgm" if channels == 1 else "ppm"
        for rank, idx in enumerate(top):
            data.write_image(os.path.join(args.out, f"top_{rank:02d}.{ext}"),
                             comps[idx])
        data.write_grid(os.path.join(args.out, f"grid.{ext}"),
                        [sample.I_m] + [comps[i] for i in top], columns=4)
        with open(os.path.join(args.out, "scores.csv"), "w") as f:
            f.write("rank,sample,score\n")
            for rank, idx in enumerate(top):
                f.write("%d,%d,%.10g\n" % (rank, idx, scores[idx]))
    except OSError as e:
        raise IOFail(str(e))
    print(f"wrote {len(top)} completions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_session(args.ckpt)
    _print_config(cfg, header="checkpoint configuration:")
    size, channels = cfg.net.image_size, cfg.net.channels
    try:
        names, images = data.load_manifest(args.dataset)
    except OSError as e:
        raise IOFail(f"cannot read manifest {args.dataset}: {e}")
    except ValueError as e:
        # an empty manifest is a configuration problem, not an I/O failure
        if "empty manifest" in str(e):
            raise ConfigError(str(e))
        raise IOFail(f"bad manifest {args.dataset}: {e}")
    for name, img in zip(names, images):
        if img.shape != (channels, size, size):
            raise ConfigError(f"{name}: shape {img.shape} does not match "
                              f"checkpoint config ({channels}, {size}, {size})")

    threads = _n_threads()
    base = Rng(cfg.seed).fork(DOM_EVAL)
    rows = []
    for i, (name, img) in enumerate(zip(names, images)):
        mask = data.make_mask(data.MaskSpec(kind="center"), size, size, base.fork(i, 0))
        sample = data.make_sample(img, mask)
        comps, scores = _draw_samples(model, sample, DEFAULT_SAMPLES,
                                      base.fork(i, 1), threads)
        top = metrics.rank_scores(scores, min(DEFAULT_TOPK, len(comps)))
        # best balance: the top-ranked sample closest to the ground truth
        best = min(top, key=lambda j: metrics.l1(comps[j], img))
        full, masked = metrics.diversity(comps, sample.M)
        rows.append((name, metrics.MetricsReport(
            l1=metrics.l1(comps[best], img),
            psnr=metrics.psnr(comps[best], img),
            tv=metrics.tv(comps[best]),
            diversity_full=full, diversity_masked=masked,
        )))
    agg = metrics.MetricsReport(
        l1=float(np.mean([r.l1 for _, r in rows])),
        psnr=float(np.mean([r.psnr for _, r in rows])),
        tv=float(np.mean([r.tv for _, r in rows])),
        diversity_full=float(np.mean([r.diversity_full for _, r in rows])),
        diversity_masked=float(np.mean([r.diversity_masked for _, r in rows])),
    )
    rows.append(("aggregate", agg))
    try:
        with open(args.out, "w") as f:
            f.write(metrics.CSV_HEADER + "\n")
            for name, rep in rows:
                f.write(rep.csv_row(name) + "\n")
    except OSError as e:
        raise IOFail(str(e))
    print(metrics.format_table(rows))
    return 0


def cmd_degeneracy(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {args.seeds!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise ConfigError(f"--seeds: expected non-negative integers, got {args.seeds!r}")
    if args.budget < 1:
        raise ConfigError(f"--budget must be >= 1, got {args.budget}")
    print(f"degeneracy study: budget {args.budget}, seeds {seeds}, out {args.out}")
    sys.stdout.flush()
    try:
        report = degeneracy.run_all(args.budget, seeds, out_dir=args.out)
    except OSError as e:
        raise IOFail(str(e))
    print(report.markdown)
    # the report states pass/fail; assertions belong to the test suite
    return 0


# ---------------------------------------------------------------------------
# entry


def _parser():
    p = argparse.ArgumentParser(prog="picnet",
                                description="pluralistic image completion on synthetic images")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("complete", help="sample completions for one image")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--mask", default="center",
                   help="'center' or a PGM mask (white=visible)")
    c.add_argument("--samples", type=int, default=DEFAULT_SAMPLES)
    c.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_complete)

    e = sub.add_parser("eval", help="metrics over a dataset manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("degeneracy", help="run the prior-collapse study")
    d.add_argument("--budget", type=int, required=True)
    d.add_argument("--seeds", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_degeneracy)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IOFail as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except T.TrainAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
