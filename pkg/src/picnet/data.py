"""Synthetic datasets, hole masks, and dependency-free image I/O.

Images are [C,H,W] float arrays in [-1,1]. Masks are [1,H,W] with 1 marking
visible pixels and 0 the hole. Files use binary PGM (P5) for single-channel
and PPM (P6) for RGB, maxval 255, which keeps every byte diffable in tests.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .diffcore import Rng, Tensor

DATASET_KINDS = ("stripes", "blobs", "gradients")
MASK_KINDS = ("center", "random_rect", "irregular_walk")
VALID_SIZES = (16, 32, 64)


# ---------------------------------------------------------------------------
# datasets


def stripe_image(size, theta, period, phase):
    """Sinusoidal stripes at angle theta with the given period (pixels)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = xx * np.cos(theta) + yy * np.sin(theta)
    img = np.sin(2.0 * np.pi * t / period + phase)
    return img[None].astype(np.float32)


def blob_image(size, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    return (2.0 * np.exp(-d) - 1.0)[None].astype(np.float32)


def gradient_image(size, theta, bias):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = xx * np.cos(theta) + yy * np.sin(theta)
    lo, hi = t.min(), t.max()
    img = 2.0 * (t - lo) / max(hi - lo, 1e-9) - 1.0
    return np.clip(img + bias, -1.0, 1.0)[None].astype(np.float32)


def gen_dataset(kind, count, size, rng: Rng):
    """Procedurally generate ``count`` images of one family.

    Each family has global structure a small model can learn, and each
    admits multiple plausible hole completions (stripe phase, blob extent,
    gradient level), which is the property the artifact exercises.
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if size not in VALID_SIZES:
        raise ValueError(f"size must be one of {VALID_SIZES}, got {size}")
    imgs = []
    for i in range(count):
        r = rng.fork(i)
        if kind == "stripes":
            theta = r.uniform(0.0, np.pi)
            period = float(r.integers(4, 9))
            phase = r.uniform(0.0, 2.0 * np.pi)
            imgs.append(stripe_image(size, theta, period, phase))
        elif kind == "blobs":
            cx = r.uniform(0.25 * size, 0.75 * size)
            cy = r.uniform(0.25 * size, 0.75 * size)
            rx = r.uniform(0.15 * size, 0.4 * size)
            ry = r.uniform(0.15 * size, 0.4 * size)
            imgs.append(blob_image(size, cx, cy, rx, ry))
        else:
            theta = r.uniform(0.0, 2.0 * np.pi)
            bias = r.uniform(-0.2, 0.2)
            imgs.append(gradient_image(size, theta, bias))
    return imgs


# ---------------------------------------------------------------------------
# masks


@dataclass
class MaskSpec:
    kind: str = "center"
    min_fraction: float = 0.1
    max_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not 0.0 < self.min_fraction <= self.max_fraction < 1.0:
            raise ValueError("mask fractions must satisfy 0 < min <= max < 1")


def make_mask(spec: MaskSpec, H, W, rng: Rng) -> np.ndarray:
    """Binary [1,H,W] mask per spec; 0 marks the hole."""
    m = np.ones((1, H, W), dtype=np.float32)
    if spec.kind == "center":
        h, w = H // 2, W // 2
        top, left = (H - h) // 2, (W - w) // 2
        m[0, top : top + h, left : left + w] = 0.0
    elif spec.kind == "random_rect":
        h, w = _rect_extents(spec, H, W, rng)
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        m[0, top : top + h, left : left + w] = 0.0
    else:
        m[0] = _walk_mask(spec, H, W, rng)
    return m


def _rect_extents(spec, H, W, rng):
    total = H * W
    for _ in range(100):
        h = int(rng.integers(1, H + 1))
        w = int(rng.integers(1, W + 1))
        if spec.min_fraction <= h * w / total <= spec.max_fraction:
            return h, w
    return H // 2, W // 2  # 0.25, always inside [0.1, 0.5]


def _walk_mask(spec, H, W, rng):
    """Union of random-walk brush strokes; stops at a target area fraction
    drawn strictly inside [min, max] so one extra stamp cannot overshoot."""
    hole = np.zeros((H, W), dtype=bool)
    radius = max(1, H // 12)
    margin = 3.2 * radius * radius / (H * W)  # stamp-size overshoot guard
    target = rng.uniform(spec.min_fraction + 0.02, spec.max_fraction - margin)
    total = H * W
    y, x = int(rng.integers(0, H)), int(rng.integers(0, W))
    yy, xx = np.mgrid[0:H, 0:W]
    steps = 0
    while hole.sum() / total < target and steps < 20 * total:
        hole |= (yy - y) ** 2 + (xx - x) ** 2 <= radius * radius
        y = min(max(y + int(rng.integers(-2, 3)), 0), H - 1)
        x = min(max(x + int(rng.integers(-2, 3)), 0), W - 1)
        steps += 1
    if hole.sum() / total < spec.min_fraction:
        side = int(np.ceil(np.sqrt(spec.min_fraction * total)))
        top, left = (H - side) // 2, (W - side) // 2
        hole[top : top + side, left : left + side] = True
    return 1.0 - hole.astype(np.float32)


# ---------------------------------------------------------------------------
# samples and batches


@dataclass
class Sample:
    """One training instance: ground truth, mask, and the two disjoint
    partial images, with n the hidden-pixel count of the mask plane."""

    I_g: np.ndarray  # [C,H,W] in [-1,1]
    M: np.ndarray  # [1,H,W] binary, 1 = visible
    I_m: np.ndarray
    I_c: np.ndarray
    n: int


def make_sample(img: np.ndarray, mask: np.ndarray) -> Sample:
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be exactly binary")
    if img.ndim != 3 or mask.shape != (1,) + img.shape[1:]:
        raise ValueError(f"image {img.shape} / mask {mask.shape} mismatch")
    I_m = (img * mask).astype(np.float32)
    I_c = (img * (1.0 - mask)).astype(np.float32)
    return Sample(I_g=img.astype(np.float32), M=mask.astype(np.float32),
                  I_m=I_m, I_c=I_c, n=int((mask == 0).sum()))


@dataclass
class Batch:
    I_g: Tensor  # [B,C,H,W]
    M: Tensor  # [B,1,H,W]
    n: np.ndarray  # [B] hidden-pixel counts

    @property
    def size(self):
        return self.I_g.shape[0]


def batch_samples(samples) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    I_g = Tensor(np.stack([s.I_g for s in samples]))
    M = Tensor(np.stack([s.M for s in samples]))
    n = np.array([s.n for s in samples], dtype=np.int64)
    return Batch(I_g=I_g, M=M, n=n)


# ---------------------------------------------------------------------------
# image I/O (PGM P5 / PPM P6)


def _to_bytes(img: np.ndarray) -> np.ndarray:
    v = np.clip(img, -1.0, 1.0)
    return np.floor((v + 1.0) * 0.5 * 255.0 + 0.5).astype(np.uint8)  # round half up


def write_image(path, img):
    if isinstance(img, Tensor):
        img = img.data
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"expected [1|3,H,W], got {img.shape}")
    C, H, W = img.shape
    b = _to_bytes(img)
    magic = b"P5" if C == 1 else b"P6"
    payload = b[0] if C == 1 else np.moveaxis(b, 0, 2)  # interleave RGB
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (W, H))
        f.write(payload.tobytes())


def _read_token(f):
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated header")
        if c == b"#":  # comment to end of line
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported magic {magic!r} in {path}")
        W = int(_read_token(f))
        H = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval} in {path}")
        C = 1 if magic == b"P5" else 3
        payload = f.read(C * H * W)
        if len(payload) != C * H * W:
            raise ValueError(f"truncated payload in {path}: {len(payload)} of {C * H * W} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if C == 1:
        img = arr.reshape(1, H, W)
    else:
        img = np.moveaxis(arr.reshape(H, W, 3), 2, 0)
    return (img.astype(np.float32) / 255.0) * 2.0 - 1.0


def write_grid(path, images, columns):
    """Tile images into one file with a 1-pixel separator (value -1)."""
    if not images:
        raise ValueError("empty grid")
    imgs = [im.data if isinstance(im, Tensor) else np.asarray(im) for im in images]
    C, H, W = imgs[0].shape
    if any(im.shape != (C, H, W) for im in imgs):
        raise ValueError("grid images must share one shape")
    rows = (len(imgs) + columns - 1) // columns
    out = np.full((C, rows * H + rows - 1, columns * W + columns - 1), -1.0, dtype=np.float32)
    for idx, im in enumerate(imgs):
        r, c = divmod(idx, columns)
        out[:, r * (H + 1) : r * (H + 1) + H, c * (W + 1) : c * (W + 1) + W] = im
    write_image(path, out)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(dirpath, images, prefix="img"):
    """Write images and a manifest (one relative path per line)."""
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"{prefix}_{i:05d}.pgm" if img.shape[0] == 1 else f"{prefix}_{i:05d}.ppm"
        write_image(os.path.join(dirpath, name), img)
        names.append(name)
    manifest = os.path.join(dirpath, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(names) + "\n")
    return manifest


def load_manifest(manifest_path):
    """Read a manifest (one relative image path per line); returns
    (names, images) in manifest order."""
    base = os.path.dirname(manifest_path)
    with open(manifest_path) as f:
        names = [ln.strip() for ln in f if ln.strip()]
    if not names:
        raise ValueError(f"empty manifest {manifest_path}")
    return names, [read_image(os.path.join(base, n)) for n in names]
