"""Network building blocks: spectrally normalized conv/linear layers,
instance normalization, residual blocks, and the short+long term attention
layer that reweights decoder and encoder features with one set of scores.

All weights are orthogonally initialized and spectrally normalized. Power
iterations mutate the persistent u/v estimates only inside an
``sn_updates()`` context; outside it every forward is pure, which keeps
finite-difference gradient checks honest.
"""

from __future__ import annotations

import threading

import numpy as np

from . import diffcore as dc
from .diffcore import Rng, Tensor

IN_EPS = 1e-5
SN_EPS = 1e-12
LEAK = 0.1

_sn_flag = threading.local()


class sn_updates:
    """While active, each spectrally normalized forward runs one power
    iteration and persists the updated u/v vectors."""

    def __enter__(self):
        _sn_flag.depth = getattr(_sn_flag, "depth", 0) + 1
        return self

    def __exit__(self, exc_type, exc, tb):
        _sn_flag.depth -= 1
        return False


def _sn_active():
    return getattr(_sn_flag, "depth", 0) > 0


def orthogonal(shape, rng: Rng, dtype=np.float32):
    """Orthogonal matrix init (gain 1): QR of a standard normal draw with
    the R-diagonal sign fix, flattened as (out, rest) and reshaped back."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"degenerate shape {shape}")
    rows = shape[0]
    cols = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    a = rng.normal((max(rows, cols), min(rows, cols)), dtype=np.float64)
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q.reshape(shape)).astype(dtype)


class ModuleList(list):
    pass


class Module:
    """Base with automatic registration: Tensor attributes are parameters,
    ndarray attributes are persistent buffers, Module/ModuleList attributes
    are children. Registration order follows construction order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_bufs", {})
        object.__setattr__(self, "_mods", {})

    def __setattr__(self, name, value):
        for reg in (self._params, self._bufs, self._mods):
            reg.pop(name, None)
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, np.ndarray):
            self._bufs[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._mods[name] = value
        object.__setattr__(self, name, value)

    def named_params(self, prefix=""):
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, m in self._mods.items():
            if isinstance(m, ModuleList):
                for i, sub in enumerate(m):
                    out.update(sub.named_params(f"{prefix}{name}.{i}."))
            else:
                out.update(m.named_params(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {}
        for name in self._bufs:
            out[prefix + name] = getattr(self, name)
        for name, m in self._mods.items():
            if isinstance(m, ModuleList):
                for i, sub in enumerate(m):
                    out.update(sub.named_buffers(f"{prefix}{name}.{i}."))
            else:
                out.update(m.named_buffers(f"{prefix}{name}."))
        return out

    def modules(self):
        yield self
        for m in self._mods.values():
            if isinstance(m, ModuleList):
                for sub in m:
                    yield from sub.modules()
            else:
                yield from m.modules()

    def buffer_owners(self, prefix=""):
        """Map full buffer name -> (owning module, attribute) for restores."""
        out = {prefix + name: (self, name) for name in self._bufs}
        for name, m in self._mods.items():
            if isinstance(m, ModuleList):
                for i, sub in enumerate(m):
                    out.update(sub.buffer_owners(f"{prefix}{name}.{i}."))
            else:
                out.update(m.buffer_owners(f"{prefix}{name}."))
        return out

    def params(self):
        return list(self.named_params().values())

    def n_params(self):
        return sum(t.size for t in self.params())

    def zero_grads(self):
        for t in self.params():
            t.grad = None


class _SNWeight(Module):
    """Weight with spectral normalization state.

    The effective weight is W / sigma with sigma = u^T W v; u and v are
    power-iteration estimates of the top singular pair, persisted across
    calls (and through checkpoints). During an update, v <- norm(W^T u)
    then u <- norm(W v), after which sigma equals ||W v|| >= 0. sigma is
    computed in-graph from the constant u/v so gradients see the
    normalization, matching the standard formulation.
    """

    def __init__(self, weight_arr, rng: Rng, spectral_norm=True):
        super().__init__()
        self.weight = Tensor(weight_arr, requires_grad=True)
        self.rows = weight_arr.shape[0]
        self.cols = int(np.prod(weight_arr.shape[1:]))
        if spectral_norm:
            u = rng.normal((self.rows,), dtype=np.float64)
            self.u = (u / max(np.linalg.norm(u), SN_EPS)).astype(weight_arr.dtype)
            self.v = np.zeros((self.cols,), dtype=weight_arr.dtype)
            self._power_iteration()
        # absent u/v registries mean the weight is used raw

    @property
    def spectral_norm(self):
        return "u" in self._bufs

    def _power_iteration(self):
        w = self.weight.data.reshape(self.rows, self.cols)
        v = w.T @ self.u
        v = v / max(np.linalg.norm(v), SN_EPS)
        u = w @ v
        u = u / max(np.linalg.norm(u), SN_EPS)
        self.u = u.astype(w.dtype)
        self.v = v.astype(w.dtype)

    def effective(self):
        if not self.spectral_norm:
            return self.weight
        if _sn_active():
            self._power_iteration()
        ut = Tensor(self.u.reshape(1, self.rows))
        vt = Tensor(self.v.reshape(self.cols, 1))
        w2 = dc.reshape(self.weight, (self.rows, self.cols))
        sigma = dc.reshape(dc.matmul(dc.matmul(ut, w2), vt), ())
        sigma = dc.clamp(sigma, lo=SN_EPS)
        return dc.div(self.weight, sigma)

    def sigma_estimate(self):
        w = self.weight.data.reshape(self.rows, self.cols)
        return float(self.u @ w @ self.v)


class Conv2d(Module):
    def __init__(self, rng: Rng, cin, cout, k, stride=1, pad=0, bias=True, spectral_norm=True):
        super().__init__()
        self.stride, self.pad = stride, pad
        self.w = _SNWeight(orthogonal((cout, cin, k, k), rng), rng, spectral_norm)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        return dc.conv2d(x, self.w.effective(), self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, rng: Rng, fin, fout, bias=True, spectral_norm=True):
        super().__init__()
        self.w = _SNWeight(orthogonal((fout, fin), rng), rng, spectral_norm)
        self.bias = Tensor(np.zeros(fout, dtype=np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        y = dc.matmul(x, dc.transpose(self.w.effective(), (1, 0)))
        if self.bias is not None:
            y = y + dc.broadcast_to(dc.reshape(self.bias, (1, self.bias.size)), y.shape)
        return y


class InstanceNorm(Module):
    """Per-(instance, channel) normalization over H,W with learned affine."""

    def __init__(self, channels):
        super().__init__()
        self.scale = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.channels = channels

    def __call__(self, x):
        B, C, H, W = x.shape
        if H * W < 2:
            raise dc.ShapeError("instance norm on a 1-pixel plane is degenerate")
        mu = dc.broadcast_to(dc.tmean(x, axes=(2, 3), keepdims=True), x.shape)
        xc = x - mu
        var = dc.tmean(dc.square(xc), axes=(2, 3), keepdims=True)
        inv = dc.exp(dc.scale(dc.log(var + IN_EPS), -0.5))
        y = xc * dc.broadcast_to(inv, x.shape)
        sc = dc.broadcast_to(dc.reshape(self.scale, (1, C, 1, 1)), x.shape)
        sh = dc.broadcast_to(dc.reshape(self.shift, (1, C, 1, 1)), x.shape)
        return y * sc + sh


RES_KINDS = ("start", "plain", "down", "up")


class ResBlock(Module):
    """Residual block; ``kind`` picks the resampling.

    main: [instance norm (up only)] -> lrelu -> conv3x3 -> lrelu -> conv3x3,
    with 2x avg-pool appended (down) or 2x nearest upsampling before the
    first conv (up). shortcut: conv1x1 with the matching resample. Output is
    main + shortcut; start and plain are structurally identical.
    """

    def __init__(self, rng: Rng, kind, cin, cout):
        super().__init__()
        if kind not in RES_KINDS:
            raise ValueError(f"unknown ResBlock kind {kind!r}")
        self.kind = kind
        self.norm = InstanceNorm(cin) if kind == "up" else None
        self.conv1 = Conv2d(rng, cin, cout, 3, pad=1)
        self.conv2 = Conv2d(rng, cout, cout, 3, pad=1)
        self.shortcut = Conv2d(rng, cin, cout, 1, bias=False)

    def __call__(self, x):
        h = x
        if self.kind == "up":
            h = self.norm(h)
        h = dc.leaky_relu(h, LEAK)
        if self.kind == "up":
            h = dc.upsample_nearest2(h)
        h = self.conv1(h)
        h = dc.leaky_relu(h, LEAK)
        h = self.conv2(h)
        if self.kind == "down":
            h = dc.avg_pool2(h)
        if self.kind == "up":
            s = self.shortcut(dc.upsample_nearest2(x))
        elif self.kind == "down":
            s = dc.avg_pool2(self.shortcut(x))
        else:
            s = self.shortcut(x)
        return h + s


def check_binary_mask(mask):
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be exactly binary (0 = hole, 1 = visible)")


def _attention_scores(q_flat):
    # scores[b, j, i] = q_j . q_i; beta[b, j, :] is a distribution over
    # source positions i for output position j
    scores = dc.bmm(dc.transpose(q_flat, (0, 2, 1)), q_flat)
    return dc.softmax(scores, axis=2)


def _attend(beta, f):
    B, C, H, W = f.shape
    f_flat = dc.reshape(f, (B, C, H * W))
    c = dc.bmm(beta, dc.transpose(f_flat, (0, 2, 1)))
    return dc.reshape(dc.transpose(c, (0, 2, 1)), (B, C, H, W))


class AttentionLayer(Module):
    """Short+long term attention: one score matrix from decoder features
    drives self-attention on the decoder path (short term) and contextual
    flow from encoder features on the skip path (long term)."""

    def __init__(self, rng: Rng, c_dec):
        super().__init__()
        self.query = Conv2d(rng, c_dec, max(c_dec // 8, 1), 1, bias=False)
        self.gamma_d = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)
        self.gamma_e = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)

    def __call__(self, f_d, f_e, mask):
        if f_d.shape[0] != f_e.shape[0] or f_d.shape[2:] != f_e.shape[2:]:
            raise dc.ShapeError(f"attention feature shapes {f_d.shape} vs {f_e.shape}")
        if mask.shape != (f_d.shape[0], 1, f_d.shape[2], f_d.shape[3]):
            raise dc.ShapeError(f"mask shape {mask.shape} does not match features")
        check_binary_mask(mask)
        B, C, H, W = f_d.shape
        q = dc.reshape(self.query(f_d), (B, self.query.w.rows, H * W))
        beta = _attention_scores(q)
        c_d = _attend(beta, f_d)
        y_d = c_d * self.gamma_d + f_d
        c_e = _attend(beta, f_e)
        m = dc.broadcast_to(mask.detach(), f_e.shape)
        hole = dc.broadcast_to(Tensor(1.0 - mask.data), f_e.shape)
        y_e = c_e * hole * self.gamma_e + f_e * m
        return y_d, y_e, beta


class SelfAttention(Module):
    """Discriminator-side attention: same scores, own feature map only."""

    def __init__(self, rng: Rng, c):
        super().__init__()
        self.query = Conv2d(rng, c, max(c // 8, 1), 1, bias=False)
        self.gamma = Tensor(np.zeros((), dtype=np.float32), requires_grad=True)

    def __call__(self, f):
        B, C, H, W = f.shape
        q = dc.reshape(self.query(f), (B, self.query.w.rows, H * W))
        beta = _attention_scores(q)
        return _attend(beta, f) * self.gamma + f
