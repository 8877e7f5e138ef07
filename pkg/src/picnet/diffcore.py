"""Minimal reverse-mode autodiff engine on numpy arrays.

Tensors wrap contiguous row-major float arrays of rank <= 4. While a Tape is
active (``with Tape() as tape:``), every operation whose inputs require
gradients records a backward rule; ``backward(loss)`` (or ``tape.backward``)
replays the tape in reverse execution order and accumulates gradients into
the ``.grad`` of leaf tensors. Without an active tape, operations run in
plain inference mode and record nothing.

Conventions:
  * float32 for training, float64 for gradient-check runs; binary ops
    require matching dtypes.
  * elementwise ops broadcast only between identical shapes or
    tensor-vs-scalar (rank-0); anything richer must go through an explicit
    ``broadcast_to``.
  * gradient accumulation is additive, so a tensor consumed k times
    receives the sum of k upstream contributions.
  * backward leaves the tape intact; calling it twice (e.g. for two losses
    recorded on the same tape) adds both gradient sets into ``.grad``.
  * no operation mutates its inputs.
"""

from __future__ import annotations

import threading

import numpy as np

# When True, every forward op asserts its output is finite. Slow; meant for
# debugging runs and tests, not the training loop.
DEBUG_CHECK_FINITE = False

_state = threading.local()


class ShapeError(ValueError):
    """Operands have incompatible shapes or extents."""


class TapeError(RuntimeError):
    """Backward invoked without a usable tape or with a non-scalar loss."""


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4 unsupported")
        # ascontiguousarray would promote rank-0 to rank-1
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._is_leaf = True
        return out

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to rank-0 constants
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of operations for one differentiation session.

    Entries are (output, inputs, backward_fn) in execution order; backward
    walks them exactly once in reverse. A tape and the tensors recorded on
    it belong to a single thread; independent tapes may run concurrently.
    """

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted (exit out of order)")
        stack.pop()
        return False

    def __len__(self):
        return len(self._entries)

    def _record(self, out, inputs, backward_fn):
        out._is_leaf = False
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss):
        if loss.data.shape != ():
            raise TapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not require grad (recorded without a tape?)")
        # pass-local gradients for intermediates; leaves accumulate in .grad
        local = {id(loss): np.ones((), dtype=loss.dtype)}
        if loss._is_leaf:
            _accumulate(loss, local[id(loss)])
        for out, inputs, backward_fn in reversed(self._entries):
            g_out = local.get(id(out))
            if g_out is None:
                continue
            grads = backward_fn(g_out)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._is_leaf:
                    _accumulate(inp, g)
                else:
                    key = id(inp)
                    prev = local.get(key)
                    local[key] = g if prev is None else prev + g


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss on the active tape."""
    tape = _active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


class no_record:
    """Context that suspends recording (inference inside a training step)."""

    def __enter__(self):
        _tape_stack().append(None)
        # a None sentinel would break _active_tape(); use a throwaway tape
        _tape_stack()[-1] = _PAUSED
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class _Paused:
    def _record(self, out, inputs, backward_fn):
        out._is_leaf = True  # nothing recorded; stays a leaf


_PAUSED = _Paused()


def _make(data, inputs, backward_fn):
    tape = _active_tape()
    rec = tape is not None and tape is not _PAUSED and any(i.requires_grad for i in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = rec
    out.grad = None
    out._is_leaf = True
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward op")
    if rec:
        tape._record(out, inputs, backward_fn)
    return out


def _binary_shapes(a, b):
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ShapeError(f"shape mismatch {a.data.shape} vs {b.data.shape} (only identical or scalar)")


def _reduce_if_scalar(g, t):
    # gradient for a rank-0 operand of a broadcasted binary op
    if t.data.shape == () and np.ndim(g) != 0:
        return np.sum(g)
    return g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b):
    _binary_shapes(a, b)

    def bwd(g):
        return _reduce_if_scalar(g, a), _reduce_if_scalar(g, b)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _binary_shapes(a, b)

    def bwd(g):
        return _reduce_if_scalar(g, a), _reduce_if_scalar(-g, b)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _binary_shapes(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_if_scalar(g * bd, a), _reduce_if_scalar(g * ad, b)

    return _make(ad * bd, (a, b), bwd)


def div(a, b):
    _binary_shapes(a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        return _reduce_if_scalar(g / bd, a), _reduce_if_scalar(-g * ad / (bd * bd), b)

    return _make(ad / bd, (a, b), bwd)


def scale(a, s):
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _make(a.data * s, (a,), bwd)


def leaky_relu(a, slope=0.1):
    # derivative at exactly 0 is the positive-side slope 1
    d = np.where(a.data >= 0, a.data.dtype.type(1), a.data.dtype.type(slope))

    def bwd(g):
        return (g * d,)

    return _make(a.data * d, (a,), bwd)


def tanh(a):
    y = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _make(y, (a,), bwd)


def exp(a):
    y = np.exp(a.data)

    def bwd(g):
        return (g * y,)

    return _make(y, (a,), bwd)


def log(a):
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), bwd)


def absolute(a):
    # subgradient 0 at exactly 0
    s = np.sign(a.data)

    def bwd(g):
        return (g * s,)

    return _make(np.abs(a.data), (a,), bwd)


def square(a):
    ad = a.data

    def bwd(g):
        return (g * (2.0 * ad),)

    return _make(ad * ad, (a,), bwd)


def sqrt(a):
    y = np.sqrt(a.data)

    def bwd(g):
        # guarded at 0; the true derivative diverges there
        return (g / (2.0 * np.maximum(y, 1e-12)),)

    return _make(y, (a,), bwd)


def clamp(a, lo=None, hi=None):
    ad = a.data
    mask = np.ones_like(ad)
    if lo is not None:
        mask = mask * (ad >= lo)
    if hi is not None:
        mask = mask * (ad <= hi)

    def bwd(g):
        return (g * mask,)

    return _make(np.clip(ad, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    return axes


def _expand_reduced(g, shape, axes):
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return np.broadcast_to(g.reshape(keep), shape)


def tsum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.data.shape

    def bwd(g):
        return (_expand_reduced(g if not keepdims else np.asarray(g), shape, axes),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), bwd)


def tmean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.data.shape
    count = 1
    for ax in axes:
        count *= shape[ax]
    if count == 0:
        raise ShapeError("mean over empty axes")
    inv = 1.0 / count

    def bwd(g):
        return (_expand_reduced(np.asarray(g) * inv, shape, axes),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), bwd)


def tmax(a, axes=None, keepdims=False):
    """Max over axes; ties route the whole gradient to the first occurrence."""
    axes = _norm_axes(axes, a.data.ndim)
    shape = a.data.shape
    if any(shape[ax] == 0 for ax in axes):
        raise ShapeError("max over empty axis")
    other = tuple(i for i in range(a.data.ndim) if i not in axes)
    perm = other + axes
    moved = np.transpose(a.data, perm)
    lead = moved.shape[: len(other)]
    flat = moved.reshape(int(np.prod(lead, dtype=np.int64)) if lead else 1, -1)
    idx = np.argmax(flat, axis=1)  # first occurrence
    out_flat = flat[np.arange(flat.shape[0]), idx]
    out = out_flat.reshape(lead)
    if keepdims:
        keep = list(shape)
        for ax in axes:
            keep[ax] = 1
        out = out.reshape(keep)

    def bwd(g):
        gf = np.asarray(g).reshape(-1)
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), idx] = gf
        buf = buf.reshape(moved.shape)
        inv = np.argsort(perm)
        return (np.transpose(buf, inv),)

    return _make(np.ascontiguousarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.data.shape

    def bwd(g):
        return (np.asarray(g).reshape(old),)

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bwd)


def broadcast_to(a, shape):
    """Explicit broadcast (numpy rules); backward sums over expanded axes."""
    shape = tuple(int(s) for s in shape)
    old = a.data.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None

    def bwd(g):
        g = np.asarray(g)
        extra = g.ndim - len(old)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        squeeze = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        if squeeze:
            g = g.sum(axis=squeeze, keepdims=True)
        return (g,)

    return _make(np.ascontiguousarray(out), (a,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of empty list")
    axis = axis % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        parts = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(parts)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _make(ad @ bd, (a, b), bwd)


def bmm(a, b):
    """Batched matmul [B,M,K] x [B,K,N] -> [B,M,N]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        ga = g @ bd.transpose(0, 2, 1) if na else None
        gb = ad.transpose(0, 2, 1) @ g if nb else None
        return (ga, gb)

    return _make(ad @ bd, (a, b), bwd)


def softmax(a, axis=-1):
    axis = axis % a.data.ndim
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        gy = g * y
        return (gy - y * np.sum(gy, axis=axis, keepdims=True),)

    return _make(y, (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (NCHW)


def _conv_geometry(H, W, k, stride, pad):
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ShapeError(f"non-integral conv output for H,W={H},{W} k={k} stride={stride} pad={pad}")
    return (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad, Ho, Wo):
    B, C, H, W = x.shape
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + H, pad : pad + W] = x
        x = xp
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = x[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride]
    return cols.reshape(B, C * k * k, Ho * Wo)


def _col2im(dcols, xshape, k, stride, pad, Ho, Wo):
    B, C, H, W = xshape
    buf = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    dwin = dcols.reshape(B, C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dwin[:, :, i, j]
    if pad:
        return buf[:, :, pad:-pad, pad:-pad]
    return buf


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation of NCHW input with [Cout,Cin,k,k] weights."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.data.shape
    Cout, Cin, k, k2 = weight.data.shape
    if k != k2:
        raise ShapeError("only square kernels supported")
    if Cin != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cin}")
    if k < 1 or stride < 1 or pad < 0:
        raise ShapeError("conv2d needs k>=1, stride>=1, pad>=0")
    if bias is not None and bias.data.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.data.shape}, expected ({Cout},)")
    Ho, Wo = _conv_geometry(H, W, k, stride, pad)
    pointwise = k == 1 and stride == 1 and pad == 0
    # [B, CKK, L]; for 1x1 convs the column matrix is the input itself
    cols = x.data.reshape(B, C, H * W) if pointwise else _im2col(x.data, k, stride, pad, Ho, Wo)
    w2 = weight.data.reshape(Cout, C * k * k)
    out = np.matmul(w2, cols).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)
    xshape = x.data.shape
    nx, nw = x.requires_grad, weight.requires_grad
    nb = bias is not None and bias.requires_grad

    def bwd(g):
        g2 = g.reshape(B, Cout, Ho * Wo)
        gw = None
        if nw:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        gx = None
        if nx:
            dcols = np.matmul(w2.T, g2)
            gx = dcols.reshape(xshape) if pointwise else _col2im(dcols, xshape, k, stride, pad, Ho, Wo)
        gb = g.sum(axis=(0, 2, 3)) if nb else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, inputs, bwd)


def avg_pool2(x):
    """2x2 average pooling; spatial extents must be even."""
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even extents, got {H}x{W}")
    d = x.data
    y = d[:, :, ::2, ::2] + d[:, :, ::2, 1::2] + d[:, :, 1::2, ::2] + d[:, :, 1::2, 1::2]
    y *= 0.25

    def bwd(g):
        gx = np.empty((B, C, H, W), dtype=d.dtype)
        g4 = np.asarray(g) * 0.25
        gx[:, :, ::2, ::2] = g4
        gx[:, :, ::2, 1::2] = g4
        gx[:, :, 1::2, ::2] = g4
        gx[:, :, 1::2, 1::2] = g4
        return (gx,)

    return _make(y, (x,), bwd)


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsampling (each pixel becomes a 2x2 block)."""
    B, C, H, W = x.data.shape
    d = x.data
    y = np.empty((B, C, 2 * H, 2 * W), dtype=d.dtype)
    y[:, :, ::2, ::2] = d
    y[:, :, ::2, 1::2] = d
    y[:, :, 1::2, ::2] = d
    y[:, :, 1::2, 1::2] = d

    def bwd(g):
        g = np.asarray(g)
        return (g[:, :, ::2, ::2] + g[:, :, ::2, 1::2] + g[:, :, 1::2, ::2] + g[:, :, 1::2, 1::2],)

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Deterministic random stream: same (seed, fork key) => same values.

    ``fork`` derives an independent stream from the base seed plus a key
    path, so per-step streams can be rebuilt after a resume without
    serializing generator state.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def fork(self, *key):
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    def normal(self, shape=(), dtype=np.float32):
        return self._gen.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# finite-difference harness (shared by the test suites of every module)


def gradcheck(fn, inputs, h=1e-4, rtol=1e-4):
    """Compare analytic gradients of a scalar-valued ``fn`` with central
    finite differences at 64-bit.

    ``fn`` maps the given tensors to a scalar Tensor. Inputs must be float64.
    The relative error per input is ``max|a-n| / max(max|a|, max|n|, 1)``.
    Returns the worst relative error across inputs; raises AssertionError
    beyond ``rtol``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("gradcheck requires float64 inputs")
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
        tape.backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        if a is None:
            a = np.zeros_like(t.data)
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        denom = max(np.max(np.abs(a)), np.max(np.abs(num)), 1.0)
        err = float(np.max(np.abs(a - num)) / denom)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradient mismatch: rel err {err:.3e} > {rtol:.1e} for input shape {t.shape}")
    return worst
