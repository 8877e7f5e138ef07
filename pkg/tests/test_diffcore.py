"""Engine tests: forward oracles, finite-difference gradients, tape rules.

The convolution/pooling oracles here are deliberately naive nested loops,
written independently of the engine's im2col path.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from picnet import diffcore as dc
from picnet.diffcore import (
    Rng,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    gradcheck,
)


# ---------------------------------------------------------------------------
# oracles


def conv2d_oracle(x, w, b=None, stride=1, pad=0):
    """Direct nested-loop cross-correlation, NCHW."""
    B, C, H, W = x.shape
    Cout, Cin, k, _ = w.shape
    assert Cin == C
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    for n in range(B):
        for co in range(Cout):
            for oi in range(Ho):
                for oj in range(Wo):
                    acc = 0.0
                    for ci in range(C):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[n, ci, oi * stride + ki, oj * stride + kj] * w[co, ci, ki, kj]
                    out[n, co, oi, oj] = acc + (b[co] if b is not None else 0.0)
    return out


def avg_pool2_oracle(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2), dtype=x.dtype)
    for i in range(H // 2):
        for j in range(W // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean(axis=(2, 3))
    return out


def upsample_oracle(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, 2 * H, 2 * W), dtype=x.dtype)
    for i in range(2 * H):
        for j in range(2 * W):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


def softmax_oracle(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def t64(arr, rg=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


def rand64(rng, shape, rg=True):
    return Tensor(rng.normal(shape, dtype=np.float64), requires_grad=rg)


@pytest.fixture
def rng():
    return Rng(20260815)


# ---------------------------------------------------------------------------
# forward correctness


class TestForward:
    def test_add_mul_scalars(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 4.0])
        assert np.allclose((a + b).data, [4, 6])
        assert np.allclose((a * b).data, [3, 8])
        assert np.allclose((a - b).data, [-2, -2])
        assert np.allclose((a / b).data, [1 / 3, 0.5])
        assert np.allclose((a * 2.0).data, [2, 4])
        assert np.allclose((-a).data, [-1, -2])

    def test_binary_shape_rules(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((3, 2)))
        with pytest.raises(ShapeError):
            dc.add(a, b)
        c = Tensor(np.zeros((2, 1)))
        with pytest.raises(ShapeError):
            dc.add(a, c)  # partial broadcast must be explicit
        s = Tensor(2.0)
        assert dc.add(a, s).data.shape == (2, 3)

    def test_leaky_relu_values(self):
        x = Tensor([-2.0, -0.5, 0.0, 0.5, 2.0])
        y = dc.leaky_relu(x, 0.1)
        assert np.allclose(y.data, [-0.2, -0.05, 0.0, 0.5, 2.0])

    def test_leaky_relu_grad_at_zero_is_one(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            y = dc.tsum(dc.leaky_relu(x, 0.1))
            tape.backward(y)
        assert x.grad[0] == 1.0

    def test_clamp(self):
        x = Tensor([-5.0, 0.0, 5.0])
        assert np.allclose(dc.clamp(x, -1.0, 1.0).data, [-1, 0, 1])

    def test_max_first_occurrence_ties(self):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        with Tape() as tape:
            y = dc.tsum(dc.tmax(x, axes=1))
            tape.backward(y)
        assert np.allclose(x.grad, [[0.0, 1.0, 0.0]])

    def test_reductions_match_numpy(self, rng):
        x = rng.normal((3, 4, 5), dtype=np.float64)
        t = Tensor(x)
        assert np.allclose(dc.tsum(t, axes=(0, 2)).data, x.sum(axis=(0, 2)))
        assert np.allclose(dc.tmean(t, axes=1, keepdims=True).data, x.mean(axis=1, keepdims=True))
        assert np.allclose(dc.tmax(t, axes=(1, 2)).data, x.max(axis=(1, 2)))
        assert np.allclose(dc.tmax(t).data, x.max())

    def test_matmul_requires_2d(self):
        a = Tensor(np.zeros((2, 3, 4)))
        b = Tensor(np.zeros((4, 5)))
        with pytest.raises(ShapeError):
            dc.matmul(a, b)

    def test_matmul_matches_numpy(self, rng):
        a = rng.normal((4, 6), dtype=np.float64)
        b = rng.normal((6, 3), dtype=np.float64)
        assert np.allclose(dc.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_bmm_matches_numpy(self, rng):
        a = rng.normal((5, 3, 4), dtype=np.float64)
        b = rng.normal((5, 4, 2), dtype=np.float64)
        assert np.allclose(dc.bmm(Tensor(a), Tensor(b)).data, a @ b)

    def test_softmax_oracle(self, rng):
        x = rng.normal((3, 7), dtype=np.float64)
        y = dc.softmax(Tensor(x), axis=1)
        assert np.allclose(y.data, softmax_oracle(x, 1))
        assert np.allclose(y.data.sum(axis=1), 1.0)

    def test_softmax_shift_invariance(self, rng):
        x = rng.normal((2, 5), dtype=np.float64)
        y1 = dc.softmax(Tensor(x), axis=1).data
        y2 = dc.softmax(Tensor(x + 1000.0), axis=1).data
        assert np.allclose(y1, y2)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 4), (1, 0, 1)])
    def test_conv2d_matches_oracle(self, rng, stride, pad, k):
        x = rng.normal((2, 3, 8, 8), dtype=np.float64)
        w = rng.normal((4, 3, k, k), dtype=np.float64)
        b = rng.normal((4,), dtype=np.float64)
        got = dc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        want = conv2d_oracle(x, w, b, stride=stride, pad=pad)
        assert got.data.shape == want.shape
        assert np.allclose(got.data, want, atol=1e-10)

    def test_conv2d_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 5, 5)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        with pytest.raises(ShapeError):
            dc.conv2d(x, w, stride=3, pad=0)  # (5-3)/3 non-integral
        wbad = Tensor(np.zeros((3, 4, 3, 3)))
        with pytest.raises(ShapeError):
            dc.conv2d(x, wbad, pad=1)

    def test_avg_pool2_matches_oracle(self, rng):
        x = rng.normal((2, 3, 6, 8), dtype=np.float64)
        assert np.allclose(dc.avg_pool2(Tensor(x)).data, avg_pool2_oracle(x))

    def test_avg_pool2_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            dc.avg_pool2(Tensor(np.zeros((1, 1, 5, 4))))

    def test_upsample_matches_oracle(self, rng):
        x = rng.normal((2, 3, 3, 4), dtype=np.float64)
        assert np.allclose(dc.upsample_nearest2(Tensor(x)).data, upsample_oracle(x))

    def test_pool_upsample_roundtrip(self, rng):
        x = rng.normal((1, 2, 4, 4), dtype=np.float64)
        back = dc.avg_pool2(dc.upsample_nearest2(Tensor(x)))
        assert np.allclose(back.data, x)

    def test_concat_transpose_reshape(self, rng):
        a = rng.normal((2, 3), dtype=np.float64)
        b = rng.normal((2, 5), dtype=np.float64)
        cat = dc.concat([Tensor(a), Tensor(b)], axis=1)
        assert np.allclose(cat.data, np.concatenate([a, b], axis=1))
        tr = dc.transpose(Tensor(a), (1, 0))
        assert np.allclose(tr.data, a.T)
        rs = dc.reshape(Tensor(a), (3, 2))
        assert np.allclose(rs.data, a.reshape(3, 2))

    def test_broadcast_to(self, rng):
        a = rng.normal((1, 3, 1), dtype=np.float64)
        out = dc.broadcast_to(Tensor(a), (2, 3, 4))
        assert np.allclose(out.data, np.broadcast_to(a, (2, 3, 4)))

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))


# ---------------------------------------------------------------------------
# gradients (finite differences, float64)


class TestGradients:
    def test_elementwise_chain(self, rng):
        x = rand64(rng, (3, 4))
        y = rand64(rng, (3, 4))
        gradcheck(lambda a, b: dc.tsum(dc.tanh(a) * b + dc.square(a) / (dc.exp(b) + 1.0)), [x, y])

    def test_log_sqrt_abs(self, rng):
        x = Tensor(np.abs(rng.normal((3, 3), dtype=np.float64)) + 0.5, requires_grad=True)
        gradcheck(lambda a: dc.tsum(dc.log(a) + dc.sqrt(a) + dc.absolute(a)), [x])

    def test_leaky_relu_grad(self, rng):
        x = Tensor(rng.normal((4, 4), dtype=np.float64) + 0.05, requires_grad=True)
        gradcheck(lambda a: dc.tsum(dc.leaky_relu(a, 0.1)), [x])

    def test_clamp_grad_interior(self, rng):
        x = Tensor(rng.normal((3, 3), dtype=np.float64) * 0.3, requires_grad=True)
        gradcheck(lambda a: dc.tsum(dc.square(dc.clamp(a, -1.0, 1.0))), [x])

    def test_reduction_grads(self, rng):
        x = rand64(rng, (2, 3, 4))
        gradcheck(lambda a: dc.tsum(dc.square(dc.tmean(a, axes=(0, 2), keepdims=True))), [x])
        gradcheck(lambda a: dc.tmean(dc.square(a)), [x])

    def test_max_grad(self, rng):
        # keep entries well separated so finite differences see one argmax
        base = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        x = Tensor(base + rng.normal((2, 3, 4), dtype=np.float64) * 0.01, requires_grad=True)
        gradcheck(lambda a: dc.tsum(dc.tmax(a, axes=(1,))), [x])

    def test_matmul_grad(self, rng):
        a = rand64(rng, (3, 4))
        b = rand64(rng, (4, 2))
        gradcheck(lambda x, y: dc.tsum(dc.square(dc.matmul(x, y))), [a, b])

    def test_bmm_grad(self, rng):
        a = rand64(rng, (2, 3, 4))
        b = rand64(rng, (2, 4, 2))
        gradcheck(lambda x, y: dc.tsum(dc.square(dc.bmm(x, y))), [a, b])

    def test_softmax_grad(self, rng):
        x = rand64(rng, (2, 5))
        w = Tensor(rng.normal((2, 5), dtype=np.float64), requires_grad=False)
        gradcheck(lambda a: dc.tsum(dc.softmax(a, axis=1) * w), [x])

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_conv2d_grad(self, rng, stride, pad):
        x = rand64(rng, (2, 2, 5, 5)) if (5 + 2 * pad - 3) % stride == 0 else rand64(rng, (2, 2, 6, 6))
        w = rand64(rng, (3, 2, 3, 3))
        b = rand64(rng, (3,))
        gradcheck(lambda a, ww, bb: dc.tsum(dc.square(dc.conv2d(a, ww, bb, stride=stride, pad=pad))), [x, w, b])

    def test_pool_upsample_grads(self, rng):
        x = rand64(rng, (1, 2, 4, 4))
        gradcheck(lambda a: dc.tsum(dc.square(dc.avg_pool2(a))), [x])
        gradcheck(lambda a: dc.tsum(dc.square(dc.upsample_nearest2(a))), [x])

    def test_shape_op_grads(self, rng):
        x = rand64(rng, (2, 3))
        gradcheck(lambda a: dc.tsum(dc.square(dc.transpose(dc.reshape(a, (3, 2)), (1, 0)))), [x])
        gradcheck(lambda a: dc.tsum(dc.square(dc.broadcast_to(a, (4, 2, 3)))), [x])

    def test_concat_grad(self, rng):
        a = rand64(rng, (2, 3))
        b = rand64(rng, (2, 2))
        gradcheck(lambda x, y: dc.tsum(dc.square(dc.concat([x, y], axis=1))), [a, b])

    def test_div_grad(self, rng):
        a = rand64(rng, (3, 3))
        b = Tensor(np.abs(rng.normal((3, 3), dtype=np.float64)) + 1.0, requires_grad=True)
        gradcheck(lambda x, y: dc.tsum(x / y), [a, b])


# ---------------------------------------------------------------------------
# tape semantics


class TestTape:
    def test_no_tape_no_requires_grad(self):
        a = Tensor([1.0], requires_grad=True)
        y = dc.square(a)  # outside any tape
        assert not y.requires_grad

    def test_fanout_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = x * x  # x used twice
            z = dc.tsum(y + x)
            tape.backward(z)
        assert np.allclose(x.grad, [2 * 2.0 + 1.0])

    def test_two_backwards_accumulate(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            l1 = dc.tsum(dc.square(x))
            l2 = dc.tsum(x * 2.0)
            tape.backward(l1)
            tape.backward(l2)
        assert np.allclose(x.grad, [6.0 + 2.0])

    def test_intermediate_grads_not_stored(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            y = dc.square(x)
            z = dc.tsum(dc.square(y))
            tape.backward(z)
        assert y.grad is None  # only leaves accumulate
        assert x.grad is not None

    def test_detach_blocks_gradient(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = dc.square(x).detach()
            z = dc.tsum(y * x)
            tape.backward(z)
        assert np.allclose(x.grad, [4.0])  # d/dx of const(4)*x

    def test_no_record_context(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            with dc.no_record():
                y = dc.square(x)
            assert not y.requires_grad
            z = dc.tsum(x * 3.0)
            tape.backward(z)
        assert np.allclose(x.grad, [3.0])

    def test_scalar_loss_required(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = dc.square(x)
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_backward_without_tape(self):
        x = Tensor(1.0, requires_grad=True)
        with pytest.raises(TapeError):
            dc.backward(x)

    def test_nested_tapes_record_to_inner(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as outer:
            _ = dc.square(x)
            with Tape() as inner:
                y = dc.tsum(dc.square(x))
                inner.backward(y)
            n_outer = len(outer)
        assert len(inner) == 2
        assert n_outer == 1

    def test_linear_cost_in_graph_size(self):
        # tape length equals the number of recorded ops
        x = Tensor(np.ones(4), requires_grad=True)
        with Tape() as tape:
            y = x
            for _ in range(17):
                y = dc.square(y)
            tape.backward(dc.tsum(y))
        assert len(tape) == 18

    def test_inputs_never_mutated(self, rng):
        xd = rng.normal((2, 3, 4, 4), dtype=np.float64)
        x = Tensor(xd.copy(), requires_grad=True)
        w = Tensor(rng.normal((2, 3, 3, 3), dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            y = dc.tsum(dc.square(dc.conv2d(x, w, pad=1)))
            tape.backward(y)
        assert np.array_equal(x.data, xd)


# ---------------------------------------------------------------------------
# rng determinism


class TestRng:
    def test_same_key_same_stream(self):
        a = Rng(7).fork(3, 100).normal((5,))
        b = Rng(7).fork(3, 100).normal((5,))
        assert np.array_equal(a, b)

    def test_different_keys_differ(self):
        a = Rng(7).fork(3, 100).normal((64,))
        b = Rng(7).fork(3, 101).normal((64,))
        assert not np.array_equal(a, b)

    def test_fork_independent_of_consumption(self):
        r1 = Rng(7)
        r1.normal((100,))  # consume some draws
        a = r1.fork(1).normal((5,))
        b = Rng(7).fork(1).normal((5,))
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# property-based invariants


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_prop_add_commutes(rows, cols, seed):
    rng = Rng(seed)
    a = rng.normal((rows, cols), dtype=np.float64)
    b = rng.normal((rows, cols), dtype=np.float64)
    assert np.array_equal(dc.add(Tensor(a), Tensor(b)).data, dc.add(Tensor(b), Tensor(a)).data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_prop_softmax_simplex(rows, cols, seed):
    x = Rng(seed).normal((rows, cols), dtype=np.float64) * 5
    y = dc.softmax(Tensor(x), axis=1).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2 ** 31 - 1))
def test_prop_conv_linearity(B, C, Cout, seed):
    rng = Rng(seed)
    x1 = rng.normal((B, C, 6, 6), dtype=np.float64)
    x2 = rng.normal((B, C, 6, 6), dtype=np.float64)
    w = rng.normal((Cout, C, 3, 3), dtype=np.float64)
    lhs = dc.conv2d(Tensor(x1 + x2), Tensor(w), pad=1).data
    rhs = dc.conv2d(Tensor(x1), Tensor(w), pad=1).data + dc.conv2d(Tensor(x2), Tensor(w), pad=1).data
    assert np.allclose(lhs, rhs, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_prop_sum_grad_is_ones(seed):
    x = Tensor(Rng(seed).normal((3, 5), dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        tape.backward(dc.tsum(x))
    assert np.array_equal(x.grad, np.ones((3, 5)))
