import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spikestream import tensor as tn
from spikestream.tensor import ContractError, Tape, Tensor, finite_difference_check, no_grad


def triple_loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        out = Tensor(np.eye(2)) @ Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[5.0], [7.0]])
        np.testing.assert_array_equal(out.data, [[5], [0]])

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        out = (Tensor(a) @ Tensor(b)).data
        np.testing.assert_allclose(out, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_batched_gradient(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        assert finite_difference_check(lambda: ((a @ b) ** 2).sum(), [a, b]).passed


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [4, -2])

    def test_mlp_against_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((5, 3)))
        w1 = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b1 = Tensor(rng.standard_normal(4), requires_grad=True)
        w2 = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def f():
            h = tn.tanh(x @ w1 + b1)
            return ((h @ w2) ** 2).mean()

        report = finite_difference_check(f, [w1, b1, w2], tol=1e-4)
        assert report.passed, str(report)

    def test_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 3).sum().backward()
        (x * 3).sum().backward()
        np.testing.assert_array_equal(x.grad, [6, 6])
        x.zero_grad()
        assert x.grad is None

    def test_reused_node_sums_both_paths(self):
        x = Tensor([1.5], requires_grad=True)
        y = x * x
        (y + y * 2).sum().backward()
        np.testing.assert_allclose(x.grad, [9.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2).backward()

    def test_tape_order_follows_execution(self):
        x = Tensor([1.0], requires_grad=True)
        a = x * 2
        b = tn.exp(a)
        c = (b + a).sum()
        tape = Tape.of(c)
        ops = [n.op for n in tape]
        assert ops.index("mul") < ops.index("exp") < ops.index("add")
        seqs = [n.seq for n in tape]
        assert seqs == sorted(seqs)


class TestNoGrad:
    def test_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2
        assert y.is_leaf and not y.requires_grad

    def test_is_thread_local(self):
        x = Tensor([1.0], requires_grad=True)
        seen = {}

        def other():
            seen["y"] = x * 2

        with no_grad():
            t = threading.Thread(target=other)
            t.start()
            t.join()
        assert seen["y"].requires_grad


shapes = hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=4)


def reduce_to(grad, shape):
    """Independent broadcast reduction: sum the leading and stretched axes."""
    grad = np.asarray(grad)
    grad = grad.sum(axis=tuple(range(grad.ndim - len(shape))))
    return grad.sum(axis=tuple(i for i, n in enumerate(shape) if n == 1), keepdims=True).reshape(shape)


@settings(max_examples=40, deadline=None)
@given(hnp.mutually_broadcastable_shapes(num_shapes=2, min_dims=1, max_dims=3, max_side=4))
def test_broadcast_add_mul_gradients(bshapes):
    rng = np.random.default_rng(0)
    sa, sb = bshapes.input_shapes
    a = Tensor(rng.standard_normal(sa), requires_grad=True)
    b = Tensor(rng.standard_normal(sb), requires_grad=True)
    out = a * b + a
    assert out.shape == bshapes.result_shape
    out.sum().backward()
    full = bshapes.result_shape
    np.testing.assert_allclose(a.grad, reduce_to(np.broadcast_to(b.data + 1.0, full), sa))
    np.testing.assert_allclose(b.grad, reduce_to(np.broadcast_to(a.data, full), sb))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, shapes, elements=st.floats(-3, 3)))
def test_reshape_transpose_roundtrip_gradient(arr):
    x = Tensor(arr, requires_grad=True)
    y = x.reshape(-1).reshape(arr.shape)
    if arr.ndim > 1:
        y = y.transpose().transpose()
    (y * 2).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(arr.shape, 2.0))
