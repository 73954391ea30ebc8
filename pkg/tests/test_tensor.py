import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dimsum import tensor as T
from dimsum.tensor import NonFiniteError, ShapeError, Tensor
from gradcases import leaf, primitive_cases


def test_softplus_zero_is_ln2():
    assert T.softplus(Tensor(np.zeros(1))).data[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_matmul_identity():
    m = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    T.sum_(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_constant_loss_has_zero_grads():
    x = leaf([1.0, 2.0])
    loss = T.add(T.mul(T.sum_(x), 0.0), 3.0)
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_silu_grad_at_zero():
    w = leaf([0.0])
    T.sum_(T.silu(w)).backward()
    assert w.grad[0] == pytest.approx(0.5, abs=1e-15)
    assert T.finite_diff_check(lambda: T.sum_(T.silu(w)), w) < 1e-9


def test_fd_check_exp():
    x = leaf(np.random.default_rng(1).uniform(-2, 2, 10))
    assert T.finite_diff_check(lambda: T.sum_(T.exp(x)), x) <= 1e-6


def test_fd_check_constant_is_zero():
    x = leaf([1.0, 2.0])
    assert T.finite_diff_check(lambda: T.mul(T.sum_(x), 0.0), x) == 0.0


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        T.reshape(Tensor(np.zeros(6)), (4,))


def test_leading_batch_broadcast_only():
    out = T.add(Tensor(np.ones((4, 2, 3))), Tensor(np.arange(3.0)))
    assert out.shape == (4, 2, 3)
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((4, 2, 3))), Tensor(np.ones((4, 1))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_rejects_nonfinite():
    with T.debug_mode(True):
        with pytest.raises(NonFiniteError):
            T.log(Tensor(np.array([-1.0])))
    # off by default
    assert np.isnan(T.log(Tensor(np.array([-1.0]))).data[0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad


def test_rng_streams_are_independent_and_reproducible():
    a = T.rng(7, "init").standard_normal(4)
    assert np.array_equal(a, T.rng(7, "init").standard_normal(4))
    assert not np.array_equal(a, T.rng(7, "noise").standard_normal(4))
    assert not np.array_equal(a, T.rng(8, "init").standard_normal(4))


def test_phi1_small_argument_branch():
    z = leaf([0.0, 1e-9, -1e-9, -0.5])
    vals = T.phi1(z).data
    np.testing.assert_allclose(vals[:3], 1.0, atol=1e-8)
    assert vals[3] == pytest.approx(math.expm1(-0.5) / -0.5, rel=1e-14)


@pytest.mark.parametrize("name", list(primitive_cases()))
def test_primitive_gradients(name):
    f, params = primitive_cases()[name]
    assert T.finite_diff_check(f, params, eps=1e-6) <= 1e-6, name


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-100, 100)))
def test_layout_ops_preserve_multiset(x):
    t = Tensor(x)
    for out in (T.reshape(t, (x.size,)), T.transpose(t, (2, 0, 1)),
                T.gather(t, np.random.default_rng(0).permutation(x.shape[1]), axis=1)):
        assert np.array_equal(np.sort(out.data.ravel()), np.sort(x.ravel()))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_backward_deterministic(seed):
    g = np.random.default_rng(seed)
    x0 = g.standard_normal((3, 4))
    w0 = g.standard_normal((4, 2))

    def run():
        x, w = leaf(x0), leaf(w0)
        loss = T.sum_(T.softplus(T.matmul(T.silu(x), w)))
        loss.backward()
        return loss.data, x.grad, w.grad

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_flop_counter_counts_matmul():
    with T.count_flops() as fc:
        T.matmul(Tensor(np.zeros((5, 3))), Tensor(np.zeros((3, 7))))
    assert fc.total == 2 * 5 * 3 * 7
