import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasscan import tensor as T
from biasscan.tensor import ShapeError, TapeError, Tape, Tensor

from _reference import conv2d_loops


def _grad(fn, *arrays):
    """Gradients of scalar fn(*tensors) with respect to every argument."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        T.backward(fn(*ts))
    return [t.grad.astype(np.float64) for t in ts]


def _numeric(fn, arrays, which, h=1e-3):
    """Central differences of fn (evaluated in float64 via float32 tensors) for one argument."""
    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    out = np.zeros_like(base[which])
    for idx in np.ndindex(out.shape):
        hi = [b.copy() for b in base]
        lo = [b.copy() for b in base]
        hi[which][idx] += h
        lo[which][idx] -= h
        out[idx] = (float(fn(*map(Tensor, hi)).data.sum()) - float(fn(*map(Tensor, lo)).data.sum())) / (2 * h)
    return out


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    for pad in (0, 1, 2):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, pad), rtol=1e-5, atol=1e-5)


def test_conv2d_identity_kernel_and_shape_errors():
    x = np.arange(2 * 4 * 4 * 1, dtype=np.float32).reshape(2, 4, 4, 1)
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[1, 1, 0, 0] = 1
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)), padding=1).data
    np.testing.assert_array_equal(out, x)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 2, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(x[0]), Tensor(w), Tensor(np.zeros(1, np.float32)))


def test_conv2d_gradients_match_central_differences():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 2))
    b = rng.standard_normal(2)
    probe = rng.standard_normal((1, 4, 4, 2)).astype(np.float32)

    def fn(x, w, b):
        y = T.conv2d(x, w, b, padding=1)
        return T.sum_all(T.dense(T.flatten(y), Tensor(probe.reshape(1, -1)), Tensor(np.zeros(1, np.float32))))

    analytic = _grad(fn, x, w, b)
    for i in range(3):
        np.testing.assert_allclose(analytic[i], _numeric(fn, [x, w, b], i), rtol=2e-2, atol=2e-2)


def test_dense_and_cross_entropy_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    labels = np.array([0, 3, 1])

    def fn(x, w, b):
        return T.softmax_cross_entropy(T.dense(x, w, b), labels, reduction="mean")

    analytic = _grad(fn, x, w, b)
    for i in range(3):
        np.testing.assert_allclose(analytic[i], _numeric(fn, [x, w, b], i), rtol=1e-2, atol=1e-3)


def test_cross_entropy_values_and_reductions():
    z = np.array([[0.0, 0.0], [np.log(3.0), 0.0]], np.float32)
    mean = T.softmax_cross_entropy(Tensor(z), np.array([0, 0])).item()
    total = T.softmax_cross_entropy(Tensor(z), np.array([0, 0]), reduction="sum").item()
    expected = [np.log(2.0), np.log(4.0 / 3.0)]
    assert mean == pytest.approx(np.mean(expected), rel=1e-6)
    assert total == pytest.approx(np.sum(expected), rel=1e-6)
    # a scalar label applies to every row
    assert T.softmax_cross_entropy(Tensor(z), 0, reduction="sum").item() == pytest.approx(total)
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(z), np.array([0, 2]))
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(z), np.array([0, 1]), reduction="max")


def test_cross_entropy_is_stable_for_huge_logits():
    z = Tensor(np.array([[1e4, -1e4, 0.0]], np.float32), requires_grad=True)
    with Tape():
        loss = T.softmax_cross_entropy(z, np.array([1]))
        T.backward(loss)
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(2e4, rel=1e-6)
    np.testing.assert_allclose(z.grad, [[1.0, -1.0, 0.0]], atol=1e-6)


def test_maxpool_forward_backward_and_first_corner_ties():
    x = np.array([[1, 5, 2, 2], [3, 4, 2, 2], [0, 0, 9, 1], [0, 0, 1, 1]], np.float32).reshape(1, 4, 4, 1)
    xt = Tensor(x, requires_grad=True)
    with Tape():
        y = T.maxpool2x2(xt)
        T.backward(T.sum_all(y))
    np.testing.assert_array_equal(y.data[0, :, :, 0], [[5, 2], [0, 9]])
    expected = np.zeros((4, 4), np.float32)
    expected[0, 1] = expected[0, 2] = expected[2, 0] = expected[2, 2] = 1
    np.testing.assert_array_equal(xt.grad[0, :, :, 0], expected)
    with pytest.raises(ShapeError):
        T.maxpool2x2(Tensor(np.zeros((1, 3, 4, 1), np.float32)))


def test_relu_gradient_is_zero_at_zero():
    x = Tensor(np.array([[-1.0, 0.0, 2.0]], np.float32), requires_grad=True)
    with Tape():
        T.backward(T.sum_all(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0, 0, 1]])


def test_add_sub_scale_pick_and_shared_inputs():
    a = Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
    b = Tensor(np.array([3.0, 5.0], np.float32), requires_grad=True)
    with Tape():
        # a appears twice, so its gradient must accumulate
        out = T.add(T.sum_all(T.scale(T.sub(a, b), 3.0)), T.pick(a, (1,)))
        T.backward(out)
    np.testing.assert_array_equal(a.grad, [3.0, 4.0])
    np.testing.assert_array_equal(b.grad, [-3.0, -3.0])
    with pytest.raises(ShapeError):
        T.pick(a, (5,))
    with pytest.raises(ShapeError):
        T.reshape(a, (3,))


def test_forward_op_dispatch():
    x = Tensor(np.array([[-1.0, 1.0]], np.float32))
    np.testing.assert_array_equal(T.forward_op("relu", x).data, [[0, 1]])
    with pytest.raises(ValueError):
        T.forward_op("softplus", x)


def test_tape_rules():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    # outside a tape nothing is recorded
    y = T.sum_all(x)
    assert not y.requires_grad
    with pytest.raises(TapeError):
        T.backward(y)
    with Tape() as tape:
        loss = T.sum_all(T.scale(x, 2.0))
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)
        with pytest.raises(TapeError):
            T.sum_all(x)
    assert len(tape) == 2
    with Tape():
        with pytest.raises(TapeError):
            T.backward(T.scale(x, 2.0))  # not a scalar


def test_no_recording_without_grad_inputs():
    with Tape() as tape:
        T.relu(Tensor(np.ones(2, np.float32)))
    assert len(tape) == 0


def test_tapes_are_thread_local():
    seen = {}

    def worker():
        seen["inner"] = T.current_tape()

    with Tape() as tape:
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        assert T.current_tape() is tape
    assert seen["inner"] is None
    assert T.current_tape() is None


def test_grad_wrt_input_is_independent_per_sample():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((10, 6)).astype(np.float32)

    def forward(x):
        return T.dense(x, Tensor(w), Tensor(np.zeros(10, np.float32)))

    x = rng.standard_normal((4, 6)).astype(np.float32)
    batch = T.grad_wrt_input(forward, x, 2)
    for i in range(4):
        np.testing.assert_allclose(batch[i], T.grad_wrt_input(forward, x[i:i + 1], 2)[0], rtol=1e-6)
    paired = T.grad_wrt_input(forward, x, 2, 5)
    np.testing.assert_allclose(paired, batch - T.grad_wrt_input(forward, x, 5), atol=1e-6)
    with pytest.raises(ValueError):
        T.grad_wrt_input(forward, x, 10)
    with pytest.raises(ValueError):
        T.grad_wrt_input(forward, x, 1.5)


def test_grad_wrt_input_of_constant_forward_is_zero():
    out = T.grad_wrt_input(lambda x: Tensor(np.zeros((2, 10), np.float32)), np.ones((2, 3), np.float32), 0)
    np.testing.assert_array_equal(out, np.zeros((2, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_is_linear_in_its_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
    x2 = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
    w = Tensor(rng.standard_normal((3, 3, 2, 3)).astype(np.float32))
    zero = Tensor(np.zeros(3, np.float32))

    def conv(x):
        return T.conv2d(Tensor(x), w, zero, padding=1).data.astype(np.float64)

    np.testing.assert_allclose(conv(a * x1 + b * x2), a * conv(x1) + b * conv(x2), atol=1e-3)
