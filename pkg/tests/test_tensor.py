import numpy as np
import pytest

from slicer.tensor import (DomainError, GradientMap, ShapeError, Tape, TapeError,
                           Tensor, add, backward, concat, conv2d,
                           finite_diff_check, gather_rows, l2_normalize, log,
                           matmul, max_pool2d, mean, mul, relu, reshape, scale,
                           softmax, sub, tensor_max, tensor_sum, transpose)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(a, eye).data, [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_equal_values_symmetric():
    out = softmax(Tensor([[5.0, 5.0, 5.0]]), axis=1)
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_conv2d_1x1_kernel_doubles():
    x = Tensor(np.arange(12.0).reshape(1, 1, 3, 4))
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    b = Tensor(np.zeros(1))
    out = conv2d(x, w, b, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, 2.0 * x.data)


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.watch(Tensor(np.random.default_rng(0).normal(size=(3, 5))))
    grads = backward(tape, tensor_sum(x))
    np.testing.assert_array_equal(grads.of(x), np.ones((3, 5)))


def test_backward_dot_bilinear():
    tape = Tape()
    x = tape.watch(Tensor([1.0, 2.0]))
    y = tape.watch(Tensor([3.0, 4.0]))
    grads = backward(tape, tensor_sum(mul(x, y)))
    np.testing.assert_array_equal(grads.of(x), [3.0, 4.0])
    np.testing.assert_array_equal(grads.of(y), [1.0, 2.0])


def test_backward_log_softmax_entry():
    # d/dx log(softmax(x))[0] at x=[0,0] is [0.5, -0.5]
    def fn(t):
        probs = softmax(t, axis=0)
        picked = tensor_sum(mul(probs, Tensor([1.0, 0.0])))
        return log(picked)

    tape = Tape()
    x = tape.watch(Tensor([0.0, 0.0]))
    grads = backward(tape, fn(x))
    np.testing.assert_allclose(grads.of(x), [0.5, -0.5], rtol=0, atol=1e-12)
    # and the same value survives a finite-difference cross-check
    assert finite_diff_check(fn, np.zeros(2), step=1e-5) < 1e-6


def test_finite_diff_sum_of_squares():
    point = np.random.default_rng(1).normal(size=(4,))
    err = finite_diff_check(lambda t: tensor_sum(mul(t, t)), point, step=1e-5)
    assert err < 1e-6


def test_finite_diff_constant_zero():
    err = finite_diff_check(lambda t: tensor_sum(mul(t, Tensor(np.zeros(3)))),
                            np.ones(3), step=1e-5)
    assert err == 0.0


def test_tape_replay_bitwise_deterministic():
    rng = np.random.default_rng(7)
    x_val = rng.normal(size=(4, 6))
    w_val = rng.normal(size=(6, 3))

    def run():
        tape = Tape()
        x = tape.watch(Tensor(x_val.copy()))
        out = mean(relu(matmul(x, Tensor(w_val.copy()))))
        return out.data.copy(), backward(tape, out).of(x).copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(g1, g2)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=(5, 7)) * rng.uniform(0.1, 50)
        rows = softmax(Tensor(x), axis=1).data.sum(axis=1)
        np.testing.assert_allclose(rows, 1.0, rtol=0, atol=1e-9)


def test_softmax_stable_for_large_magnitudes():
    out = softmax(Tensor([[1e3, -1e3, 0.0]]), axis=1)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-9)


def test_l2_normalize_unit_rows_and_zero_row():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 6))
    x[2] = 0.0  # zero row must come back as zeros, not NaN
    tape = Tape()
    t = tape.watch(Tensor(x))
    out = l2_normalize(t, axis=1)
    norms = np.linalg.norm(out.data, axis=1)
    np.testing.assert_allclose(np.delete(norms, 2), 1.0, rtol=0, atol=1e-9)
    np.testing.assert_array_equal(out.data[2], np.zeros(6))
    grads = backward(tape, tensor_sum(out))
    np.testing.assert_array_equal(grads.of(t)[2], np.zeros(6))
    assert np.all(np.isfinite(grads.of(t)))


def test_scalar_broadcast_add():
    out = add(Tensor([[1.0, 2.0]]), Tensor(3.0))
    np.testing.assert_array_equal(out.data, [[4.0, 5.0]])


def test_gather_rows_accumulates_repeats():
    tape = Tape()
    x = tape.watch(Tensor(np.arange(6.0).reshape(3, 2)))
    out = gather_rows(x, np.array([1, 1, 0]))
    np.testing.assert_array_equal(out.data, [[2, 3], [2, 3], [0, 1]])
    grads = backward(tape, tensor_sum(out))
    np.testing.assert_array_equal(grads.of(x), [[1, 1], [2, 2], [0, 0]])


def test_max_pool_and_max_route_to_argmax():
    tape = Tape()
    x = tape.watch(Tensor([[1.0, 5.0], [2.0, 0.5]]))
    grads = backward(tape, tensor_max(x))
    np.testing.assert_array_equal(grads.of(x), [[0, 1], [0, 0]])

    tape = Tape()
    xp = tape.watch(Tensor(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2)))
    grads = backward(tape, tensor_sum(max_pool2d(xp, kernel=2, stride=2)))
    np.testing.assert_array_equal(grads.of(xp)[0, 0], [[0, 0], [1, 0]])


def test_shape_mismatch_names_primitive():
    with pytest.raises(ShapeError, match="add"):
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError, match="matmul"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        log(Tensor([-1.0]))


def test_backward_requires_scalar_on_tape():
    tape = Tape()
    x = tape.watch(Tensor(np.ones((2, 2))))
    vec = add(x, x)
    with pytest.raises(TapeError):
        backward(tape, vec)  # not a scalar
    off_tape = Tensor(5.0)
    with pytest.raises(TapeError):
        backward(tape, off_tape)  # never produced on this tape


def test_mixing_tapes_rejected():
    ta, tb = Tape(), Tape()
    a = ta.watch(Tensor(np.ones(3)))
    b = tb.watch(Tensor(np.ones(3)))
    with pytest.raises(TapeError):
        add(a, b)


def test_gradient_map_zero_for_untouched_leaf():
    tape = Tape()
    x = tape.watch(Tensor(np.ones(3)))
    y = tape.watch(Tensor(np.ones(3)))
    grads = backward(tape, tensor_sum(mul(x, x)))
    np.testing.assert_array_equal(grads.of(y), np.zeros(3))
    assert isinstance(grads, GradientMap)


def test_primitive_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 4)) * 100
    for out in (relu(Tensor(x)), softmax(Tensor(x), axis=1),
                l2_normalize(Tensor(x), axis=1), transpose(Tensor(x)),
                reshape(Tensor(x), (4, 3)), scale(Tensor(x), 2.5),
                sub(Tensor(x), Tensor(x)), mean(Tensor(x), axis=0),
                concat([Tensor(x), Tensor(x)], axis=0)):
        assert np.all(np.isfinite(out.data))
