import numpy as np
import pytest

from slicer.encoder import (EncoderConfig, ema_update, encoder_forward,
                            init_encoder, init_student_teacher)
from slicer.tensor import Tape, ShapeError, backward, mean, mul, sub, tensor_sum

CFG = EncoderConfig(input_shape=(32, 24), embed_dim=16, hidden=32)


def _batch(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, *CFG.input_shape))


def test_forward_shape():
    params = init_encoder(CFG, np.random.default_rng(1))
    out = encoder_forward(params, _batch(5))
    assert out.shape == (5, CFG.embed_dim)
    assert np.all(np.isfinite(out.data))


def test_duplicate_samples_give_duplicate_rows():
    params = init_encoder(CFG, np.random.default_rng(2))
    batch = _batch(3)
    batch[2] = batch[0]
    out = encoder_forward(params, batch).data
    assert np.array_equal(out[0], out[2])
    assert not np.array_equal(out[0], out[1])


def test_forward_rejects_wrong_input_shape():
    params = init_encoder(CFG, np.random.default_rng(3))
    with pytest.raises((ShapeError, ValueError)):
        encoder_forward(params, np.zeros((2, 16, 16)))


def test_init_deterministic_and_teacher_equals_student():
    pair_a = init_student_teacher(CFG, seed=7)
    pair_b = init_student_teacher(CFG, seed=7)
    for name, t in pair_a.student.tensors.items():
        assert np.array_equal(t.data, pair_b.student.tensors[name].data)
        assert np.array_equal(t.data, pair_a.teacher.tensors[name].data)
    pair_c = init_student_teacher(CFG, seed=8)
    assert not np.array_equal(pair_a.student.tensors["conv1/w"].data,
                              pair_c.student.tensors["conv1/w"].data)


def test_ema_update_is_exact_affine_combination():
    pair = init_student_teacher(CFG, seed=9, momentum=0.99)
    rng = np.random.default_rng(10)
    for t in pair.student.tensors.values():
        t.data += rng.normal(size=t.data.shape)  # detach student from teacher
    before = {n: t.data.copy() for n, t in pair.teacher.tensors.items()}
    ema_update(pair)
    m = pair.momentum
    for name, t in pair.teacher.tensors.items():
        expected = m * before[name] + (1.0 - m) * pair.student.tensors[name].data
        assert np.array_equal(t.data, expected)


def test_teacher_receives_no_gradient():
    pair = init_student_teacher(CFG, seed=11)
    batch = _batch(3, seed=12)
    tape = Tape()
    for t in pair.student.tensors.values():
        tape.watch(t)
    student_out = encoder_forward(pair.student, batch, tape=tape)
    teacher_out = encoder_forward(pair.teacher, batch)  # tapeless by contract
    assert teacher_out.tape is None
    loss = mean(mul(student_out, sub(student_out, teacher_out)))
    grads = backward(tape, loss)
    for t in pair.teacher.tensors.values():
        assert t not in grads
        np.testing.assert_array_equal(grads.of(t), np.zeros_like(t.data))
    assert any(np.any(grads.of(t) != 0) for t in pair.student.tensors.values())


def test_params_copy_is_independent():
    params = init_encoder(CFG, np.random.default_rng(13))
    clone = params.copy(requires_grad=False)
    clone.tensors["fc2/w"].data += 1.0
    assert not np.array_equal(params.tensors["fc2/w"].data,
                              clone.tensors["fc2/w"].data)


def test_gradient_flows_to_every_parameter():
    params = init_encoder(CFG, np.random.default_rng(14))
    tape = Tape()
    for t in params.tensors.values():
        tape.watch(t)
    out = encoder_forward(params, _batch(2, seed=15), tape=tape)
    grads = backward(tape, tensor_sum(mul(out, out)))
    for name, t in params.tensors.items():
        assert np.any(grads.of(t) != 0), f"no gradient reached {name}"


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(input_shape=(4, 4)).validate()
    with pytest.raises(ValueError):
        EncoderConfig(input_shape=(32, 32), embed_dim=0).validate()
