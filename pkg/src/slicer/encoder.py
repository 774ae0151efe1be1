"""Small convolutional encoder with a momentum-averaged twin.

Architecture (input F x T log-mel spectrogram, one channel):

    conv 3x3 stride 2 pad 1 -> relu -> maxpool 2x2
    conv 3x3 stride 2 pad 1 -> relu -> maxpool 2x2
    flatten -> linear -> relu -> linear -> embedding (embed_dim)

Stride-2 convolutions keep a training step cheap enough for repeated
desk-scale runs on one core. The teacher is a structural copy of the student
updated only through ema_update; its forward passes never join a tape, so no
gradient ever reaches it.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, conv2d, gather_rows, matmul, max_pool2d,
                     relu, reshape)


@dataclass
class EncoderConfig:
    input_shape: tuple                 # (F, T) of incoming spectrograms
    embed_dim: int = 256
    channels: tuple = (32, 64)
    hidden: int = 512
    conv_stride: int = 2

    def validate(self):
        f_dim, t_dim = self.input_shape
        if f_dim < 8 or t_dim < 8:
            raise ValueError(f"input_shape too small for the conv stack: {self.input_shape}")
        if self.embed_dim < 1 or self.hidden < 1:
            raise ValueError("embed_dim and hidden must be >= 1")


def _conv_out(size, stride):
    return (size + 2 - 3) // stride + 1  # 3x3 kernel, padding 1


def _pool_out(size):
    return size // 2


def flat_size(cfg: EncoderConfig):
    f_dim, t_dim = cfg.input_shape
    for _ in cfg.channels:
        f_dim, t_dim = _pool_out(_conv_out(f_dim, cfg.conv_stride)), \
            _pool_out(_conv_out(t_dim, cfg.conv_stride))
    if f_dim < 1 or t_dim < 1:
        raise ValueError(f"input_shape {cfg.input_shape} collapses to zero in the conv stack")
    return cfg.channels[-1] * f_dim * t_dim


class EncoderParams:
    """Named parameter tensors plus the config that fixes their shapes."""

    def __init__(self, cfg: EncoderConfig, tensors: dict):
        self.cfg = cfg
        self.tensors = tensors

    def copy(self, requires_grad: bool) -> "EncoderParams":
        return EncoderParams(self.cfg, {
            name: Tensor(t.data.copy(), requires_grad=requires_grad)
            for name, t in self.tensors.items()})


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(cfg: EncoderConfig, rng, requires_grad: bool = True) -> EncoderParams:
    """Fan-in uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    cfg.validate()
    tensors = {}
    in_ch = 1
    for i, out_ch in enumerate(cfg.channels, start=1):
        fan_in = in_ch * 9
        tensors[f"conv{i}/w"] = Tensor(_uniform(rng, (out_ch, in_ch, 3, 3), fan_in),
                                       requires_grad=requires_grad)
        tensors[f"conv{i}/b"] = Tensor(_uniform(rng, (out_ch,), fan_in),
                                       requires_grad=requires_grad)
        in_ch = out_ch
    dims = [flat_size(cfg), cfg.hidden, cfg.embed_dim]
    for i in range(2):
        tensors[f"fc{i + 1}/w"] = Tensor(_uniform(rng, (dims[i], dims[i + 1]), dims[i]),
                                         requires_grad=requires_grad)
        tensors[f"fc{i + 1}/b"] = Tensor(_uniform(rng, (1, dims[i + 1]), dims[i]),
                                         requires_grad=requires_grad)
    return EncoderParams(cfg, tensors)


def _affine(x, w, b_row, tape):
    # bias held as a (1, d) tensor; gather replicates it per batch row so the
    # backward pass is a plain scatter-add (no broadcasting primitive needed)
    n = x.data.shape[0]
    bias = gather_rows(b_row, np.zeros(n, dtype=np.int64), tape=tape)
    return add(matmul(x, w, tape=tape), bias, tape=tape)


def encoder_forward(params: EncoderParams, batch, tape=None) -> Tensor:
    """Embed a batch: (N, F, T) array or Tensor -> (N, embed_dim) Tensor.

    Pass tape=None for a stop-gradient (teacher) forward.
    """
    cfg = params.cfg
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    if data.ndim != 3 or data.shape[1:] != tuple(cfg.input_shape):
        raise ValueError(
            f"expected batch shaped (N, {cfg.input_shape[0]}, {cfg.input_shape[1]}), "
            f"got {data.shape}")
    n = data.shape[0]
    x = batch if isinstance(batch, Tensor) else Tensor(data)
    x = reshape(x, (n, 1, cfg.input_shape[0], cfg.input_shape[1]), tape=tape)
    for i in range(1, len(cfg.channels) + 1):
        x = conv2d(x, params.tensors[f"conv{i}/w"], params.tensors[f"conv{i}/b"],
                   stride=cfg.conv_stride, padding=1, tape=tape)
        x = relu(x, tape=tape)
        x = max_pool2d(x, kernel=2, stride=2, tape=tape)
    x = reshape(x, (n, flat_size(cfg)), tape=tape)
    x = relu(_affine(x, params.tensors["fc1/w"], params.tensors["fc1/b"], tape), tape=tape)
    return _affine(x, params.tensors["fc2/w"], params.tensors["fc2/b"], tape)


@dataclass
class StudentTeacher:
    student: EncoderParams
    teacher: EncoderParams
    momentum: float = 0.99


def init_student_teacher(cfg: EncoderConfig, seed: int,
                         momentum: float = 0.99) -> StudentTeacher:
    """Student from seeded init; teacher starts as an exact copy."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    student = init_encoder(cfg, np.random.default_rng(seed), requires_grad=True)
    return StudentTeacher(student, student.copy(requires_grad=False), momentum)


def ema_update(pair: StudentTeacher) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise, in place."""
    m = pair.momentum
    for name, t in pair.teacher.tensors.items():
        t.data[...] = m * t.data + (1.0 - m) * pair.student.tensors[name].data
