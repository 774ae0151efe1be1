"""Finite-difference validation of every primitive and every loss.

Analytic gradients from the tape are compared against central differences at
randomly drawn points. Functions with kinks (relu, max, max-pooling) or
domain edges (div, log, normalization) are sampled with a safety margin so no
probe crosses a non-smooth point. The same suite backs both the test suite
and the command-line entry point.
"""

from dataclasses import dataclass

import numpy as np

from . import losses
from .seeding import derive_seed
from .tensor import (Tensor, add, concat, conv2d, div, exp, finite_diff_check,
                     gather_rows, l2_normalize, log, matmul, max_pool2d, mean,
                     mul, relu, reshape, scale, softmax, sub, tensor_max,
                     tensor_sum, transpose)

DEFAULT_POINTS = 100
DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    points: int

    @property
    def passed(self):
        return self.max_rel_err < TOLERANCE


def _weights(rng, shape):
    return rng.normal(size=shape)


def _reduce(out, w):
    # random linear functional -> scalar, so every output coordinate matters
    return tensor_sum(mul(out, Tensor(w)))


def _away_from_zero(rng, shape, margin):
    u = rng.normal(size=shape)
    s = np.where(u >= 0.0, 1.0, -1.0)
    return s * (np.abs(u) + margin)


def _distinct(rng, shape, gap=0.15):
    # pairwise gaps >= gap/3 so FD probes never flip an argmax
    n = int(np.prod(shape))
    vals = rng.permutation(n) * gap + rng.uniform(-gap / 3.0, gap / 3.0, size=n)
    return (vals + rng.normal() * 0.5).reshape(shape)


def _elementwise_pair(op, rng, shape=(3, 4), margin=None):
    draw = (lambda: _away_from_zero(rng, shape, margin)) if margin is not None \
        else (lambda: rng.normal(size=shape))
    a, b, w = draw(), draw(), _weights(rng, shape)
    return [
        (lambda t: _reduce(op(t, Tensor(b)), w), a),
        (lambda t: _reduce(op(Tensor(a), t), w), b),
    ]


def _chk_add(rng):
    return _elementwise_pair(add, rng)


def _chk_sub(rng):
    return _elementwise_pair(sub, rng)


def _chk_mul(rng):
    return _elementwise_pair(mul, rng)


def _chk_div(rng):
    return _elementwise_pair(div, rng, margin=0.5)


def _chk_scale(rng):
    x, w = rng.normal(size=(3, 4)), _weights(rng, (3, 4))
    c = float(rng.normal())
    return [(lambda t: _reduce(scale(t, c), w), x)]


def _chk_relu(rng):
    x = _away_from_zero(rng, (3, 4), 0.05)
    w = _weights(rng, (3, 4))
    return [(lambda t: _reduce(relu(t), w), x)]


def _chk_exp(rng):
    x, w = rng.normal(size=(3, 4)) * 0.5, _weights(rng, (3, 4))
    return [(lambda t: _reduce(exp(t), w), x)]


def _chk_log(rng):
    x = 0.1 + np.abs(rng.normal(size=(3, 4)))
    w = _weights(rng, (3, 4))
    return [(lambda t: _reduce(log(t), w), x)]


def _axis_variants(op, rng, point, shapes):
    out = []
    for axis, out_shape in shapes:
        w = _weights(rng, out_shape)
        out.append((lambda t, a=axis, w=w: _reduce(op(t, axis=a), w), point))
    return out


def _chk_sum(rng):
    return _axis_variants(tensor_sum, rng, rng.normal(size=(3, 4)),
                          [(None, ()), (0, (4,)), (1, (3,))])


def _chk_mean(rng):
    return _axis_variants(mean, rng, rng.normal(size=(3, 4)),
                          [(None, ()), (0, (4,)), (1, (3,))])


def _chk_max(rng):
    return _axis_variants(tensor_max, rng, _distinct(rng, (3, 4)),
                          [(None, ()), (0, (4,)), (1, (3,))])


def _chk_softmax(rng):
    point = rng.normal(size=(3, 4))
    return _axis_variants(softmax, rng, point, [(0, (3, 4)), (1, (3, 4))])


def _chk_l2_normalize(rng):
    x = rng.normal(size=(3, 4))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x * (norms + 0.5) / norms  # keep every row norm >= 0.5
    w = _weights(rng, (3, 4))
    return [(lambda t: _reduce(l2_normalize(t, axis=1), w), x)]


def _chk_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = _weights(rng, (3, 2))
    return [
        (lambda t: _reduce(matmul(t, Tensor(b)), w), a),
        (lambda t: _reduce(matmul(Tensor(a), t), w), b),
    ]


def _chk_transpose(rng):
    x, w = rng.normal(size=(3, 4)), _weights(rng, (4, 3))
    return [(lambda t: _reduce(transpose(t), w), x)]


def _chk_reshape(rng):
    x, w = rng.normal(size=(3, 4)), _weights(rng, (2, 6))
    return [(lambda t: _reduce(reshape(t, (2, 6)), w), x)]


def _chk_concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    w0, w1 = _weights(rng, (4, 3)), _weights(rng, (2, 6))
    return [
        (lambda t: _reduce(concat([t, Tensor(b)], axis=0), w0), a),
        (lambda t: _reduce(concat([Tensor(a), t], axis=1), w1), b),
    ]


def _chk_gather_rows(rng):
    x = rng.normal(size=(4, 3))
    idx = rng.integers(0, 4, size=6)  # repeats exercise the scatter-add
    w = _weights(rng, (6, 3))
    return [(lambda t: _reduce(gather_rows(t, idx), w), x)]


def _chk_conv2d(rng):
    out = []
    for stride in (1, 2):
        x = rng.normal(size=(1, 2, 5, 6))
        wgt = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2,))
        ho = (5 + 2 - 3) // stride + 1
        wo = (6 + 2 - 3) // stride + 1
        w = _weights(rng, (1, 2, ho, wo))
        out.extend([
            (lambda t, s=stride, wgt=wgt, b=b, w=w:
             _reduce(conv2d(t, Tensor(wgt), Tensor(b), stride=s, padding=1), w), x),
            (lambda t, s=stride, x=x, b=b, w=w:
             _reduce(conv2d(Tensor(x), t, Tensor(b), stride=s, padding=1), w), wgt),
            (lambda t, s=stride, x=x, wgt=wgt, w=w:
             _reduce(conv2d(Tensor(x), Tensor(wgt), t, stride=s, padding=1), w), b),
        ])
    return out


def _chk_max_pool2d(rng):
    x = _distinct(rng, (1, 2, 6, 8), gap=0.05)
    w = _weights(rng, (1, 2, 3, 4))
    return [(lambda t: _reduce(max_pool2d(t, kernel=2, stride=2), w), x)]


PRIMITIVE_CHECKS = [
    ("add", _chk_add), ("sub", _chk_sub), ("mul", _chk_mul), ("div", _chk_div),
    ("scale", _chk_scale), ("relu", _chk_relu), ("exp", _chk_exp), ("log", _chk_log),
    ("sum", _chk_sum), ("mean", _chk_mean), ("max", _chk_max),
    ("softmax", _chk_softmax), ("l2_normalize", _chk_l2_normalize),
    ("matmul", _chk_matmul), ("transpose", _chk_transpose),
    ("reshape", _chk_reshape), ("concat", _chk_concat),
    ("gather_rows", _chk_gather_rows), ("conv2d", _chk_conv2d),
    ("max_pool2d", _chk_max_pool2d),
]


# ---------------------------------------------------------------------------
# loss checks: gradients w.r.t. the student-side inputs on a 4 x 6 batch


def _split_views(packed, n):
    # a single (2n, C) leaf split into the two student views so one FD pass
    # covers both inputs
    a = gather_rows(packed, np.arange(n))
    b = gather_rows(packed, np.arange(n, 2 * n))
    return a, b


def _chk_loss_instance(rng):
    cfg = losses.ContrastiveConfig()
    anchor = rng.normal(size=(4, 6))
    target = Tensor(rng.normal(size=(4, 6)))
    return [(lambda t: losses.instance_info_nce(t, target, cfg), anchor)]


def _chk_loss_instance_k(rng):
    cfg = losses.ContrastiveConfig(num_negatives=2)
    anchor = rng.normal(size=(4, 6))
    target = Tensor(rng.normal(size=(4, 6)))
    return [(lambda t: losses.instance_info_nce(t, target, cfg), anchor)]


def _chk_loss_symmetric(rng):
    cfg = losses.ContrastiveConfig()
    packed = rng.normal(size=(8, 6))
    ta, tb = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))

    def fn(t):
        sa, sb = _split_views(t, 4)
        return losses.symmetric_instance_loss(sa, sb, ta, tb, cfg)
    return [(fn, packed)]


def _chk_loss_cluster(rng):
    cfg = losses.ContrastiveConfig()
    packed = rng.normal(size=(8, 6))

    def fn(t):
        sa, sb = _split_views(t, 4)
        return losses.cluster_contrastive_loss(sa, sb, cfg)
    return [(fn, packed)]


def _chk_loss_total(rng):
    cfg = losses.ContrastiveConfig()
    packed = rng.normal(size=(8, 6))
    ta, tb = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))

    def fn(t):
        sa, sb = _split_views(t, 4)
        return losses.total_loss(sa, sb, ta, tb, cfg)
    return [(fn, packed)]


LOSS_CHECKS = [
    ("loss/instance", _chk_loss_instance),
    ("loss/instance_k", _chk_loss_instance_k),
    ("loss/symmetric", _chk_loss_symmetric),
    ("loss/cluster", _chk_loss_cluster),
    ("loss/total", _chk_loss_total),
]


def run_check(name, factory, points=DEFAULT_POINTS, seed=0, step=DEFAULT_STEP):
    worst = 0.0
    for p in range(points):
        rng = np.random.default_rng(derive_seed(seed, f"gradcheck:{name}:{p}"))
        for fn, point in factory(rng):
            worst = max(worst, finite_diff_check(fn, point, step=step))
    return CheckResult(name, worst, points)


def run_suite(points=DEFAULT_POINTS, seed=0, step=DEFAULT_STEP,
              include_losses=True):
    """All checks; returns a list of CheckResult, one per primitive/loss."""
    checks = list(PRIMITIVE_CHECKS) + (list(LOSS_CHECKS) if include_losses else [])
    return [run_check(name, factory, points=points, seed=seed, step=step)
            for name, factory in checks]
