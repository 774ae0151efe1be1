"""Dense float64 tensors with a reverse-mode gradient tape.

Everything downstream (encoder, losses, probe) is built from the primitive
set in this module. Arrays are numpy float64 throughout; a Tensor is
immutable once created except for in-place optimizer updates, which must
happen between tape lifetimes.
"""

import itertools

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's shape rule."""


class DomainError(ValueError):
    """Input values outside a primitive's documented domain (e.g. log of x <= 0)."""


class TapeError(RuntimeError):
    """Misuse of the tape: mixed tapes, non-scalar loss, loss not on tape."""


_ids = itertools.count()


class Tensor:
    """A dense n-d array, optionally participating in a gradient tape.

    ``tape`` is set exactly when the tensor was produced by a recorded
    primitive or registered via :meth:`Tape.watch`; it is how downstream
    primitives discover the active tape.
    """

    __slots__ = ("data", "requires_grad", "tape", "id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; all routed through apply_primitive
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeRecord:
    __slots__ = ("op", "input_ids", "output_id", "vjp")

    def __init__(self, op, input_ids, output_id, vjp):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Records are appended in creation order, so every input id precedes its
    output id and a single reversed sweep visits each record exactly once.
    A tape is a single-threaded context; run distinct tapes on distinct
    threads if concurrency is wanted.
    """

    def __init__(self):
        self.records = []
        self._leaf_ids = set()
        self._output_ids = set()

    def watch(self, tensor):
        """Register ``tensor`` as a differentiable leaf of this tape."""
        if tensor.tape is not None and tensor.tape is not self:
            raise TapeError("tensor already belongs to another tape")
        tensor.requires_grad = True
        tensor.tape = self
        self._leaf_ids.add(tensor.id)
        return tensor

    def _register_leaf(self, tensor):
        self._leaf_ids.add(tensor.id)

    def _record(self, op, inputs, output, vjp):
        for t in inputs:
            if t.tape is None and t.requires_grad:
                self._register_leaf(t)
        rec = TapeRecord(op, tuple(t.id for t in inputs), output.id, vjp)
        self.records.append(rec)
        self._output_ids.add(output.id)
        output.tape = self
        output.requires_grad = True


class GradientMap:
    """Gradients keyed by tensor id; shapes always match their parameters."""

    def __init__(self, grads):
        self._grads = grads

    def __contains__(self, tensor):
        return tensor.id in self._grads

    def __len__(self):
        return len(self._grads)

    def of(self, tensor):
        """Gradient for ``tensor``, zeros if it did not participate."""
        g = self._grads.get(tensor.id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def ids(self):
        return set(self._grads)


# ---------------------------------------------------------------------------
# primitive registry


_PRIMITIVES = {}


def _primitive(name):
    def deco(fn):
        _PRIMITIVES[name] = fn
        return fn

    return deco


def apply_primitive(kind, inputs, tape=None, **params):
    """Apply primitive ``kind`` to ``inputs``, recording on a tape if one is live.

    The tape is either passed explicitly or inherited from the inputs;
    feeding tensors from two different tapes into one primitive is an error.
    The application is recorded when a tape is present and at least one
    input participates (is on the tape or is a requires_grad leaf).
    """
    fwd = _PRIMITIVES.get(kind)
    if fwd is None:
        raise KeyError(f"unknown primitive {kind!r}")
    tapes = {t.tape for t in inputs if t.tape is not None}
    if tape is not None:
        tapes.add(tape)
    if len(tapes) > 1:
        raise TapeError(f"{kind}: inputs span multiple tapes")
    active = tapes.pop() if tapes else None

    if active is None:
        needs = tuple(False for _ in inputs)
    else:
        needs = tuple(t.tape is active or t.requires_grad for t in inputs)

    out_data, vjp = fwd(needs, *[t.data for t in inputs], **params)
    out = Tensor(out_data)
    if active is not None and any(needs):
        active._record(kind, inputs, out, vjp)
    return out


def _shape_check(op, condition, *shapes):
    if not condition:
        raise ShapeError(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


def _binary_shapes_ok(a, b):
    # exact match, or scalar-with-tensor (0-d against anything)
    return a.shape == b.shape or a.shape == () or b.shape == ()


def _unbroadcast(g, shape):
    # collapse a scalar-with-tensor broadcast back to the 0-d operand
    if shape == () and g.shape != ():
        return np.sum(g)
    return g


# ---------------------------------------------------------------------------
# elementwise and scalar primitives


@_primitive("add")
def _p_add(needs, a, b):
    _shape_check("add", _binary_shapes_ok(a, b), a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return a + b, vjp


@_primitive("sub")
def _p_sub(needs, a, b):
    _shape_check("sub", _binary_shapes_ok(a, b), a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return a - b, vjp


@_primitive("mul")
def _p_mul(needs, a, b):
    _shape_check("mul", _binary_shapes_ok(a, b), a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return a * b, vjp


@_primitive("div")
def _p_div(needs, a, b):
    # domain: b must be nonzero everywhere (not checked per element)
    _shape_check("div", _binary_shapes_ok(a, b), a.shape, b.shape)

    def vjp(g):
        return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * a / (b * b), b.shape) if needs[1] else None)

    return a / b, vjp


@_primitive("scale")
def _p_scale(needs, a, c):
    def vjp(g):
        return (g * c if needs[0] else None,)

    return a * c, vjp


@_primitive("relu")
def _p_relu(needs, a):
    mask = a > 0

    def vjp(g):
        return (g * mask if needs[0] else None,)

    return np.where(mask, a, 0.0), vjp


@_primitive("exp")
def _p_exp(needs, a):
    out = np.exp(a)

    def vjp(g):
        return (g * out if needs[0] else None,)

    return out, vjp


@_primitive("log")
def _p_log(needs, a):
    if np.any(a <= 0.0):
        raise DomainError("log: input must be strictly positive")

    def vjp(g):
        return (g / a if needs[0] else None,)

    return np.log(a), vjp


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(a, axis):
    return tuple(range(a.ndim)) if axis is None else (axis,)


@_primitive("sum")
def _p_sum(needs, a, axis=None):
    ax = _axis_tuple(a, axis)

    def vjp(g):
        if not needs[0]:
            return (None,)
        g_exp = np.expand_dims(g, ax) if a.ndim else g
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return np.sum(a, axis=ax), vjp


@_primitive("mean")
def _p_mean(needs, a, axis=None):
    ax = _axis_tuple(a, axis)
    count = int(np.prod([a.shape[i] for i in ax])) if a.ndim else 1

    def vjp(g):
        if not needs[0]:
            return (None,)
        g_exp = np.expand_dims(g, ax) if a.ndim else g
        return (np.broadcast_to(g_exp, a.shape).copy() / count,)

    return np.mean(a, axis=ax), vjp


@_primitive("max")
def _p_max(needs, a, axis=None):
    ax = _axis_tuple(a, axis)
    out = np.max(a, axis=ax)

    def vjp(g):
        if not needs[0]:
            return (None,)
        out_exp = np.expand_dims(out, ax) if a.ndim else out
        g_exp = np.expand_dims(g, ax) if a.ndim else g
        # ties split the gradient between maximizers (subgradient choice)
        mask = (a == out_exp).astype(np.float64)
        mask /= np.sum(mask, axis=ax, keepdims=True)
        return (mask * g_exp,)

    return out, vjp


# ---------------------------------------------------------------------------
# normalizations


@_primitive("softmax")
def _p_softmax(needs, a, axis):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        if not needs[0]:
            return (None,)
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return out, vjp


@_primitive("l2_normalize")
def _p_l2_normalize(needs, a, axis):
    norm = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    safe = np.where(norm == 0.0, 1.0, norm)
    out = a / safe

    def vjp(g):
        if not needs[0]:
            return (None,)
        dot = np.sum(g * out, axis=axis, keepdims=True)
        dx = (g - out * dot) / safe
        # zero rows stay zero with zero gradient
        return (np.where(norm == 0.0, 0.0, dx),)

    return out, vjp


# ---------------------------------------------------------------------------
# structure


@_primitive("matmul")
def _p_matmul(needs, a, b):
    _shape_check("matmul",
                 a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0],
                 a.shape, b.shape)

    def vjp(g):
        return (g @ b.T if needs[0] else None,
                a.T @ g if needs[1] else None)

    return a @ b, vjp


@_primitive("transpose")
def _p_transpose(needs, a):
    _shape_check("transpose", a.ndim == 2, a.shape)

    def vjp(g):
        return (g.T.copy() if needs[0] else None,)

    return a.T.copy(), vjp


@_primitive("reshape")
def _p_reshape(needs, a, shape):
    _shape_check("reshape",
                 int(np.prod(shape)) == a.size, a.shape, tuple(shape))

    def vjp(g):
        return (g.reshape(a.shape) if needs[0] else None,)

    return a.reshape(shape), vjp


@_primitive("concat")
def _p_concat(needs, *arrays, axis=0):
    base = list(arrays[0].shape)
    for arr in arrays[1:]:
        other = list(arr.shape)
        ok = len(other) == len(base) and all(
            o == b for i, (o, b) in enumerate(zip(other, base)) if i != axis)
        _shape_check("concat", ok, arrays[0].shape, arr.shape)
    sizes = [arr.shape[axis] for arr in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if needs[i] else None for i, p in enumerate(pieces))

    return np.concatenate(arrays, axis=axis), vjp


@_primitive("gather_rows")
def _p_gather_rows(needs, a, indices):
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        if not needs[0]:
            return (None,)
        out = np.zeros_like(a)
        np.add.at(out, idx, g)
        return (out,)

    return a[idx], vjp


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp, kh, kw, stride):
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = windows.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


@_primitive("conv2d")
def _p_conv2d(needs, x, w, b, stride=1, padding=0):
    """NCHW x OIHW convolution with bias, explicit stride and zero padding."""
    _shape_check("conv2d", x.ndim == 4 and w.ndim == 4 and b.ndim == 1
                 and x.shape[1] == w.shape[1] and b.shape[0] == w.shape[0],
                 x.shape, w.shape, b.shape)
    n, _, h, wd = x.shape
    co, ci, kh, kw = w.shape
    _shape_check("conv2d", h + 2 * padding >= kh and wd + 2 * padding >= kw,
                 x.shape, w.shape)
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = w.reshape(co, ci * kh * kw)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)

    def vjp(g):
        g_rows = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        gw = (g_rows.T @ cols).reshape(w.shape) if needs[1] else None
        gb = np.sum(g_rows, axis=0) if needs[2] else None
        gx = None
        if needs[0]:
            dcols = (g_rows @ wmat).reshape(n, ho, wo, ci, kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (gx, gw, gb)

    return np.ascontiguousarray(out), vjp


@_primitive("max_pool2d")
def _p_max_pool2d(needs, x, kernel=2, stride=2):
    """Non-overlapping max pool with floor semantics (trailing rows/cols dropped)."""
    _shape_check("max_pool2d", x.ndim == 4 and x.shape[2] >= kernel
                 and x.shape[3] >= kernel, x.shape)
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kernel, kernel),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    ).reshape(n, c, ho, wo, kernel * kernel)
    flat_idx = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, flat_idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        if not needs[0]:
            return (None,)
        gi, gj = np.divmod(flat_idx, kernel)
        ni, ci_, hi, wi = np.indices((n, c, ho, wo))
        dx = np.zeros_like(x)
        # routes to the first argmax; windows may overlap when stride < kernel
        np.add.at(dx, (ni, ci_, hi * stride + gi, wi * stride + gj), g)
        return (dx,)

    return np.ascontiguousarray(out), vjp


# ---------------------------------------------------------------------------
# public op wrappers


def add(a, b, tape=None):
    return apply_primitive("add", [a, b], tape=tape)


def sub(a, b, tape=None):
    return apply_primitive("sub", [a, b], tape=tape)


def mul(a, b, tape=None):
    return apply_primitive("mul", [a, b], tape=tape)


def div(a, b, tape=None):
    return apply_primitive("div", [a, b], tape=tape)


def scale(a, c, tape=None):
    return apply_primitive("scale", [a], tape=tape, c=float(c))


def relu(a, tape=None):
    return apply_primitive("relu", [a], tape=tape)


def exp(a, tape=None):
    return apply_primitive("exp", [a], tape=tape)


def log(a, tape=None):
    return apply_primitive("log", [a], tape=tape)


def tensor_sum(a, axis=None, tape=None):
    return apply_primitive("sum", [a], tape=tape, axis=axis)


def mean(a, axis=None, tape=None):
    return apply_primitive("mean", [a], tape=tape, axis=axis)


def tensor_max(a, axis=None, tape=None):
    return apply_primitive("max", [a], tape=tape, axis=axis)


def softmax(a, axis, tape=None):
    return apply_primitive("softmax", [a], tape=tape, axis=axis)


def l2_normalize(a, axis, tape=None):
    return apply_primitive("l2_normalize", [a], tape=tape, axis=axis)


def matmul(a, b, tape=None):
    return apply_primitive("matmul", [a, b], tape=tape)


def transpose(a, tape=None):
    return apply_primitive("transpose", [a], tape=tape)


def reshape(a, shape, tape=None):
    return apply_primitive("reshape", [a], tape=tape, shape=tuple(shape))


def concat(tensors, axis=0, tape=None):
    return apply_primitive("concat", list(tensors), tape=tape, axis=axis)


def gather_rows(a, indices, tape=None):
    return apply_primitive("gather_rows", [a], tape=tape, indices=indices)


def conv2d(x, w, b, stride=1, padding=0, tape=None):
    return apply_primitive("conv2d", [x, w, b], tape=tape,
                           stride=stride, padding=padding)


def max_pool2d(x, kernel=2, stride=2, tape=None):
    return apply_primitive("max_pool2d", [x], tape=tape,
                           kernel=kernel, stride=stride)


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle


def backward(tape, loss):
    """Reverse sweep over the tape, returning gradients for every leaf touched.

    ``loss`` must be a scalar tensor produced on ``tape``.
    """
    if loss.data.shape != ():
        raise TapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    if loss.id not in tape._output_ids:
        raise TapeError("loss was not produced on this tape")

    grads = {loss.id: np.ones(())}
    for rec in reversed(tape.records):
        g_out = grads.get(rec.output_id)
        if g_out is None:
            continue
        input_grads = rec.vjp(g_out)
        for tid, ig in zip(rec.input_ids, input_grads):
            if ig is None:
                continue
            acc = grads.get(tid)
            grads[tid] = ig if acc is None else acc + ig

    return GradientMap({tid: grads[tid] for tid in tape._leaf_ids if tid in grads})


def finite_diff_check(fn, point, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor and must be evaluable at the
    perturbed points. The relative error at each coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(point.data if isinstance(point, Tensor) else point,
                      dtype=np.float64)

    tape = Tape()
    leaf = tape.watch(Tensor(base.copy()))
    out = fn(leaf)
    if not np.isfinite(out.data):
        raise DomainError("fn returned a non-finite value at the base point")
    analytic = backward(tape, out).of(leaf)

    numeric = np.zeros_like(base)
    flat = base.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(base.copy())).item()
        flat[i] = orig - step
        lo = fn(Tensor(base.copy())).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise DomainError("fn returned a non-finite value while probing")
        num_flat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
