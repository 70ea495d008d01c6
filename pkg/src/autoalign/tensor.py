"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive computes its value with numpy and, when any
input requires a gradient, appends an adjoint closure to the active
:class:`Tape`.  ``backward`` replays the tape in reverse record order.
A tape is consumed by ``backward`` and must be ``reset`` before reuse.
"""

import contextlib
import struct
import threading

import numpy as np

from .errors import DimensionError, NumericError, TapeError

__all__ = [
    "Tensor", "Tape", "get_tape", "use_tape", "no_grad", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "relu", "exp", "log",
    "sqrt", "sigmoid", "softplus", "smooth_l1", "abs_", "matmul", "transpose",
    "reshape", "concat", "stack", "sum_", "mean", "softmax", "log_softmax",
    "l2_normalize", "conv2d", "bilinear_sample", "bilinear_sample_many",
    "scatter_max", "take", "stopgrad", "detached", "grad_check",
    "tensor_to_bytes", "tensor_from_bytes", "save_tensor", "load_tensor",
]

L2_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of primitive applications and their adjoints."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, adjoint):
        if self.consumed:
            raise TapeError("tape was consumed by backward(); call reset() before recording")
        self.nodes.append((out, inputs, adjoint))

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, loss):
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("backward() called twice on the same tape without reset()")
        self.consumed = True
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        owners = {id(loss): loss}
        for out, inputs, adjoint in reversed(self.nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            out.grad = g
            for inp, gi in zip(inputs, adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        for key, t in owners.items():
            t.grad = grads[key]


_state = threading.local()


def get_tape():
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape):
    prev = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = getattr(_state, "disabled", False)
    _state.disabled = True
    try:
        yield
    finally:
        _state.disabled = prev


def backward(loss):
    get_tape().backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, inputs, adjoint):
    track = not getattr(_state, "disabled", False) and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        get_tape().record(out, inputs, adjoint)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(axis, ndim):
    if not -ndim <= axis < max(ndim, 1):
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % max(ndim, 1)


# ---------------------------------------------------------------------------
# elementwise


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(x):
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = _as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x):
    x = _as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x):
    x = _as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """log(1 + exp(x)), evaluated without overflow."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    return _make(out, (x,), lambda g: (g * _sigmoid(x.data),))


def smooth_l1(x, beta=1.0):
    x = _as_tensor(x)
    a = np.abs(x.data)
    small = a < beta
    out = np.where(small, 0.5 * x.data ** 2 / beta, a - 0.5 * beta)
    return _make(out, (x,), lambda g: (g * np.where(small, x.data / beta, np.sign(x.data)),))


# ---------------------------------------------------------------------------
# shape and reductions


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x, axes=None):
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat of an empty list")
    axis = _check_axis(axis, xs[0].ndim)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise DimensionError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def adjoint(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), adjoint)


def stack(xs, axis=0):
    xs = [_as_tensor(x) for x in xs]
    expanded = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(expanded, axis=axis)


def sum_(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), adjoint)


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[_check_axis(axis, x.ndim)]
    return scale(sum_(x, axis, keepdims), 1.0 / max(n, 1))


def take(x, key):
    """Indexing (basic or advanced); the adjoint scatters back with add."""
    x = _as_tensor(x)
    out = x.data[key]

    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, dtype=np.float64), (x,), adjoint)


# ---------------------------------------------------------------------------
# normalisations


def _check_finite(x, opname):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{opname}: non-finite input")


def softmax(x, axis=-1):
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x, axis=-1, eps=L2_EPS):
    """x / max(||x||, eps) along ``axis``."""
    x = _as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    floored = norm < eps
    denom = np.where(floored, eps, norm)
    out = x.data / denom

    def adjoint(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(floored, g / eps, (g - out * proj) / denom),)

    return _make(out, (x,), adjoint)


def _replay(make):
    """Value from ``make()``, or the one recorded at the unperturbed point inside grad_check."""
    frozen = getattr(_state, "stopgrad_frozen", None)
    if frozen is None:
        return make()
    values, cursor = frozen
    if cursor[0] >= len(values):
        values.append(make())
    value = values[cursor[0]]
    cursor[0] += 1
    return value


def stopgrad(x):
    """Same value, zero adjoint.

    The node stays on the tape so tensors reachable only through it end up
    with an explicit all-zero gradient rather than none.  Inside
    :func:`grad_check` the value is frozen at the unperturbed point, which
    is the function the adjoint actually differentiates.
    """
    x = _as_tensor(x)
    value = _replay(lambda: x.data.copy())
    return _make(value.copy(), (x,), lambda g: (np.zeros_like(x.data),))


def detached(obj):
    """Mark a non-tensor value derived from tensor data (boxes, selections) as constant.

    Outside :func:`grad_check` this is the identity.  Inside it, the value
    seen at the unperturbed point is returned on every perturbed evaluation,
    matching the adjoint, which treats such values as constants.
    """
    return _replay(lambda: obj)


# ---------------------------------------------------------------------------
# convolution and sampling


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of x [c_in, H, W] with w [c_out, c_in, k, k]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: incompatible input {x.shape} and weight {w.shape}")
    c_in, H, W = x.shape
    c_out, _, k, _ = w.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: non-positive output extent ({Ho}, {Wo}) for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # (c_in, k, k, Ho, Wo) flattened to match w.reshape(c_out, -1)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, Ho * Wo)
    wmat = w.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, Ho, Wo)
    inputs = (x, w)
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({c_out},)")
        out = out + b.data[:, None, None]
        inputs = (x, w, b)

    def adjoint(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, k, k, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i: i + (Ho - 1) * stride + 1: stride,
                        j: j + (Wo - 1) * stride + 1: stride] += gcols[:, i, j]
            gx = gxp[:, pad: pad + H, pad: pad + W] if pad else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make(out, inputs, adjoint)


def _bilinear_weights(h, w, us, vs):
    """Clamp-to-border neighbours and weights; u runs along w, v along h."""
    us = np.clip(np.asarray(us, dtype=np.float64), 0.0, w - 1)
    vs = np.clip(np.asarray(vs, dtype=np.float64), 0.0, h - 1)
    u0 = np.minimum(np.floor(us).astype(np.int64), max(w - 2, 0))
    v0 = np.minimum(np.floor(vs).astype(np.int64), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = us - u0
    dv = vs - v0
    idx = (v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1)
    wts = ((1 - dv) * (1 - du), (1 - dv) * du, dv * (1 - du), dv * du)
    return idx, wts


def bilinear_sample_many(fmap, us, vs):
    """Sample fmap [c, h, w] at n continuous points; returns [n, c]."""
    fmap = _as_tensor(fmap)
    if fmap.ndim != 3:
        raise DimensionError(f"bilinear_sample: feature map must be [c,h,w], got {fmap.shape}")
    c, h, w = fmap.shape
    idx, wts = _bilinear_weights(h, w, us, vs)
    flat = fmap.data.reshape(c, h * w)
    out = sum(flat[:, i].T * wt[:, None] for i, wt in zip(idx, wts))

    def adjoint(g):
        gf = np.zeros((c, h * w))
        for i, wt in zip(idx, wts):
            np.add.at(gf.T, i, g * wt[:, None])
        return (gf.reshape(c, h, w),)

    return _make(np.asarray(out, dtype=np.float64).reshape(len(idx[0]), c), (fmap,), adjoint)


def bilinear_sample(fmap, u, v):
    """Sample fmap [c, h, w] at column u, row v; returns [c]."""
    return reshape(bilinear_sample_many(fmap, [u], [v]), (_as_tensor(fmap).shape[0],))


def scatter_max(feats, index, n):
    """Group rows of feats [m, d] by index into n slots, elementwise max.

    Empty slots are zero.  The adjoint routes each slot's gradient to the
    first row attaining the maximum.
    """
    feats = _as_tensor(feats)
    index = np.asarray(index, dtype=np.int64)
    m, d = feats.shape
    out = np.zeros((n, d))
    if m == 0:
        return _make(out, (feats,), lambda g: (np.zeros((0, d)),))
    if index.shape != (m,) or index.min() < 0 or index.max() >= n:
        raise DimensionError(f"scatter_max: index must be [{m}] within [0, {n})")
    order = np.argsort(index, kind="stable")
    sidx = index[order]
    sf = feats.data[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    slots = sidx[starts]
    maxv = np.maximum.reduceat(sf, starts, axis=0)
    counts = np.diff(np.r_[starts, m])
    hit = sf == np.repeat(maxv, counts, axis=0)
    pos = np.where(hit, np.arange(m)[:, None], m)
    first = order[np.minimum.reduceat(pos, starts, axis=0)]
    out[slots] = maxv
    cols = np.broadcast_to(np.arange(d), first.shape)

    def adjoint(g):
        gf = np.zeros((m, d))
        gf[first, cols] = g[slots]
        return (gf,)

    return _make(out, (feats,), adjoint)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None):
    """Max relative error between tape gradients and central differences.

    ``f`` is a zero-argument callable rebuilding the scalar loss from the
    tensors in ``params``.  With ``max_entries`` only that many randomly
    chosen entries per tensor are perturbed.  Values passed through
    :func:`stopgrad` are replayed from the unperturbed evaluation.
    """
    params = list(params)
    tape = Tape()
    for p in params:
        p.grad = None
    frozen = ([], [0])
    prev = getattr(_state, "stopgrad_frozen", None)
    _state.stopgrad_frozen = frozen
    try:
        with use_tape(tape):
            loss = f()
            tape.backward(loss)
        return _numeric_compare(f, params, eps, max_entries, rng, frozen)
    finally:
        _state.stopgrad_frozen = prev


def _numeric_compare(f, params, eps, max_entries, rng, frozen):
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + eps
            frozen[1][0] = 0
            fp = _scalar(f)
            flat[i] = orig - eps
            frozen[1][0] = 0
            fm = _scalar(f)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite loss at perturbed entry {i}")
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def _scalar(f):
    with no_grad():
        return float(f().data.reshape(-1)[0])


# ---------------------------------------------------------------------------
# serialization: "AATN", u32 rank, u32 extents, float64 payload (little-endian)

MAGIC = b"AATN"


def tensor_to_bytes(t):
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f8").tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor; returns (Tensor, next_offset)."""
    if buf[offset: offset + 4] != MAGIC:
        raise ValueError("not an AATN tensor record")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    end = start + 8 * n
    if end > len(buf):
        raise ValueError(f"truncated AATN payload: need {end - start} bytes, have {len(buf) - start}")
    data = np.frombuffer(buf[start:end], dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(data), end


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        t, _ = tensor_from_bytes(fh.read())
    return t
