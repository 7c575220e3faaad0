"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every operation whose inputs include a watched
tensor.  Recording order is a topological order, so :func:`backward` simply
walks the tape in reverse.  Operations on untracked tensors (or plain
arrays) produce untracked constants and cost nothing on the tape.

Conventions: ``relu'(0) = 0``; dropout is inverted (scaled by
``1 / keep_prob`` during training).
"""

import numpy as np

from .errors import InputError, NumericError


class Tape:
    def __init__(self):
        self.nodes = []
        self.leaves = {}

    def watch(self, value, name=None):
        """Register ``value`` as a differentiable leaf and return its tensor."""
        t = Tensor(np.array(value, dtype=np.float64), tape=self)
        if name is None:
            name = f"param{len(self.leaves)}"
        if name in self.leaves:
            raise InputError(f"parameter {name!r} already watched")
        t.name = name
        self.leaves[name] = t
        self.nodes.append(t)
        return t

    def __len__(self):
        return len(self.nodes)

    def release(self):
        """Drop the recorded graph.  Tensors point back at their tape, so
        without this every step's intermediates wait for a full gc pass."""
        self.nodes = []


class Tensor:
    __slots__ = ("value", "tape", "parents", "vjp", "name", "index")

    def __init__(self, value, tape=None, parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = None
        self.index = len(tape.nodes) if tape is not None else -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.value.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return gather_rows(self, rows)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x):
    """Untracked tensor view of ``x``."""
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(value, parents, vjp):
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise InputError("operands are recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value)
    out = Tensor(value, tape=tape, parents=parents, vjp=vjp)
    tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InputError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def add_row(x, row):
    """Add a length-``cols`` vector to every row of ``x``."""
    x, row = as_tensor(x), as_tensor(row)
    if x.value.ndim != 2 or row.value.shape[-1] != x.value.shape[1]:
        raise InputError(f"cannot add row of shape {row.value.shape} to {x.value.shape}")
    return add(x, row)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _record(x.value * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise InputError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return _record(np.maximum(x.value, 0.0), (x,), lambda g: (g * mask,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return _record(out, (x,), lambda g: (g * out,))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.value.shape
    return _record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    x = as_tensor(x)
    return _record(x.value.T, (x,), lambda g: (g.T,))


def total(x, axis=None, keepdims=False):
    """Sum over ``axis`` (all entries when ``None``)."""
    x = as_tensor(x)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=np.float64), (x,), vjp)


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise NumericError(f"non-finite input to {what}")


def _lse(v, axis, keepdims=True):
    axis = axis % v.ndim
    k = v.shape[axis]
    if 0 < k <= 8:
        # short axes (class dimension): slice-wise ufuncs beat generic reductions
        parts = [np.take(v, [j], axis=axis) for j in range(k)]
        m = parts[0].copy()
        for part in parts[1:]:
            np.maximum(m, part, out=m)
        s = np.zeros_like(m)
        for part in parts:
            s += np.exp(part - m)
        out = m + np.log(s)
    else:
        m = np.max(v, axis=axis, keepdims=True)
        out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(x, axis=-1, keepdims=False):
    """Numerically stable ``log(sum(exp(x)))`` along ``axis``."""
    x = as_tensor(x)
    _check_finite(x.value, "logsumexp")
    out_k = _lse(x.value, axis)
    w = np.exp(x.value - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _record(out, (x,), vjp)


def log_softmax_rows(x):
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise InputError("log_softmax_rows expects a 2-D tensor")
    _check_finite(x.value, "log_softmax_rows")
    out = x.value - _lse(x.value, 1)
    soft = np.exp(out)
    return _record(out, (x,), lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# indexing


def _segment_sum_array(v, ids, num_segments):
    if v.ndim == 1:
        return np.bincount(ids, weights=v, minlength=num_segments).astype(np.float64)
    flat = v.reshape(v.shape[0], -1)
    if flat.shape[1] <= 32:
        out = np.empty((num_segments, flat.shape[1]))
        for k in range(flat.shape[1]):
            out[:, k] = np.bincount(ids, weights=flat[:, k], minlength=num_segments)
    else:
        out = np.zeros((num_segments, flat.shape[1]))
        np.add.at(out, ids, flat)
    return out.reshape((num_segments,) + v.shape[1:])


def gather_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.value.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise InputError("gather_rows index out of range")
    idx = np.where(idx < 0, idx + n, idx)
    return _record(x.value[idx], (x,), lambda g: (_segment_sum_array(g, idx, n),))


def segment_sum(x, segment_ids, num_segments):
    """``out[s] = sum of x[k] over k with segment_ids[k] == s``."""
    x = as_tensor(x)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape[0] != x.value.shape[0]:
        raise InputError("segment_ids length must match the leading dimension")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise InputError("segment id out of range")
    out = _segment_sum_array(x.value, ids, int(num_segments))
    return _record(out, (x,), lambda g: (g[ids],))


def pick(x, cols):
    """Row-wise selection ``out[k] = x[k, cols[k]]``."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.value.shape[0])
    if cols.shape != rows.shape:
        raise InputError("pick needs one column index per row")
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, cols] = g
        return (out,)

    return _record(x.value[rows, cols], (x,), vjp)


def dropout(x, keep_prob, rng):
    """Inverted dropout; identity when ``keep_prob == 1``."""
    if not (0.0 < keep_prob <= 1.0):
        raise InputError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    x = as_tensor(x)
    if keep_prob == 1.0:
        return x
    # keep probability quantized to 2**-16; scaling uses the realized value
    threshold = int(round(keep_prob * 65536))
    bits = np.frombuffer(rng.bytes(2 * x.value.size), dtype=np.uint16).reshape(x.value.shape)
    mask = (bits < threshold) * (65536.0 / threshold)
    return _record(x.value * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------


def backward(tape, output):
    """Gradients of scalar ``output`` with respect to every watched leaf.

    Returns ``{name: ndarray}``; leaves that do not influence the output get
    zeros.
    """
    if output.value.size != 1:
        raise InputError(f"backward needs a scalar output, got shape {output.value.shape}")
    grads = {}
    if output.tape is tape:
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(tape.nodes[:output.index + 1]):
            g = grads.pop(node.index, None) if node.vjp is not None else grads.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent.tape is None or pg is None:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
    return {name: grads.get(leaf.index, np.zeros_like(leaf.value))
            for name, leaf in tape.leaves.items()}


def grad_check(f, params, epsilon=1e-5, max_coords=None, rng=None, floor=1e-6):
    """Largest relative gap between tape and central-difference gradients.

    ``f(tape, tensors)`` must build a scalar from the watched ``tensors``
    (a dict mirroring ``params``) and be deterministic.  With ``max_coords``
    only a random subset of coordinates per parameter is probed.  The
    relative gap uses ``max(|analytic|, |numeric|, floor)`` as denominator so
    vanishing gradients are compared in absolute terms.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(p):
        return float(f(None, {k: constant(v) for k, v in p.items()}).value)

    tape = Tape()
    watched = {k: tape.watch(v, k) for k, v in params.items()}
    grads = backward(tape, f(tape, watched))

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, base in params.items():
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = rng.choice(base.size, size=max_coords, replace=False)
        for k in coords:
            plus = {n: v.copy() for n, v in params.items()}
            minus = {n: v.copy() for n, v in params.items()}
            plus[name].flat[k] += epsilon
            minus[name].flat[k] -= epsilon
            numeric = (value_at(plus) - value_at(minus)) / (2 * epsilon)
            analytic = grads[name].flat[k]
            denom = max(abs(analytic), abs(numeric), floor)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
