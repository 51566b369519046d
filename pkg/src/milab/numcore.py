"""Dense float64 arithmetic with a small tape-based reverse mode.

Every primitive accepts plain ``numpy`` arrays or :class:`Var` handles.  When
no argument is a ``Var`` the primitive returns a plain array, so the same model
code serves inference, training and finite-difference checks.

    tape = Tape()
    w = tape.param(w0)
    loss = sum_(relu(matmul(x, w)))
    (gw,) = tape.backward(loss)
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, NumericError, ShapeError

__all__ = [
    "Tape",
    "Var",
    "as_matrix",
    "value_of",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sum_",
    "mean",
    "l2_normalize",
    "logsumexp",
    "softmax",
    "index",
    "reshape",
    "transpose",
    "concat",
    "batched_dot",
    "bmm",
    "permute",
    "bce_prob",
    "bce_logits",
    "grad_check",
]

PROB_CLAMP = 1e-12


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "idx")

    def __init__(self, value, tape, idx):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, idx={self.idx})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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
        return neg(self)

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    Parameters registered through :meth:`param` receive one adjoint each from
    :meth:`backward`, in registration order.
    """

    def __init__(self):
        self._values = []
        self._inputs = []
        self._backs = []
        self._params = []

    def __len__(self):
        return len(self._values)

    def param(self, value):
        value = np.asarray(value, dtype=np.float64)
        var = self._record(value, (), None)
        self._params.append(var)
        return var

    def params(self, values):
        return [self.param(v) for v in values]

    def _record(self, value, inputs, back):
        idx = len(self._values)
        self._values.append(value)
        self._inputs.append(inputs)
        self._backs.append(back)
        return Var(value, self, idx)

    def backward(self, out, wrt=None):
        """Adjoints of scalar ``out`` w.r.t. ``wrt`` (default: registered params)."""
        if not isinstance(out, Var) or out.tape is not self:
            raise ShapeError("backward needs a Var recorded on this tape")
        if out.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.value.shape}")
        wrt = self._params if wrt is None else wrt
        adj = [None] * (out.idx + 1)
        adj[out.idx] = np.ones_like(out.value)
        for i in range(out.idx, -1, -1):
            g = adj[i]
            back = self._backs[i]
            if g is None or back is None:
                continue
            inputs = self._inputs[i]
            needs = tuple(isinstance(x, Var) for x in inputs)
            grads = back(g, needs)
            for x, need, gx in zip(inputs, needs, grads):
                if not need or gx is None:
                    continue
                j = x.idx
                if j > out.idx:
                    continue
                adj[j] = gx if adj[j] is None else adj[j] + gx
        result = []
        for v in wrt:
            g = adj[v.idx] if v.idx <= out.idx else None
            result.append(np.zeros_like(v.value) if g is None else g)
        return result


def value_of(x):
    return x.value if isinstance(x, Var) else x


def as_matrix(x):
    """Coerce to a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise NumericError("matrix contains non-finite entries")
    return a


def _op(value, inputs, back):
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ShapeError("operands belong to different tapes")
    if tape is None:
        return value
    return tape._record(value, inputs, back)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    def back(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _op(av @ bv, (a, b), back)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None)

    return _op(av + bv, (a, b), back)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None)

    return _op(av - bv, (a, b), back)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)

    def back(g, needs):
        return (
            _unbroadcast(g * bv, sa) if needs[0] else None,
            _unbroadcast(g * av, sb) if needs[1] else None,
        )

    return _op(av * bv, (a, b), back)


def neg(a):
    return _op(-value_of(a), (a,), lambda g, needs: (-g,))


def scale(a, c):
    c = float(c)
    return _op(value_of(a) * c, (a,), lambda g, needs: (g * c,))


def relu(a):
    av = value_of(a)
    mask = av > 0
    return _op(np.where(mask, av, 0.0), (a,), lambda g, needs: (g * mask,))


def tanh(a):
    y = np.tanh(value_of(a))
    return _op(y, (a,), lambda g, needs: (g * (1.0 - y * y),))


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    av = np.asarray(value_of(a), dtype=np.float64)
    y = _sigmoid(np.atleast_1d(av)).reshape(av.shape)
    return _op(y, (a,), lambda g, needs: (g * y * (1.0 - y),))


def softplus(a):
    av = value_of(a)
    y = np.logaddexp(0.0, av)
    s = _sigmoid(np.atleast_1d(np.asarray(av, dtype=np.float64))).reshape(np.shape(av))
    return _op(y, (a,), lambda g, needs: (g * s,))


def exp(a):
    y = np.exp(value_of(a))
    return _op(y, (a,), lambda g, needs: (g * y,))


def log(a):
    av = value_of(a)
    return _op(np.log(av), (a,), lambda g, needs: (g / av,))


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    shape = av.shape

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op(np.sum(av, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_normalize(a, min_norm=1e-12):
    """Divide each row (last axis) by its Euclidean norm."""
    av = value_of(a)
    norm = np.sqrt(np.sum(av * av, axis=-1, keepdims=True))
    if np.any(norm < min_norm):
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    y = av / norm

    def back(g, needs):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _op(y, (a,), back)


def logsumexp(a, axis=-1):
    """Stable log-sum-exp along ``axis`` using the max shift."""
    av = value_of(a)
    if av.size == 0 or av.shape[axis] == 0:
        raise ShapeError("logsumexp of an empty vector")
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=axis)
    p = e / s

    def back(g, needs):
        return (np.expand_dims(g, axis) * p,)

    return _op(y, (a,), back)


def softmax(a, axis=-1):
    av = value_of(a)
    e = np.exp(av - np.max(av, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g, needs):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _op(y, (a,), back)


def index(a, key):
    """``a[key]`` for basic or integer-array keys; adjoint scatters with add."""
    av = value_of(a)

    def back(g, needs):
        out = np.zeros_like(av)
        np.add.at(out, key, g)
        return (out,)

    return _op(av[key], (a,), back)


def reshape(a, shape):
    av = value_of(a)
    old = av.shape
    return _op(av.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def transpose(a):
    av = value_of(a)
    return _op(av.T, (a,), lambda g, needs: (g.T,))


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _op(np.concatenate(vals, axis=axis), tuple(parts), back)


def batched_dot(a, b):
    """Row-wise dot products: (n, d) x (n, k, d) -> (n, k)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[1] != bv.shape[2]:
        raise ShapeError(f"batched_dot shapes {av.shape} and {bv.shape} do not compose")
    y = np.einsum("nd,nkd->nk", av, bv)

    def back(g, needs):
        ga = np.einsum("nk,nkd->nd", g, bv) if needs[0] else None
        gb = g[:, :, None] * av[:, None, :] if needs[1] else None
        return (ga, gb)

    return _op(y, (a, b), back)


def bmm(a, b):
    """Batched matrix product over a leading axis: (h, i, j) x (h, j, k) -> (h, i, k)."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 3 or bv.ndim != 3 or av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
        raise ShapeError(f"bmm shapes {av.shape} and {bv.shape} do not compose")

    def back(g, needs):
        ga = np.matmul(g, bv.transpose(0, 2, 1)) if needs[0] else None
        gb = np.matmul(av.transpose(0, 2, 1), g) if needs[1] else None
        return (ga, gb)

    return _op(np.matmul(av, bv), (a, b), back)


def permute(a, axes):
    av = value_of(a)
    inv = np.argsort(axes)
    return _op(av.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),))


def bce_prob(p, y):
    """Elementwise binary cross-entropy of probabilities, clamped to (0, 1)."""
    pv = np.clip(value_of(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(pv) + (1.0 - y) * np.log(1.0 - pv))

    def back(g, needs):
        return (g * (-(y / pv) + (1.0 - y) / (1.0 - pv)), None)

    return _op(loss, (p, y), back)


def bce_logits(z, y):
    """Binary cross-entropy computed from logits: softplus(z) - y z."""
    y = np.asarray(y, dtype=np.float64)
    return sub(softplus(z), mul(z, y))


def grad_check(scalar_fn, params, eps=1e-5, floor=1e-3):
    """Largest elementwise relative error between tape and central-difference gradients.

    ``scalar_fn`` maps a list of parameters (arrays or Vars) to a scalar.
    The error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    vars_ = tape.params(params)
    out = scalar_fn(vars_)
    if not np.all(np.isfinite(value_of(out))):
        raise NumericError("function value is not finite")
    if not isinstance(out, Var):
        adjoints = [np.zeros_like(p) for p in params]
    else:
        adjoints = tape.backward(out)
    worst = 0.0
    for k, p in enumerate(params):
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(scalar_fn(params)))
            flat[i] = orig - eps
            fm = float(np.sum(scalar_fn(params)))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("function value is not finite")
            num.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(adjoints[k]), np.abs(num)), floor)
        if num.size:
            worst = max(worst, float(np.max(np.abs(adjoints[k] - num) / denom)))
    return worst
