"""Dense row-major tensors with per-op reverse-mode gradients.

Every op takes :class:`Tensor` arguments, computes its forward value with numpy
(or the compiled row kernels for products), rejects non-finite results and, when
gradient tracking is on, records a closure mapping the output gradient to input
gradients.  :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates into :attr:`Parameter.grad`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .exceptions import DimensionError, NonFiniteError, ProbeError

DTYPES = (np.float32, np.float64)

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def set_num_threads(n):
    """Cap the worker count used by the compiled kernels."""
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def get_num_threads():
    return numba.get_num_threads()


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value in output")
    return arr


def _as_array(x, dtype=None):
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An immutable array value plus its place in the gradient graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Parameter):
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Parameter(Tensor):
    """A named, optionally trainable leaf.  Gradients accumulate until zeroed."""

    __slots__ = ("name", "grad", "trainable")

    def __init__(self, data, name="", trainable=True):
        super().__init__(np.array(data, copy=True), requires_grad=True)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def value(self):
        return self.data

    def assign(self, values):
        values = np.asarray(values, dtype=self.dtype)
        if values.shape != self.shape:
            raise DimensionError(f"{self.name}: cannot assign {values.shape} to {self.shape}")
        self.data[...] = values

    def __repr__(self):
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {flag})"


def zero_grads(params):
    for p in params:
        p.grad[...] = 0


def constant(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(_as_array(x, dtype))


def make_op(data, op, parents, backward):
    """Wrap a forward value; record ``backward`` if any parent needs grads."""
    _check_finite(data, op)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


# -- products ---------------------------------------------------------------

def mm(a, b):
    """Deterministic ndarray product through the row kernel."""
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dtype)
    if a.shape[1] == 0:
        out[...] = 0
    elif out.size:
        _kernels.mm_dense(a, b, out)
    return out


def matmul(a, b):
    a, b = constant(a), constant(b)
    out = mm(a.data, b.data)

    def backward(g):
        ga = mm(g, b.data.T) if a.requires_grad else None
        gb = mm(a.data.T, g) if b.requires_grad else None
        return ga, gb

    return make_op(out, "matmul", (a, b), backward)


# -- elementwise --------------------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_bias(x, bias):
    """x[n, d] + bias[d] broadcast over rows."""
    x, bias = constant(x), constant(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: {x.shape} and {bias.shape}")
    return make_op(x.data + bias.data, "add_bias", (x, bias), lambda g: (g, g.sum(axis=0)))


def mul(a, b):
    a, b = constant(a), constant(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    x = constant(x)
    return make_op(x.data * c, "scale", (x,), lambda g: (g * c,))


def total(x):
    x = constant(x)
    return make_op(np.asarray(x.data.sum()), "sum", (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sigmoid_array(x):
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x):
    x = constant(x)
    s = sigmoid_array(x.data)
    return make_op(x.data * s, "silu", (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


# -- row-local normalisers -----------------------------------------------------

def rmsnorm(x, gain, eps=1e-6):
    """Per row: x / sqrt(mean(x**2) + eps) * gain."""
    x, gain = constant(x), constant(gain)
    if x.data.ndim != 2 or gain.shape != (x.shape[1],):
        raise DimensionError(f"rmsnorm: {x.shape} with gain {gain.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=1, keepdims=True) + eps)
    xhat = x.data * r
    out = xhat * gain.data

    def backward(g):
        dgain = (g * xhat).sum(axis=0)
        dxh = g * gain.data
        dx = r * (dxh - xhat * np.mean(dxh * xhat, axis=1, keepdims=True))
        return dx, dgain

    return make_op(out, "rmsnorm", (x, gain), backward)


def softmax_array(x, inplace=False):
    z = x if inplace else x.copy()
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows(x):
    x = constant(x)
    y = softmax_array(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, "softmax_rows", (x,), backward)


# -- indexing ----------------------------------------------------------------

def embedding(table, ids):
    """Rows of ``table`` selected by integer ``ids``."""
    table = constant(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: id out of range for table of {table.shape[0]} rows")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return make_op(table.data[ids], "embedding", (table,), backward)


def concat_rows(parts):
    parts = [constant(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(widths)}")
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=0))

    return make_op(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts, backward)


def take_rows(x, rows):
    x = constant(x)
    rows = np.asarray(rows, dtype=np.int64)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, rows, g)
        return (dx,)

    return make_op(x.data[rows], "take_rows", (x,), backward)


# -- attention ----------------------------------------------------------------

def causal_attention(qkv, n_heads, scale_factor, chunk=128):
    """Multi-head causal softmax(a * q k^T) v over a packed [n, 3d] projection.

    Queries are processed in row chunks; chunk c only sees keys up to its last
    row, so the score buffer is at most heads x chunk x n.
    """
    qkv = constant(qkv)
    n, three_d = qkv.shape
    if three_d % 3:
        raise DimensionError(f"causal_attention: width {three_d} is not 3*d")
    d = three_d // 3
    if d % n_heads:
        raise DimensionError(f"causal_attention: d={d} not divisible by {n_heads} heads")
    hd = d // n_heads
    heads = qkv.data.reshape(n, 3, n_heads, hd).transpose(1, 2, 0, 3)
    q, k, v = heads[0], heads[1], heads[2]
    out = np.empty((n_heads, n, hd), dtype=qkv.dtype)
    saved = []
    track = is_grad_enabled() and qkv.requires_grad
    upper = np.triu(np.full((chunk, chunk), -np.inf, dtype=qkv.dtype), k=1)
    for r0 in range(0, n, chunk):
        r1 = min(r0 + chunk, n)
        s = np.matmul(q[:, r0:r1], k[:, :r1].transpose(0, 2, 1))
        s *= scale_factor
        # only the diagonal tile holds future keys
        s[:, :, r0:r1] += upper[: r1 - r0, : r1 - r0]
        p = softmax_array(s, inplace=True)
        out[:, r0:r1] = np.matmul(p, v[:, :r1])
        if track:
            saved.append((r0, r1, p))
    merged = out.transpose(1, 0, 2).reshape(n, d)

    def backward(g):
        go = g.reshape(n, n_heads, hd).transpose(1, 0, 2)
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for r0, r1, p in saved:
            goc = go[:, r0:r1]
            dv[:, :r1] += np.matmul(p.transpose(0, 2, 1), goc)
            dp = np.matmul(goc, v[:, :r1].transpose(0, 2, 1))
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale_factor
            dq[:, r0:r1] = np.matmul(ds, k[:, :r1])
            dk[:, :r1] += np.matmul(ds.transpose(0, 2, 1), q[:, r0:r1])
        packed = np.stack([dq, dk, dv]).transpose(2, 0, 1, 3).reshape(n, three_d)
        return (packed,)

    return make_op(merged, "causal_attention", (qkv,), backward)


# -- losses -------------------------------------------------------------------

def weighted_nll(logits, targets, weights):
    """sum_i w_i * -log softmax(logits_i)[targets_i] / sum_i w_i."""
    logits = constant(logits)
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    wsum = weights.sum()
    if wsum <= 0:
        raise DimensionError("weighted_nll: no positive weights")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    nll = lse - z[rows, targets]
    loss = np.asarray((weights * nll).sum() / wsum)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (weights / wsum)[:, None] * g,)

    return make_op(loss, "weighted_nll", (logits,), backward)


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    worst: tuple = ("", -1)
    per_param: dict = field(default_factory=dict)
    n_probes: int = 0

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _scalar(out):
    val = out.data if isinstance(out, Tensor) else np.asarray(out)
    if val.size != 1:
        raise DimensionError(f"grad_check: f must return a scalar, got shape {val.shape}")
    return float(val.reshape(()))


def grad_check(f, params, h=1e-5, tol=1e-5, max_entries=None, floor=1e-4, seed=0):
    """Compare analytic gradients of ``f()`` with central differences.

    The error of one entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from dividing by rounding noise.
    ``max_entries`` caps probes per parameter (sampled without replacement).
    """
    rng = np.random.default_rng(seed)
    zero_grads(params)
    out = f()
    _scalar(out)
    out.backward()
    analytic = {id(p): p.grad.copy() for p in params}

    report = GradCheckReport(0.0, tol)
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_flat = analytic[id(p)].reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                try:
                    fp = _scalar(f())
                    flat[i] = orig - h
                    fm = _scalar(f())
                except NonFiniteError as exc:
                    raise ProbeError(f"{p.name}[{i}]: {exc}") from exc
                finally:
                    flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ProbeError(f"{p.name}[{i}]: f is not finite at the probe point")
            num = (fp - fm) / (2.0 * h)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            report.n_probes += 1
            if err > worst:
                worst = err
            if err > report.max_rel_err:
                report.max_rel_err = float(err)
                report.worst = (p.name, int(i))
        report.per_param[p.name or str(id(p))] = float(worst)
    zero_grads(params)
    return report
