"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a backward closure on the output
tensor; creation order doubles as a topological order, so ``backward``
replays the recorded tape in reverse. Storage is row-major numpy, 32- or
64-bit depending on the global precision mode.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError

_DTYPES = {"single": np.float32, "double": np.float64}
_precision = "single"
_grad_enabled = True
_tid = itertools.count()


def set_precision(mode: str) -> None:
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'single' or 'double'")
    _precision = mode


def get_precision() -> str:
    return _precision


def float_dtype():
    return _DTYPES[_precision]


@contextlib.contextmanager
def precision(mode: str):
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'single' or 'double'")
    prev = _precision
    _precision = mode
    try:
        yield
    finally:
        _precision = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; forwards run value-only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=float_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = None
        self._backward = None
        self._tid = next(_tid)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def backward(self):
        """Accumulate gradients of this scalar into every upstream tensor."""
        if self.size != 1:
            raise DimensionError(f"backward requires a scalar, got shape {self.shape}")
        visited = {id(self): self}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._parents is None:
                continue
            for p in t._parents:
                if id(p) not in visited:
                    visited[id(p)] = p
                    stack.append(p)
        order = sorted((t for t in visited.values() if t._backward is not None),
                       key=lambda t: t._tid, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in order:
            if t.grad is None:
                continue
            for p, g in zip(t._parents, t._backward(t.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g


def _record(out: Tensor, parents, backward_fn):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _result(arr) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t._parents = None
    t._backward = None
    t._tid = next(_tid)
    return t


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = _result(a.data @ b.data)

    def bwd(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes incompatible: {x.shape} x {w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = _result(y)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gs = [g @ w.data.T if x.requires_grad else None,
              x.data.T @ g if w.requires_grad else None]
        if b is not None:
            gs.append(g.sum(axis=0).reshape(b.shape) if b.requires_grad else None)
        return gs

    return _record(out, parents, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a row vector broadcast over a's rows."""
    if a.shape == b.shape:
        out = _result(a.data + b.data)

        def bwd(g):
            return g, g

        return _record(out, (a, b), bwd)
    if a.ndim == 2 and b.ndim in (1, 2) and b.size == a.shape[1]:
        out = _result(a.data + b.data.reshape(1, -1))

        def bwd(g):
            return g, g.sum(axis=0).reshape(b.shape)

        return _record(out, (a, b), bwd)
    raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes incompatible: {a.shape} - {b.shape}")
    out = _result(a.data - b.data)

    def bwd(g):
        return g, -g

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    out = _result(a.data * b.data)

    def bwd(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = _result(a.data * s)

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0))

    def bwd(g):
        return (g * (a.data > 0),)

    return _record(out, (a,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) gaussian error linear unit."""
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = _result(a.data * phi)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (phi + a.data * pdf),)

    return _record(out, (a,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows requires 2-d input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _result(p)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), bwd)


def _mha_forward(qd, kd, vd, num_heads: int, collect):
    """Shared head-split attention kernel on raw arrays; returns (out, ctx)."""
    o, dim = qd.shape
    rows = kd.shape[0]
    d = dim // num_heads
    qh = qd.reshape(o, num_heads, d).transpose(1, 0, 2)
    kh = kd.reshape(rows, num_heads, d).transpose(1, 0, 2)
    vh = vd.reshape(rows, num_heads, d).transpose(1, 0, 2)
    s = qh @ kh.transpose(0, 2, 1) * (1.0 / math.sqrt(d))
    s -= np.maximum.reduce(s, axis=2, keepdims=True)
    e = np.exp(s)
    p = e / np.add.reduce(e, axis=2, keepdims=True)
    if collect is not None:
        collect.extend(p[h].copy() for h in range(num_heads))
    out = np.ascontiguousarray((p @ vh).transpose(1, 0, 2).reshape(o, dim))
    return out, (qh, kh, vh, p, d)


def _mha_backward(g, ctx):
    """Gradients of _mha_forward w.r.t. its three projected inputs."""
    qh, kh, vh, p, d = ctx
    o, dim = g.shape
    rows = kh.shape[1]
    num_heads = p.shape[0]
    gh = g.reshape(o, num_heads, d).transpose(1, 0, 2)
    gp = gh @ vh.transpose(0, 2, 1)
    gs = p * (gp - np.add.reduce(gp * p, axis=2, keepdims=True)) * (1.0 / math.sqrt(d))
    gq = (gs @ kh).transpose(1, 0, 2).reshape(o, dim)
    gk = (gs.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(rows, dim)
    gv = (p.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(rows, dim)
    return gq, gk, gv


def _check_attend_shapes(q, k, v, num_heads: int):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(
            f"attention requires 2-d inputs, got {q.shape}, {k.shape}, {v.shape}")
    dim = q.shape[1]
    if k.shape[1] != dim or v.shape != k.shape:
        raise DimensionError(
            f"attention shapes incompatible: q {q.shape}, k {k.shape}, v {v.shape}")
    if num_heads < 1 or dim % num_heads != 0:
        raise DimensionError(f"feature width {dim} not divisible into {num_heads} heads")


def attend_heads(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                 collect=None) -> Tensor:
    """Multi-head scaled dot-product attention as one tape node.

    The feature axis is split into num_heads equal slices; each head computes
    softmax(q_h k_hT / sqrt(d)) v_h and the heads are re-concatenated. Equals
    the composition of slice_axis / matmul / scale / softmax_rows / concat,
    fused because the composed graph dominates finite-difference runtime.
    `collect`, when given, receives a per-head copy of the weight matrix.
    """
    _check_attend_shapes(q, k, v, num_heads)
    arr, ctx = _mha_forward(q.data, k.data, v.data, num_heads, collect)
    out = _result(arr)

    def bwd(g):
        gq, gk, gv = _mha_backward(g, ctx)
        return (gq if q.requires_grad else None,
                gk if k.requires_grad else None,
                gv if v.requires_grad else None)

    return _record(out, (q, k, v), bwd)


def self_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                   num_heads: int, collect=None) -> Tensor:
    """Projections, attend_heads, and output projection fused into one node."""
    dim = h.shape[1]
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (dim, dim):
            raise DimensionError(
                f"self_attention {name} must be [{dim}, {dim}], got {w.shape}")
    if num_heads < 1 or dim % num_heads != 0:
        raise DimensionError(f"feature width {dim} not divisible into {num_heads} heads")
    qd, kd, vd = h.data @ wq.data, h.data @ wk.data, h.data @ wv.data
    mixed, ctx = _mha_forward(qd, kd, vd, num_heads, collect)
    out = _result(mixed @ wo.data)

    def bwd(g):
        gm = g @ wo.data.T
        gq, gk, gv = _mha_backward(gm, ctx)
        gh = None
        if h.requires_grad:
            gh = gq @ wq.data.T + gk @ wk.data.T + gv @ wv.data.T
        hT = h.data.T
        return (gh,
                hT @ gq if wq.requires_grad else None,
                hT @ gk if wk.requires_grad else None,
                hT @ gv if wv.requires_grad else None,
                mixed.T @ g if wo.requires_grad else None)

    return _record(out, (h, wq, wk, wv, wo), bwd)


def cross_attention(q: Tensor, h: Tensor, wk: Tensor, wv: Tensor,
                    num_heads: int, collect=None) -> Tensor:
    """Key/value projections of h fused with attend_heads from raw queries q."""
    dim = q.shape[1]
    if h.ndim != 2 or h.shape[1] != dim:
        raise DimensionError(
            f"cross_attention tokens must be [*, {dim}], got {h.shape}")
    for name, w in (("wk", wk), ("wv", wv)):
        if w.shape != (dim, dim):
            raise DimensionError(
                f"cross_attention {name} must be [{dim}, {dim}], got {w.shape}")
    if q.ndim != 2 or num_heads < 1 or dim % num_heads != 0:
        raise DimensionError(
            f"queries {q.shape} not divisible into {num_heads} heads")
    kd, vd = h.data @ wk.data, h.data @ wv.data
    arr, ctx = _mha_forward(q.data, kd, vd, num_heads, collect)
    out = _result(arr)

    def bwd(g):
        gq, gk, gv = _mha_backward(g, ctx)
        gh = None
        if h.requires_grad:
            gh = gk @ wk.data.T + gv @ wv.data.T
        hT = h.data.T
        return (gq if q.requires_grad else None, gh,
                hT @ gk if wk.requires_grad else None,
                hT @ gv if wv.requires_grad else None)

    return _record(out, (q, h, wk, wv), bwd)


def _ln_check(z_shape, z_ndim, gamma, beta, eps):
    if z_ndim != 2:
        raise DimensionError(f"layer_norm requires 2-d input, got {z_shape}")
    if gamma.size != z_shape[1] or beta.size != z_shape[1]:
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {z_shape[1]}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")


def _ln_forward(z, gamma_d, beta_d, eps):
    n = z.shape[1]
    mu = np.add.reduce(z, axis=1, keepdims=True) / n
    zc = z - mu
    var = np.add.reduce(zc * zc, axis=1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    y = zc * inv
    return y * gamma_d + beta_d, y, inv


def _ln_backward_input(g, y, inv, gamma_d):
    n = y.shape[1]
    gy = g * gamma_d
    return inv * (gy - np.add.reduce(gy, axis=1, keepdims=True) / n
                  - y * (np.add.reduce(gy * y, axis=1, keepdims=True) / n))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to mean 0 / variance 1, then apply affine gamma, beta."""
    _ln_check(x.shape, x.ndim, gamma, beta, eps)
    gamma_d = gamma.data.reshape(1, -1)
    arr, y, inv = _ln_forward(x.data, gamma_d, beta.data.reshape(1, -1), eps)
    out = _result(arr)

    def bwd(g):
        return (_ln_backward_input(g, y, inv, gamma_d) if x.requires_grad else None,
                (g * y).sum(axis=0).reshape(gamma.shape) if gamma.requires_grad else None,
                g.sum(axis=0).reshape(beta.shape) if beta.requires_grad else None)

    return _record(out, (x, gamma, beta), bwd)


def residual_layer_norm(res: Tensor, x: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float = 1e-5) -> Tensor:
    """layer_norm(res + x) as one node; equals the add / layer_norm composition."""
    if res.shape != x.shape:
        raise DimensionError(
            f"residual shapes incompatible: {res.shape} + {x.shape}")
    _ln_check(x.shape, x.ndim, gamma, beta, eps)
    gamma_d = gamma.data.reshape(1, -1)
    arr, y, inv = _ln_forward(res.data + x.data, gamma_d, beta.data.reshape(1, -1), eps)
    out = _result(arr)

    def bwd(g):
        gz = (_ln_backward_input(g, y, inv, gamma_d)
              if res.requires_grad or x.requires_grad else None)
        return (gz if res.requires_grad else None,
                gz if x.requires_grad else None,
                (g * y).sum(axis=0).reshape(gamma.shape) if gamma.requires_grad else None,
                g.sum(axis=0).reshape(beta.shape) if beta.requires_grad else None)

    return _record(out, (res, x, gamma, beta), bwd)


def augmented_linear(x: Tensor, extra: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of each row of x concatenated with one shared extra vector.

    Equals linear(concat([x, broadcast_row(extra, rows)], axis=1), w, b) but
    never materializes the tiled extra rows: the weight splits into a top
    block applied to x and a bottom block applied to the shared vector.
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] + extra.size != w.shape[0]:
        raise DimensionError(
            f"augmented_linear shapes incompatible: {x.shape} + {extra.shape} vs {w.shape}")
    split = x.shape[1]
    w_top = w.data[:split]
    w_bot = w.data[split:]
    shared = extra.data.reshape(1, -1) @ w_bot + b.data
    out = _result(x.data @ w_top + shared)

    def bwd(g):
        gsum = g.sum(axis=0)
        gw = None
        if w.requires_grad:
            gw = np.concatenate([x.data.T @ g,
                                 np.outer(extra.data.reshape(-1), gsum)], axis=0)
        return (g @ w_top.T if x.requires_grad else None,
                (w_bot @ gsum).reshape(extra.shape) if extra.requires_grad else None,
                gw,
                gsum.reshape(b.shape) if b.requires_grad else None)

    return _record(out, (x, extra, w, b), bwd)


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """linear, gelu, linear as one node; equals the composed route exactly."""
    if x.ndim != 2 or x.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(
            f"mlp shapes incompatible: {x.shape} x {w1.shape} x {w2.shape}")
    h1 = x.data @ w1.data + b1.data
    phi = 0.5 * (1.0 + erf(h1 * _INV_SQRT2))
    a = h1 * phi
    out = _result(a @ w2.data + b2.data)

    def bwd(g):
        ga = g @ w2.data.T
        pdf = _INV_SQRT2PI * np.exp(-0.5 * h1 * h1)
        gh1 = ga * (phi + h1 * pdf)
        return (gh1 @ w1.data.T if x.requires_grad else None,
                x.data.T @ gh1 if w1.requires_grad else None,
                gh1.sum(axis=0).reshape(b1.shape) if b1.requires_grad else None,
                a.T @ g if w2.requires_grad else None,
                g.sum(axis=0).reshape(b2.shape) if b2.requires_grad else None)

    return _record(out, (x, w1, b1, w2, b2), bwd)


# ---------------------------------------------------------------------------
# rearrangement


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(
                t.shape[i] != base[i] for i in range(len(base)) if i != axis):
            raise DimensionError(
                f"concat axis {axis}: shapes {base} and {t.shape} incompatible")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis))
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def bwd(g):
        sl = [slice(None)] * out.ndim
        pieces = []
        for i in range(len(extents)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return pieces

    return _record(out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if axis >= x.ndim or stop > x.shape[axis] or start < 0 or start >= stop:
        raise DimensionError(
            f"slice [{start}:{stop}] on axis {axis} invalid for shape {x.shape}")
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = _result(np.ascontiguousarray(x.data[key]))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _record(out, (x,), bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d requires 2-d input, got {x.shape}")
    out = _result(np.ascontiguousarray(x.data.T))

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _result(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.size,))


def broadcast_row(x: Tensor, rows: int) -> Tensor:
    """Repeat a single row vector into `rows` identical rows."""
    if x.size != max(x.shape) and x.ndim > 1:
        raise DimensionError(f"broadcast_row requires a vector, got {x.shape}")
    row = x.data.reshape(1, -1)
    out = _result(np.repeat(row, rows, axis=0))

    def bwd(g):
        return (g.sum(axis=0).reshape(x.shape),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.sum()))

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.data.mean()))

    def bwd(g):
        return (np.full_like(x.data, float(g) / x.size),)

    return _record(out, (x,), bwd)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of the target column per row.

    targets: int array of 0-based column indices, one per row.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, m = logits.shape
    if targets.shape != (n,):
        raise DimensionError(
            f"targets shape {targets.shape} does not match logits rows {n}")
    if targets.min() < 0 or targets.max() >= m:
        raise DimensionError(f"target index out of range for {m} columns")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(n), targets]
    out = _result(np.asarray(losses.mean()))

    def bwd(g):
        p = np.exp(z - lse)
        p[np.arange(n), targets] -= 1.0
        return (p * (float(g) / n),)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# initialization

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gaussian(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values in {what}")
    return t
