"""Reverse-mode automatic differentiation over dense float64 arrays.

Small, explicit engine: every operation records its parents and a closure
that accumulates gradients. Broadcasting is restricted to the leading-batch
case (one operand's shape must be a suffix of the other's), which keeps
gradient reduction unambiguous.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "DomainError",
    "add", "sub", "mul", "div", "neg", "scale", "matmul",
    "reshape", "transpose", "rows", "embed", "tile_batch", "index_last", "stack_last",
    "tsum", "tmean", "masked_mean",
    "softmax", "layer_norm", "gelu", "relu", "sigmoid",
    "exp", "log", "sqrt", "power", "absolute", "clamp",
    "minimum", "maximum",
    "l2_norm", "unit", "cosine_sim", "arccos",
    "primitive_forward", "backward", "linearize",
    "grad_check", "GradCheckReport", "PRIMITIVES", "ARCCOS_CLAMP_WIDTH",
]

# arccos inputs are clamped to [-1 + width, 1 - width] so the derivative
# stays finite; forward-only geometry helpers clamp to the exact interval.
ARCCOS_CLAMP_WIDTH = 1e-7

LAYER_NORM_EPS = 1e-5


class ShapeMismatchError(ValueError):
    """Raised when operand shapes violate a primitive's broadcasting rule."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))


class DomainError(ValueError):
    """Raised when an input lies outside a primitive's valid domain."""


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 value with an optional gradient slot.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    everything produced by an op carries the closure needed for backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(big) > len(small) and tuple(big[len(big) - len(small):]) != tuple(small):
        raise ShapeMismatchError(op, sa, sb)
    if len(sa) == len(sb) and sa != sb:
        raise ShapeMismatchError(op, sa, sb)


def _reduce_to(g, shape):
    """Sum gradient over leading axes introduced by broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


def _finite_check(op, out):
    if not np.all(np.isfinite(out)):
        raise DomainError(f"{op}: non-finite values in output")
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b):
    _check_broadcast("add", a, b)
    out_data = a.data + b.data

    def bw(g, a=a, b=b):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(g, b.shape))

    return Tensor(out_data, op="add", _parents=(a, b), _backward=bw)


def sub(a, b):
    _check_broadcast("sub", a, b)
    out_data = a.data - b.data

    def bw(g, a=a, b=b):
        _accumulate(a, _reduce_to(g, a.shape))
        _accumulate(b, _reduce_to(-g, b.shape))

    return Tensor(out_data, op="sub", _parents=(a, b), _backward=bw)


def mul(a, b):
    _check_broadcast("mul", a, b)
    out_data = a.data * b.data

    def bw(g, a=a, b=b):
        _accumulate(a, _reduce_to(g * b.data, a.shape))
        _accumulate(b, _reduce_to(g * a.data, b.shape))

    return Tensor(out_data, op="mul", _parents=(a, b), _backward=bw)


def div(a, b):
    _check_broadcast("div", a, b)
    out_data = a.data / b.data

    def bw(g, a=a, b=b):
        _accumulate(a, _reduce_to(g / b.data, a.shape))
        _accumulate(b, _reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(out_data, op="div", _parents=(a, b), _backward=bw)


def neg(a):
    def bw(g, a=a):
        _accumulate(a, -g)

    return Tensor(-a.data, op="neg", _parents=(a,), _backward=bw)


def scale(a, c):
    c = float(c)

    def bw(g, a=a, c=c):
        _accumulate(a, g * c)

    return Tensor(a.data * c, op="scale", _parents=(a,), _backward=bw)


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    la, lb = a.shape[:-2], b.shape[:-2]
    small, big = (la, lb) if len(la) <= len(lb) else (lb, la)
    if len(big) > len(small) and tuple(big[len(big) - len(small):]) != tuple(small):
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if len(la) == len(lb) and la != lb:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out_data = a.data @ b.data

    def bw(g, a=a, b=b):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _reduce_to(ga, a.shape))
        _accumulate(b, _reduce_to(gb, b.shape))

    return Tensor(out_data, op="matmul", _parents=(a, b), _backward=bw)


def reshape(a, shape):
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def bw(g, a=a):
        _accumulate(a, g.reshape(a.shape))

    return Tensor(out_data, op="reshape", _parents=(a,), _backward=bw)


def transpose(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def bw(g, a=a, inv=inv):
        _accumulate(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), op="transpose", _parents=(a,), _backward=bw)


def tile_batch(a, n):
    """Repeat a tensor along a new leading batch axis; gradient sums back."""
    out_data = np.broadcast_to(a.data, (int(n),) + a.shape).copy()

    def bw(g, a=a):
        _accumulate(a, g.sum(axis=0))

    return Tensor(out_data, op="tile_batch", _parents=(a,), _backward=bw)


def rows(a, idx):
    """Gather rows along axis 0; gradient scatters back with accumulation."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def bw(g, a=a, idx=idx):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accumulate(a, buf)

    return Tensor(out_data, op="rows", _parents=(a,), _backward=bw)


def stack_last(tensors):
    """Stack same-shape tensors along a new trailing axis."""
    out_data = np.stack([t.data for t in tensors], axis=-1)

    def bw(g, tensors=tuple(tensors)):
        for i, t in enumerate(tensors):
            _accumulate(t, g[..., i])

    return Tensor(out_data, op="stack_last", _parents=tuple(tensors), _backward=bw)


def index_last(a, i):
    """Select one index along the last axis, dropping it."""
    i = int(i)
    out_data = a.data[..., i]

    def bw(g, a=a, i=i):
        buf = np.zeros_like(a.data)
        buf[..., i] = g
        _accumulate(a, buf)

    return Tensor(out_data, op="index_last", _parents=(a,), _backward=bw)


def embed(table, ids):
    """Token-id lookup into an embedding table (ids may be any shape)."""
    if table.ndim != 2:
        raise ShapeMismatchError("embed", table.shape, np.shape(ids))
    ids = np.asarray(ids, dtype=np.intp)
    out_data = table.data[ids]

    def bw(g, table=table, ids=ids):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, buf)

    return Tensor(out_data, op="embed", _parents=(table,), _backward=bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None):
    out_data = a.data.sum(axis=axis)

    def bw(g, a=a, axis=axis):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return Tensor(out_data, op="sum", _parents=(a,), _backward=bw)


def tmean(a, axis=None):
    n = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis)

    def bw(g, a=a, axis=axis, n=n):
        if axis is None:
            _accumulate(a, np.full_like(a.data, g / n))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return Tensor(out_data, op="mean", _parents=(a,), _backward=bw)


def masked_mean(a, mask, axis):
    """Mean over ``axis`` with constant 0/1 weights (e.g. padding masks)."""
    mask = _as_array(mask)
    if mask.shape != a.shape[: mask.ndim]:
        raise ShapeMismatchError("masked_mean", a.shape, mask.shape)
    w = mask
    while w.ndim < a.ndim:
        w = w[..., None]
    counts = np.maximum(mask.sum(axis=axis), 1.0)
    cdiv = counts
    while cdiv.ndim < a.ndim - 1:
        cdiv = cdiv[..., None]
    out_data = (a.data * w).sum(axis=axis) / cdiv

    def bw(g, a=a, w=w, axis=axis, cdiv=cdiv):
        _accumulate(a, np.expand_dims(g / cdiv, axis) * w)

    return Tensor(out_data, op="masked_mean", _parents=(a,), _backward=bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations (fused, hand-written gradients)
# ---------------------------------------------------------------------------

def softmax(a):
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g, a=a, y=out_data):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - inner))

    return Tensor(out_data, op="softmax", _parents=(a,), _backward=bw)


def layer_norm(a, gain=None, bias=None, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def bw(g, a=a, xhat=xhat, inv=inv):
        n = a.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (g - gm - xhat * gx))
        del n

    out = Tensor(xhat, op="layer_norm", _parents=(a,), _backward=bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact Gaussian-error-linear unit: 0.5 x (1 + erf(x / sqrt 2))."""
    cdf = 0.5 * (1.0 + erf(a.data / math.sqrt(2.0)))
    out_data = a.data * cdf

    def bw(g, a=a, cdf=cdf):
        pdf = np.exp(-0.5 * a.data * a.data) / _SQRT_2PI
        _accumulate(a, g * (cdf + a.data * pdf))

    return Tensor(out_data, op="gelu", _parents=(a,), _backward=bw)


def relu(a):
    out_data = np.maximum(a.data, 0.0)

    def bw(g, a=a):
        _accumulate(a, g * (a.data > 0.0))

    return Tensor(out_data, op="relu", _parents=(a,), _backward=bw)


def sigmoid(a):
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g, a=a, y=out_data):
        _accumulate(a, g * y * (1.0 - y))

    return Tensor(out_data, op="sigmoid", _parents=(a,), _backward=bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g, a=a, y=out_data):
        _accumulate(a, g * y)

    return Tensor(out_data, op="exp", _parents=(a,), _backward=bw)


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    out_data = np.log(a.data)

    def bw(g, a=a):
        _accumulate(a, g / a.data)

    return Tensor(out_data, op="log", _parents=(a,), _backward=bw)


def sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out_data = np.sqrt(a.data)

    def bw(g, a=a, y=out_data):
        _accumulate(a, g * 0.5 / y)

    return Tensor(out_data, op="sqrt", _parents=(a,), _backward=bw)


def power(a, p):
    """a ** p for real constant p; domain restricted to positive base."""
    p = float(p)
    if np.any(a.data <= 0.0):
        raise DomainError("power: base must be strictly positive")
    out_data = a.data ** p

    def bw(g, a=a, p=p):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return Tensor(out_data, op="power", _parents=(a,), _backward=bw)


def absolute(a):
    out_data = np.abs(a.data)

    def bw(g, a=a):
        _accumulate(a, g * np.sign(a.data))

    return Tensor(out_data, op="abs", _parents=(a,), _backward=bw)


def clamp(a, lo=None, hi=None):
    lo = -np.inf if lo is None else float(lo)
    hi = np.inf if hi is None else float(hi)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g, a=a, inside=inside):
        _accumulate(a, g * inside)

    return Tensor(out_data, op="clamp", _parents=(a,), _backward=bw)


def minimum(a, b):
    _check_broadcast("minimum", a, b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g, a=a, b=b, take_a=take_a):
        _accumulate(a, _reduce_to(g * take_a, a.shape))
        _accumulate(b, _reduce_to(g * ~take_a, b.shape))

    return Tensor(out_data, op="minimum", _parents=(a, b), _backward=bw)


def maximum(a, b):
    _check_broadcast("maximum", a, b)
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bw(g, a=a, b=b, take_a=take_a):
        _accumulate(a, _reduce_to(g * take_a, a.shape))
        _accumulate(b, _reduce_to(g * ~take_a, b.shape))

    return Tensor(out_data, op="maximum", _parents=(a, b), _backward=bw)


# ---------------------------------------------------------------------------
# vector geometry primitives
# ---------------------------------------------------------------------------

def l2_norm(a):
    """Euclidean norm over the last axis (no epsilon; zero vectors are a
    caller-side error because the gradient is singular there)."""
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def bw(g, a=a, n=n):
        _accumulate(a, np.expand_dims(g / n, -1) * a.data)

    return Tensor(n, op="l2_norm", _parents=(a,), _backward=bw)


def unit(a, eps=1e-8):
    """x / (||x|| + eps) over the last axis; eps keeps x=0 finite."""
    n = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    d = n + eps
    out_data = a.data / d

    def bw(g, a=a, n=n, d=d):
        gv = (g * a.data).sum(axis=-1, keepdims=True)
        safe_n = np.maximum(n, 1e-300)
        _accumulate(a, g / d - a.data * gv / (safe_n * d * d))

    return Tensor(out_data, op="unit", _parents=(a,), _backward=bw)


def cosine_sim(a, b):
    """Cosine similarity over the last axis."""
    _check_broadcast("cosine_sim", a, b)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    dot = (a.data * b.data).sum(axis=-1)
    c = dot / (na * nb)

    def bw(g, a=a, b=b, na=na, nb=nb, c=c):
        ge = np.expand_dims(g, -1)
        nae = np.expand_dims(na, -1)
        nbe = np.expand_dims(nb, -1)
        ce = np.expand_dims(c, -1)
        ga = ge * (b.data / (nae * nbe) - ce * a.data / (nae * nae))
        gb = ge * (a.data / (nae * nbe) - ce * b.data / (nbe * nbe))
        _accumulate(a, _reduce_to(ga, a.shape))
        _accumulate(b, _reduce_to(gb, b.shape))

    return Tensor(c, op="cosine_sim", _parents=(a, b), _backward=bw)


def arccos(a, clamp_width=ARCCOS_CLAMP_WIDTH, tol=1e-6):
    """arccos with inputs clamped to [-1 + width, 1 - width].

    Inputs outside [-1 - tol, 1 + tol] are a domain error rather than
    silently clamped; beyond-unit cosines signal an upstream bug.
    """
    if np.any(np.abs(a.data) > 1.0 + tol):
        raise DomainError(
            f"arccos: input outside [-1-{tol}, 1+{tol}] before clamping "
            f"(max |x| = {np.abs(a.data).max():.6g})"
        )
    lo, hi = -1.0 + clamp_width, 1.0 - clamp_width
    x = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    out_data = np.arccos(x)

    def bw(g, a=a, x=x, inside=inside):
        _accumulate(a, g * inside * (-1.0 / np.sqrt(1.0 - x * x)))

    return Tensor(out_data, op="arccos", _parents=(a,), _backward=bw)


# ---------------------------------------------------------------------------
# graph traversal and backward
# ---------------------------------------------------------------------------

def linearize(t):
    """Topological order of the compute graph below ``t`` (parents first)."""
    order, seen = [], set()
    stack = [(t, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
        else:
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss):
    """Populate ``grad`` on every trainable leaf reachable from ``loss``.

    Interior-node grads are scratch space cleared on entry; leaf grads
    accumulate across calls (the optimizer zeroes them). Every node is
    visited exactly once, in reverse topological order.
    """
    if loss.shape != ():
        raise ShapeMismatchError("backward", loss.shape, ())
    order = linearize(loss)
    if not any(t.requires_grad for t in order):
        raise ValueError("backward: loss is detached from any trainable leaf")
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones(())
    for node in reversed(order):
        if node._backward is None or node.grad is None or not node.requires_grad:
            continue
        node._backward(node.grad)
        node.grad = None  # free scratch memory eagerly


# ---------------------------------------------------------------------------
# primitive registry + dispatch
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "sum": tsum,
    "mean": tmean,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": absolute,
    "clamp": clamp,
    "minimum": minimum,
    "maximum": maximum,
    "l2_norm": l2_norm,
    "unit": unit,
    "cosine_sim": cosine_sim,
    "arccos": arccos,
}


def primitive_forward(op_kind, *inputs, **kwargs):
    """Apply a registered primitive by name."""
    if op_kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {op_kind!r}")
    return PRIMITIVES[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Per-input maximum relative error for one primitive application."""

    def __init__(self, op_kind, max_rel_errors, excluded, tol):
        self.op_kind = op_kind
        self.max_rel_errors = max_rel_errors
        self.excluded = excluded
        self.tol = tol

    @property
    def max_rel_error(self):
        finite = [e for e in self.max_rel_errors if e is not None]
        return max(finite) if finite else 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({self.op_kind}: {status}, "
                f"max_rel={self.max_rel_error:.3g}, excluded={self.excluded})")


def _near_boundary(op_kind, arrays, step):
    """Coordinates too close to a non-differentiable point to trust FD."""
    margin = 10.0 * step
    excluded = []
    for k, x in enumerate(arrays):
        mask = np.zeros(x.shape, dtype=bool)
        if op_kind == "arccos":
            mask |= np.abs(np.abs(x) - 1.0) < max(margin, 2.0 * ARCCOS_CLAMP_WIDTH)
        elif op_kind in ("relu", "abs"):
            mask |= np.abs(x) < margin
        elif op_kind in ("minimum", "maximum") and len(arrays) == 2:
            mask |= np.abs(arrays[0] - arrays[1]) < margin
        elif op_kind == "clamp":
            mask |= np.abs(x - (-1.0)) < margin
            mask |= np.abs(x - 1.0) < margin
        excluded.append(mask)
    return excluded


def grad_check(op_kind, inputs, step=1e-5, tol=1e-4, kwargs=None, fn=None, rng=None):
    """Compare analytic gradients against central finite differences.

    ``inputs`` are plain arrays; the op output is scalarized through a fixed
    random projection so a single backward covers all output coordinates.
    Coordinates near the op's non-differentiable points are flagged and
    excluded rather than failed.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    kwargs = kwargs or {}
    call = fn if fn is not None else PRIMITIVES[op_kind]
    arrays = [_as_array(x) for x in inputs]
    rng = rng or np.random.default_rng(0)

    def run(arrs, want_grad):
        ts = [Tensor(x, requires_grad=want_grad) for x in arrs]
        out = call(*ts, **kwargs)
        return ts, out

    _, probe = run(arrays, False)
    proj = rng.standard_normal(probe.shape) if probe.shape != () else np.ones(())

    def scalarize(arrs):
        ts, out = run(arrs, False)
        return float((out.data * proj).sum())

    ts, out = run(arrays, True)
    loss = tsum(mul(out, Tensor(proj))) if out.shape != () else out
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    excl_masks = _near_boundary(op_kind, arrays, step)
    max_errs, excluded_counts = [], 0
    for k, x in enumerate(arrays):
        flat = x.reshape(-1)
        errs = []
        for i in range(flat.size):
            if excl_masks[k].reshape(-1)[i]:
                excluded_counts += 1
                continue
            orig = flat[i]
            flat[i] = orig + step
            f_plus = scalarize(arrays)
            flat[i] = orig - step
            f_minus = scalarize(arrays)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[k].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1.0)
            errs.append(abs(a - numeric) / denom)
        max_errs.append(max(errs) if errs else None)
    return GradCheckReport(op_kind, max_errs, excluded_counts, tol)
