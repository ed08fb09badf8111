"""Dense numeric core: a small reverse-mode autodiff over numpy arrays.

Only the primitives the compressor needs are provided. Matmul and softmax go
through :mod:`tokencompress.kernels`, which fixes the summation order so that
results are reproducible bit for bit and independent of neighbouring rows.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import ContractError, ShapeError

PRECISIONS = {"verify64": np.float64, "fast32": np.float32}


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ContractError(
            f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}"
        ) from None


class Var:
    """A value in the computation graph, optionally tracking gradients."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.value.size != 1:
            raise ContractError(
                f"gradients need a scalar objective, got shape {self.shape}"
            )
        order = _topological(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward):
    if any(p.requires_grad for p in parents):
        return Var(value, True, tuple(parents), backward)
    return Var(value)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- flop accounting ---------------------------------------------------------

class FlopCounter:
    """Tally of matmul multiply-adds (2 flops each) and softmax elements (5)."""

    def __init__(self):
        self.matmul = 0
        self.softmax = 0

    @property
    def total(self):
        return self.matmul + self.softmax


_counter: FlopCounter | None = None


@contextlib.contextmanager
def count_flops():
    global _counter
    prev, _counter = _counter, FlopCounter()
    try:
        yield _counter
    finally:
        _counter = prev


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_var(a), as_var(b)
    return _node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a, c: float):
    a = as_var(a)
    c = a.value.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def relu(a):
    a = as_var(a)
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = as_var(a)
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _node(out, (a,), back)


ACTIVATIONS: dict[str, Callable[[Var], Var]] = {
    "gelu": gelu,
    "relu": relu,
    "identity": lambda a: a,
}


# -- structural --------------------------------------------------------------

def reshape(a, shape):
    a = as_var(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def permute(a, axes):
    a = as_var(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    axes = list(range(as_var(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def broadcast_to(a, shape):
    a = as_var(a)
    old = a.shape
    return _node(
        np.ascontiguousarray(np.broadcast_to(a.value, shape)),
        (a,),
        lambda g: (_unbroadcast(g, old),),
    )


def getitem(a, idx):
    a = as_var(a)

    def back(g):
        full = np.zeros_like(a.value)
        full[idx] += g
        return (full,)

    return _node(a.value[idx], (a,), back)


def concat(parts: Sequence, axis: int = 0):
    parts = [as_var(p) for p in parts]
    axis = axis % parts[0].ndim
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(np.concatenate([p.value for p in parts], axis=axis), tuple(parts), back)


def sum_all(a):
    a = as_var(a)
    return _node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a, axis, keepdims=False):
    a = as_var(a)
    n = a.shape[axis]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

    return _node(a.value.mean(axis=axis, keepdims=keepdims), (a,), back)


# -- linear algebra ----------------------------------------------------------

def _mm(a, b):
    """Fixed-order product for (..., m, n) @ (n, p) or equal-batch 3-D pairs."""
    if b.ndim == 2:
        lead = a.shape[:-1]
        out = kernels.matmul(a.reshape(-1, a.shape[-1]), b)
        return out.reshape(*lead, b.shape[1])
    lead = a.shape[:-2]
    a3 = a.reshape(-1, *a.shape[-2:])
    b3 = b.reshape(-1, *b.shape[-2:])
    return kernels.matmul(a3, b3).reshape(*lead, a.shape[-2], b.shape[-1])


def matmul(a, b, *, counted=True):
    """Matrix product with a fixed left-to-right contraction order.

    ``b`` may be a 2-D weight shared across the leading dims of ``a`` (a 1-D
    ``a`` is a single row); otherwise the leading (batch) dims are broadcast
    against each other.
    """
    a, b = as_var(a), as_var(b)
    if b.ndim < 2 or (a.ndim < 2 and b.ndim != 2) or a.ndim < 1:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dims differ: left is {a.shape} (n={a.shape[-1]}), "
            f"right is {b.shape} (n={b.shape[-2]})"
        )
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        try:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(
                f"matmul batch dims do not broadcast: {a.shape[:-2]} vs {b.shape[:-2]}"
            ) from None
        if a.shape[:-2] != batch:
            a = broadcast_to(a, batch + a.shape[-2:])
        if b.shape[:-2] != batch:
            b = broadcast_to(b, batch + b.shape[-2:])
    if a.dtype != b.dtype:
        raise ContractError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    av, bv = a.value, b.value
    out = _mm(av, bv)
    if counted and _counter is not None:
        _counter.matmul += 2 * out.size * av.shape[-1]

    def back(g):
        ga = _mm(g, np.swapaxes(bv, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bv.ndim == 2:
                a2 = av.reshape(-1, av.shape[-1])
                gb = kernels.matmul(np.ascontiguousarray(a2.T), g.reshape(-1, g.shape[-1]))
            else:
                gb = _mm(np.swapaxes(av, -1, -2), g)
        return ga, gb

    return _node(out, (a, b), back)


def softmax(a):
    """Max-stabilized softmax over the last axis."""
    a = as_var(a)
    s = kernels.softmax_lastaxis(a.value)
    if _counter is not None:
        _counter.softmax += 5 * s.size

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), back)


def softmax_rows(x):
    """Row softmax of a 2-D tensor."""
    x = as_var(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return softmax(x)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, C)."""
    logits = as_var(logits)
    labels = np.asarray(labels)
    x = logits.value
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(x.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / x.shape[0],)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), back)


def attention(q, k, v):
    """Single-head scaled dot-product attention; returns (output, weights)."""
    q, k, v = as_var(q), as_var(k), as_var(v)
    d = q.shape[-1]
    logits = scale(matmul(q, swap_last(k)), 1.0 / math.sqrt(d))
    weights = softmax(logits)
    return matmul(weights, v), weights


# -- parameter containers ----------------------------------------------------

@dataclass
class LinearMap:
    """Affine map ``x @ weight + bias``; weight is [in, out]."""

    weight: object
    bias: object = None

    def __post_init__(self):
        w = np.shape(_raw(self.weight))
        if len(w) != 2:
            raise ShapeError(f"linear weight must be 2-D, got {w}")
        if self.bias is not None and np.shape(_raw(self.bias)) != (w[1],):
            raise ShapeError(
                f"bias length {np.shape(_raw(self.bias))} does not match weight out={w[1]}"
            )

    @property
    def dims(self):
        return np.shape(_raw(self.weight))


def _raw(x):
    return x.value if isinstance(x, Var) else x


def linear(lm: LinearMap, x):
    out = matmul(x, lm.weight)
    return out if lm.bias is None else add(out, lm.bias)


@dataclass
class Mlp:
    layers: list[LinearMap]
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.dims[1] != nxt.dims[0]:
                raise ShapeError(f"MLP layers do not chain: {prev.dims} then {nxt.dims}")

    @property
    def in_dim(self):
        return self.layers[0].dims[0]

    @property
    def out_dim(self):
        return self.layers[-1].dims[1]


def mlp_forward(m: Mlp, x):
    x = as_var(x)
    if x.shape[-1] != m.in_dim:
        raise ShapeError(f"MLP expects last extent {m.in_dim}, got input shape {x.shape}")
    act = ACTIVATIONS[m.activation]
    for i, layer in enumerate(m.layers):
        x = linear(layer, x)
        if i < len(m.layers) - 1:
            x = act(x)
    return x


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype=np.float64):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- gradients and finite differences ---------------------------------------

Objective = Callable[[Mapping[str, Var]], Var]


def gradients(f: Objective, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of scalar ``f`` w.r.t. every entry of ``params``.

    Parameters that ``f`` never touches get an all-zero gradient.
    """
    leaves = {name: Var(np.array(v), requires_grad=True) for name, v in params.items()}
    out = f(leaves)
    if not isinstance(out, Var):
        raise ContractError("objective must return a Var")
    out.backward()
    return {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }


def evaluate(f: Objective, params: Mapping[str, np.ndarray]) -> float:
    out = f({name: Var(v) for name, v in params.items()})
    if out.value.size != 1:
        raise ContractError(f"objective must be scalar, got shape {out.shape}")
    return float(out.value)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_param: tuple[str, tuple] | None
    per_group: dict[str, float] = field(default_factory=dict)


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_gradients(f: Objective, params: Mapping[str, np.ndarray], eps: float):
    """Central differences ``(f(x+eps) - f(x-eps)) / 2eps`` for every coordinate."""
    work = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            flat[i] = x0 + eps
            fp = evaluate(f, work)
            flat[i] = x0 - eps
            fm = evaluate(f, work)
            flat[i] = x0
            gflat[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def finite_diff_check(
    f: Objective, params: Mapping[str, np.ndarray], eps: float = 1e-5
) -> FiniteDiffReport:
    """Compare reverse-mode gradients with central differences (64-bit only)."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    for name, v in params.items():
        if np.asarray(v).dtype != np.float64:
            raise ContractError(f"finite-difference checks need float64 params ({name})")
    analytic = gradients(f, params)
    numeric = numeric_gradients(f, params, eps)
    report = FiniteDiffReport(0.0, None)
    for name in params:
        err = relative_error(analytic[name], numeric[name])
        worst = float(err.max()) if err.size else 0.0
        report.per_group[name] = worst
        if report.worst_param is None or worst > report.max_rel_error:
            idx = np.unravel_index(int(err.argmax()), err.shape) if err.size else ()
            report.max_rel_error = worst
            report.worst_param = (name, tuple(int(i) for i in idx))
    return report
