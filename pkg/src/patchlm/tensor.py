"""Dense tensors on contiguous numpy buffers with reverse-mode autodiff.

Design rules kept deliberately strict so every backward rule stays auditable:

* row-major contiguous float32/float64 buffers, shapes always explicit;
* no silent broadcasting between two tensors -- binary ops demand equal
  shapes (constants may broadcast via ``add_const``/``mul_const`` as long
  as the result keeps the tensor operand's shape);
* gradients accumulate into leaf ``.grad`` buffers only; intermediate
  gradients live in a per-backward dict, so calling ``backward()`` twice
  accumulates exactly twice the leaf gradient.

Training math runs in float32; ``grad_check`` demands float64 so the
central-finite-difference oracle is tight.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


# One rule per parent: fn maps the output gradient to that parent's
# gradient contribution (same shape as the parent).
Rule = tuple["Tensor", Callable[[np.ndarray], np.ndarray]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_rules")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        self.data = np.asarray(arr, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._rules: tuple[Rule, ...] = ()

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -- backward ------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output.

        Visits each node exactly once in reverse topological order.  Leaf
        gradients accumulate across calls; intermediate gradients do not
        persist between calls.
        """
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._rules:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._rules:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, fn in node._rules:
                if not (parent.requires_grad or parent._rules):
                    continue
                contrib = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib


def _make(data: np.ndarray, rules: Sequence[Rule]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = _grad_enabled and any(p.requires_grad or p._rules for p, _ in rules)
    out.requires_grad = live
    out._rules = tuple(rules) if live else ()
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def add_const(a: Tensor, c) -> Tensor:
    """a + constant; the constant may broadcast but must not grow the shape."""
    data = a.data + np.asarray(c, dtype=a.data.dtype)
    if data.shape != a.shape:
        raise DimensionError(f"add_const changed shape {a.shape} -> {data.shape}")
    return _make(data, [(a, lambda g: g)])


def mul_const(a: Tensor, c) -> Tensor:
    carr = np.asarray(c, dtype=a.data.dtype)
    data = a.data * carr
    if data.shape != a.shape:
        raise DimensionError(f"mul_const changed shape {a.shape} -> {data.shape}")
    return _make(data, [(a, lambda g: g * carr)])


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, [(a, lambda g: g * (1.0 - y * y))])


def sinh(a: Tensor) -> Tensor:
    return _make(np.sinh(a.data), [(a, lambda g: g * np.cosh(a.data))])


def arcsinh(a: Tensor) -> Tensor:
    return _make(np.arcsinh(a.data), [(a, lambda g: g / np.sqrt(1.0 + a.data * a.data))])


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, [(a, lambda g: g * y)])


def tlog(a: Tensor, floor: float = 1e-30) -> Tensor:
    """Natural log with the argument floored at ``floor`` (no silent NaN)."""
    x = np.maximum(a.data, floor)
    return _make(np.log(x), [(a, lambda g: g / x)])


def silu(a: Tensor) -> Tensor:
    ex = np.exp(-np.abs(a.data))  # overflow-safe sigmoid
    sig = np.where(a.data >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    y = a.data * sig
    return _make(y, [(a, lambda g: g * (sig * (1.0 + a.data * (1.0 - sig))))])


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a`` (right derivative)."""
    _check_same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)
    return _make(data, [(a, lambda g: g * take_a), (b, lambda g: g * ~take_a)])


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (no grad there)."""
    keep = np.broadcast_to(keep, a.shape)
    data = np.where(keep, a.data, a.data.dtype.type(value))
    return _make(data, [(a, lambda g: g * keep)])


# ---------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(np.ascontiguousarray(a.data.reshape(shape)), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), [(a, lambda g: g.transpose(inv))])


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def rule_for(i: int, p: Tensor):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offs[i]), int(offs[i + 1]))
        sl = tuple(sl)
        return (p, lambda g: np.ascontiguousarray(g[sl]))

    return _make(data, [rule_for(i, p) for i, p in enumerate(parts)])


def index(a: Tensor, key) -> Tensor:
    """Slicing/row selection; backward scatters into a zero buffer."""
    data = np.ascontiguousarray(a.data[key])
    fancy = any(isinstance(k, np.ndarray) for k in (key if isinstance(key, tuple) else (key,)))

    def bw(g):
        buf = np.zeros_like(a.data)
        if fancy:
            np.add.at(buf, key, g)  # duplicate indices must accumulate
        else:
            buf[key] += g
        return buf

    return _make(data, [(a, bw)])


def repeat_axis(a: Tensor, repeats: int, axis: int) -> Tensor:
    """np.repeat along ``axis``; backward sums over each repeat group."""
    data = np.repeat(a.data, repeats, axis=axis)

    def bw(g):
        shape = list(a.shape)
        shape[axis:axis + 1] = [a.shape[axis], repeats]
        return g.reshape(shape).sum(axis=axis + 1)

    return _make(data, [(a, bw)])


# ---------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------

def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup (embedding); backward scatter-adds duplicate ids."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)]
        raise DataError(f"id out of range: {bad[:4].tolist()} (table has {n} rows)")
    data = np.ascontiguousarray(table.data[ids])

    def bw(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        return buf

    return _make(data, [(table, bw)])


def scatter_rows(n_rows: int, idx: np.ndarray, src: Tensor) -> Tensor:
    """Place src rows into a fresh zero buffer at unique row indices."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise DimensionError("scatter_rows requires unique indices")
    data = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    data[idx] = src.data
    return _make(data, [(src, lambda g: np.ascontiguousarray(g[idx]))])


def gather_values(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[i, idx[i]] for a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    rows = np.arange(n)
    data = np.ascontiguousarray(x.data[rows, idx])

    def bw(g):
        buf = np.zeros_like(x.data)
        buf[rows, idx] += g
        return buf

    return _make(data, [(x, bw)])


# ---------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.data.dtype)

    def bw(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=True)

    return _make(data, [(a, bw)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul_const(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when both operands share leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _make(data, [
        (a, lambda g: g @ b.data.swapaxes(-1, -2)),
        (b, lambda g: a.data.swapaxes(-1, -2) @ g),
    ])


# ---------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries get exactly zero weight."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make(y, [(a, bw)])


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    y = shifted - lse

    def bw(g):
        return g - np.exp(y) * g.sum(axis=-1, keepdims=True)

    return _make(y, [(a, bw)])


# ---------------------------------------------------------------------
# rmsnorm
# ---------------------------------------------------------------------

def rmsnorm(x: Tensor, scale: Tensor, eps: float = 1e-6) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * scale over the last axis."""
    if scale.ndim != 1 or scale.shape[0] != x.shape[-1]:
        raise DimensionError(f"rmsnorm scale {scale.shape} incompatible with {x.shape}")
    d = x.shape[-1]
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data * r * scale.data

    def bw_x(g):
        gs = g * scale.data
        dot = (gs * x.data).sum(axis=-1, keepdims=True)
        return gs * r - x.data * (r ** 3) * dot / d

    def bw_scale(g):
        return (g * x.data * r).reshape(-1, d).sum(axis=0)

    return _make(y, [(x, bw_x), (scale, bw_scale)])


# ---------------------------------------------------------------------
# gradient checking oracle
# ---------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    named_params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` re-evaluates the scalar objective from the params' current data,
    so it must not capture stale forward results.  Requires float64 params.
    """
    for name, p in named_params:
        if p.data.dtype != np.float64:
            raise NumericError(f"grad_check requires float64 params ({name} is {p.data.dtype})")
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("objective is non-finite at the evaluation point")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named_params}

    if rng is None:
        rng = np.random.default_rng(0)
    worst = ("", 0.0)
    n_checked = 0
    for name, p in named_params:
        flat = p.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples_per_param, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"objective non-finite while probing {name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), rel_floor)
            n_checked += 1
            if rel > worst[1]:
                worst = (f"{name}[{int(i)}]", rel)
    return GradCheckReport(max_rel_err=worst[1], worst_param=worst[0], n_checked=n_checked, tol=tol)
