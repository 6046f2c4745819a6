"""Float64 tensors with a recorded graph for reverse-mode differentiation.

Every op returns a new :class:`Tensor` holding its parents and a closure that
maps the output gradient onto parent gradients. ``Tensor.backward`` replays the
graph in reverse topological order. The graph is rebuilt on every forward call.

Broadcasting is never implicit. Ops that combine differently shaped operands
spell out the index structure through :func:`einsum`.
"""

from __future__ import annotations

import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_EPS = 1e-6

# Independent streams, one per logical purpose.
STREAMS = {"init": 0, "data": 1, "routing": 2, "bench": 3}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar for same-shape elementwise arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _op(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


# ---------------------------------------------------------------- arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equally shaped tensors."""
    _same_shape(a, b, "mul")
    return _op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _op(a.data * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _op(a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Hadamard product with a constant (non-differentiable) array of equal shape."""
    c = np.asarray(c)
    if c.shape != a.shape:
        raise ValueError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _op(a.data * c, (a,), lambda g: (g * c,))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; covers matmul, batched matmul and explicit broadcasts.

    Every index of an operand must appear in the other operand or the output,
    so each input gradient is itself a two-operand einsum.
    """
    lhs, out = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for idx, other in ((ia, ib), (ib, ia)):
        if len(set(idx)) != len(idx):
            raise ValueError(f"einsum: repeated index in {idx!r}")
        missing = set(idx) - set(other) - set(out)
        if missing:
            raise ValueError(f"einsum: index {sorted(missing)} of {idx!r} is summed away alone")
    data = contract(ia, ib, out, a.data, b.data)

    def backward(g):
        ga = contract(out, ib, ia, g, b.data) if a.requires_grad else None
        gb = contract(out, ia, ib, g, a.data) if b.requires_grad else None
        return ga, gb

    return _op(data, (a, b), backward)


def contract(ia: str, ib: str, out: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``np.einsum(f"{ia},{ib}->{out}", x, y)`` lowered onto one batched matmul."""
    sx, sy, px, py, mx, my, shp, perm = _plan(ia, ib, out, x.shape, y.shape)
    if sx:
        x = x.sum(axis=sx)
    if sy:
        y = y.sum(axis=sy)
    res = np.matmul(x.transpose(px).reshape(mx), y.transpose(py).reshape(my))
    res = res.reshape(shp).transpose(perm)
    return np.ascontiguousarray(res) if res.ndim else res


@functools.lru_cache(maxsize=4096)
def _plan(ia, ib, out, xs, ys):
    size = {**dict(zip(ia, xs)), **dict(zip(ib, ys))}
    # indices summed within a single operand are reduced before the matmul
    sx = tuple(i for i, c in enumerate(ia) if c not in out and c not in ib)
    sy = tuple(i for i, c in enumerate(ib) if c not in out and c not in ia)
    ia = "".join(c for c in ia if c in out or c in ib)
    ib = "".join(c for c in ib if c in out or c in ia)
    batch = [c for c in out if c in ia and c in ib]
    summed = [c for c in ia if c in ib and c not in out]
    free_a = [c for c in ia if c not in ib]
    free_b = [c for c in ib if c not in ia]

    def prod(idx):
        return math.prod(size[c] for c in idx)

    px = tuple(ia.index(c) for c in batch + free_a + summed)
    py = tuple(ib.index(c) for c in batch + summed + free_b)
    mx = (prod(batch), prod(free_a), prod(summed))
    my = (prod(batch), prod(summed), prod(free_b))
    order = batch + free_a + free_b
    shp = tuple(size[c] for c in order)
    perm = tuple(order.index(c) for c in out)
    return sx, sy, px, py, mx, my, shp, perm


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return einsum("ij,jk->ik", a, b)


def sum_all(a: Tensor) -> Tensor:
    return _op(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def sum_axis(a: Tensor, axis: int | tuple[int, ...]) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _op(a.data.sum(axis=axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    data = np.array([x.data for x in xs], dtype=np.result_type(*[x.data for x in xs]))

    def backward(g):
        return tuple(g[i] for i in range(len(xs)))

    return _op(data, tuple(xs), backward)


# ------------------------------------------------------------ nonlinearities

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _op(y, (a,), lambda g: (g * y * (1.0 - y),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    y = a.data * s
    return _op(y, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, same shape) keeps True entries."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _op(y, (a,), backward)


def sigmoid_weights(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """``w_i = m_i σ(a_i) / Σ_j m_j σ(a_j)`` over the last axis."""
    s = _sigmoid(a.data)
    m = np.ones_like(s) if mask is None else np.asarray(mask, dtype=s.dtype)
    num = s * m
    den = num.sum(axis=-1, keepdims=True)
    w = num / den

    def backward(g):
        inner = (g * w).sum(axis=-1, keepdims=True)
        return (m * s * (1.0 - s) * (g - inner) / den,)

    return _op(w, (a,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy; ``logits`` is (N, V), ``targets`` is (N,)."""
    x = logits.data
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise ValueError(f"cross_entropy: logits {x.shape} vs targets {targets.shape}")
    n = x.shape[0]
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, targets]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _op(np.array(loss), (logits,), backward)


# ------------------------------------------------------------- normalization

def rmsnorm(x: Tensor, weight: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """``weight * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if weight.data.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    if eps < 0:
        raise ValueError("rmsnorm: eps must be non-negative")
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = 1.0 / np.sqrt(ms + eps)
        xn = np.where(ms + eps > 0, x.data * r, 0.0)
    r = np.where(np.isfinite(r), r, 0.0)
    y = xn * weight.data

    def backward(g):
        gw = (g * xn).reshape(-1, weight.shape[0]).sum(axis=0)
        gxn = g * weight.data
        gx = r * (gxn - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return gx, gw

    return _op(y, (x, weight), backward)


def l2norm_eps(u: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """``u / (||u||_2 + eps)`` over the last axis."""
    n = np.sqrt((u.data * u.data).sum(axis=-1, keepdims=True))
    den = n + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(den > 0, u.data / den, 0.0)

    def backward(g):
        ug = (u.data * g).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            radial = np.where(n > 0, u.data * ug / (n * den * den), 0.0)
            tangential = np.where(den > 0, g / den, 0.0)
        return (tangential - radial,)

    return _op(y, (u,), backward)


# ------------------------------------------------------------------ indexing

def gather_rows(table: Tensor, ids: np.ndarray, axis: int = 0) -> Tensor:
    """Row lookup ``table[ids]`` along ``axis`` with scatter-add backward.

    Unique ids are read once and expanded to every occurrence, which is
    bit-identical to a per-occurrence gather.
    """
    ids = np.asarray(ids)
    size = table.shape[axis]
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise IndexError(f"gather_rows: id out of range [0, {size})")
    uniq, inv = np.unique(ids.reshape(-1), return_inverse=True)
    rows = np.take(table.data, uniq, axis=axis)
    flat = np.take(rows, inv, axis=axis)
    out_shape = table.shape[:axis] + ids.shape + table.shape[axis + 1:]
    data = flat.reshape(out_shape)

    def backward(g):
        full = np.zeros_like(table.data)
        gflat = g.reshape(table.shape[:axis] + (ids.size,) + table.shape[axis + 1:])
        moved = np.moveaxis(full, axis, 0)
        moved[uniq] = segment_sum(np.moveaxis(gflat, axis, 0), ids.reshape(-1))
        return (full,)

    return _op(data, (table,), backward)


def segment_sum(values: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` sharing a key, in occurrence order; one row per sorted unique key."""
    order = np.argsort(keys, kind="stable")
    k = keys[order]
    if k.size == 0:
        return values[:0]
    starts = np.flatnonzero(np.concatenate([[True], k[1:] != k[:-1]]))
    return np.add.reduceat(values[order], starts, axis=0)


def rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary position mixing on (B, T, H, hd) with even ``hd``; a fixed rotation."""
    _, t, _, hd = x.shape
    if hd % 2:
        raise ValueError("rope: head dim must be even")
    half = hd // 2
    cos, sin = _rope_tables(t, half, base)

    def rotate(v, sign):
        a, b = v[..., :half], v[..., half:]
        return np.concatenate([a * cos - sign * b * sin, sign * a * sin + b * cos], axis=-1)

    return _op(rotate(x.data, 1.0), (x,), lambda g: (rotate(g, -1.0),))


@functools.lru_cache(maxsize=64)
def _rope_tables(t: int, half: int, base: float):
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(t)[:, None] * inv[None, :]
    return np.cos(ang)[None, :, None, :], np.sin(ang)[None, :, None, :]


# --------------------------------------------------------------- selection

def topk(values, k: int) -> list[int]:
    """Indices of the ``k`` largest values, ties to the lower index, ascending."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("topk expects a 1-D input")
    if not 1 <= k <= v.shape[0]:
        raise ValueError(f"topk: k={k} outside [1, {v.shape[0]}]")
    order = np.argsort(-v, kind="stable")
    return sorted(int(i) for i in order[:k])


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the per-row top-k over the last axis, same tie rule as :func:`topk`."""
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


# ------------------------------------------------------------ gradient check

def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    c = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - c) / (np.abs(a) + np.abs(c) + 1e-12)))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray,
                       step: float = 1e-5, dtype=np.float64) -> np.ndarray:
    """Coordinate-wise central differences of a scalar function of an array.

    ``dtype=np.longdouble`` evaluates the probes in extended precision, which
    keeps rounding noise below gradient components near 1e-9.
    """
    x = np.array(x, dtype=dtype)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * dtype(step))
    return grad.astype(np.float64)


def grad_check(f: Callable[..., Tensor], params, step: float = 1e-5,
               oracle_dtype=np.float64) -> float:
    """Max relative error between graph gradients and central differences.

    ``params`` is an array or a dict of arrays; ``f`` receives matching leaf
    tensors and returns a scalar tensor. Analytic gradients are always taken
    in float64; ``oracle_dtype`` only sets the precision of the probes.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("grad_check: step must lie in [1e-6, 1e-3]")
    single = not isinstance(params, dict)
    arrays = {"x": np.asarray(params, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def call(values: dict) -> Tensor:
        leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in values.items()}
        out = f(leaves["x"]) if single else f(leaves)
        return out, leaves

    def value(values: dict):
        out = call(values)[0]
        return out.data[()] if oracle_dtype is not np.float64 else out.item()

    out, leaves = call(arrays)
    if not math.isfinite(out.item()):
        raise FloatingPointError("grad_check: function is not finite at params")
    if out.requires_grad:
        out.backward()
    worst = 0.0
    base = {k: v.astype(oracle_dtype) for k, v in arrays.items()}
    for key, value_arr in arrays.items():
        analytic = leaves[key].grad
        if analytic is None:
            analytic = np.zeros_like(value_arr)

        def fn(v, key=key):
            trial = dict(base)
            trial[key] = v
            return value(trial)

        numeric = central_difference(fn, value_arr, step, oracle_dtype)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


# ----------------------------------------------------------------------- rng

def make_rng(seed: int, stream: str) -> np.random.Generator:
    """PCG64 generator for one logical purpose; streams never overlap."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), STREAMS[stream]])))


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
