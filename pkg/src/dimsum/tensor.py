"""Dense N-d tensor with reverse-mode automatic differentiation.

Values live in numpy arrays (row-major). Every differentiable operation returns a
new :class:`Tensor` holding references to its parents and a closure mapping the
output gradient to one gradient per parent. :meth:`Tensor.backward` orders the
recorded graph topologically and replays the closures in exact reverse.

Broadcasting is deliberately narrow: operands either share a shape, or the
lower-rank operand matches a suffix of the other (leading batch extents), or
both have equal rank and the broadcast axes are explicit size-1 axes.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DEBUG = False
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Reject non-finite forward values when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class FlopCounter:
    """Multiply-add tally (2 FLOPs each) of the matmul-like forward ops."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        self.total += int(flops)
        self.by_op[op] = self.by_op.get(op, 0) + int(flops)


_FLOPS: FlopCounter | None = None


@contextlib.contextmanager
def count_flops():
    global _FLOPS
    prev, _FLOPS = _FLOPS, FlopCounter()
    try:
        yield _FLOPS
    finally:
        _FLOPS = prev


def rng(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, purpose)``.

    Distinct purposes ("init", "data", "dropout", "noise", ...) give independent
    streams, so adding draws in one never shifts another.
    """
    digest = hashlib.sha256(purpose.encode()).digest()
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF,
                    int.from_bytes(digest[:8], "little")], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {getattr(backward, '__qualname__', 'op')}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- broadcasting ------------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) != len(b):
        short, long_ = (a, b) if len(a) < len(b) else (b, a)
        if long_[len(long_) - len(short):] == short:
            return
        raise ShapeError(f"shapes {a} and {b} do not conform (only leading batch broadcast allowed)")
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {a} and {b} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        s = float(b)
        a = _as_tensor(a)
        return _make(a.data * a.dtype.type(s), (a,), lambda g: (g * s,))
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` (..., m, k) and ``b`` either (k, n) or (..., k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if _FLOPS is not None:
        _FLOPS.add("matmul", 2 * (ad.size // ad.shape[-1]) * ad.shape[-1] * bd.shape[-1])

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; each input index must appear in the other operand or the output."""
    a, b = _as_tensor(a), _as_tensor(b)
    lhs, out_sub = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ShapeError(f"einsum {spec!r} does not match shapes {a.shape}, {b.shape}")
    for own, other in ((sa, sb), (sb, sa)):
        for ch in own:
            if ch not in other and ch not in out_sub:
                raise ShapeError(f"einsum {spec!r}: index {ch!r} is summed within a single operand")
    ad, bd = a.data, b.data
    if _FLOPS is not None:
        extents = dict(zip(sa, ad.shape)) | dict(zip(sb, bd.shape))
        _FLOPS.add("einsum", 2 * int(np.prod(list(extents.values()), dtype=np.int64)))

    def backward(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad)
        return ga, gb

    return _make(np.einsum(spec, ad, bd), (a, b), backward)


# -- layout ------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
                i != axis and x.shape[i] != xs[0].shape[i] for i in range(x.ndim)):
            raise ShapeError(f"concat shapes {[t.shape for t in xs]} differ off axis {axis}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    idx = (slice(None),) * axis + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward)


def split(x: Tensor, sizes: Sequence[int] | int, axis: int = -1) -> list[Tensor]:
    axis = axis % x.ndim
    if isinstance(sizes, int):
        if x.shape[axis] % sizes:
            raise ShapeError(f"cannot split extent {x.shape[axis]} into {sizes} parts")
        sizes = [x.shape[axis] // sizes] * sizes
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, axis, start, start + s))
        start += s
    return out


def _is_permutation(idx: np.ndarray, n: int) -> bool:
    return idx.size == n and np.array_equal(np.sort(idx), np.arange(n))


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    """``out = take(x, index, axis)``; the adjoint scatters (adds) back."""
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather index out of range for extent {n}")
    shape, dtype = x.shape, x.dtype
    perm = idx.ndim == 1 and _is_permutation(idx, n)

    def backward(g):
        if perm:
            inv = np.empty_like(idx)
            inv[idx] = np.arange(n)
            return (np.take(g, inv, axis=axis),)
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim == 1 else g)
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), backward)


def scatter(x: Tensor, index, size: int, axis: int = 0) -> Tensor:
    """Adds slices of ``x`` into a zero tensor of extent ``size`` at ``index``."""
    idx = np.asarray(index, dtype=np.intp)
    axis = axis % x.ndim
    if idx.ndim != 1 or idx.size != x.shape[axis]:
        raise ShapeError(f"scatter index length {idx.size} != extent {x.shape[axis]}")
    shape = list(x.shape)
    shape[axis] = size
    out = np.zeros(shape, dtype=x.dtype)
    np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(x.data, axis, 0))
    return _make(out, (x,), lambda g: (np.take(g, idx, axis=axis),))


# -- elementwise unary -------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _make(out, (x,), lambda g: (g * _sigmoid(xd),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make(xd * s, (x,), backward)


def _phi1(z: np.ndarray, ez: np.ndarray | None = None):
    """Returns ``(expm1(z)/z, d/dz)`` with series values where ``|z| < 1e-6``."""
    ez = np.exp(z) if ez is None else ez
    small = np.abs(z) < 1e-6
    if small.any():
        safe = np.where(small, 1.0, z).astype(z.dtype, copy=False)
        p = np.expm1(safe) / safe
        dp = (ez - p) / safe
        p = np.where(small, 1.0 + 0.5 * z, p).astype(z.dtype, copy=False)
        dp = np.where(small, 0.5 + z / 6.0, dp).astype(z.dtype, copy=False)
    else:
        p = np.expm1(z) / z
        dp = (ez - p) / z
    return p, dp


def phi1(x: Tensor) -> Tensor:
    """``expm1(z) / z`` with its analytic limit 1 near ``z = 0``."""
    p, dp = _phi1(x.data)
    return _make(p, (x,), lambda g: (g * dp,))


# -- reductions / normalisation ---------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then optional learnable affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    parents = [x]
    out = xhat
    if weight is not None:
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gxhat = g * weight.data if weight is not None else g
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, xd.shape[-1]).sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


# -- sequence / image kernels -------------------------------------------------

def linear_scan(a: Tensor, b: Tensor, h0: Tensor | None = None) -> Tensor:
    """Diagonal linear recurrence ``h_t = a_t * h_{t-1} + b_t`` along axis 1.

    ``a`` and ``b`` are (batch, L, ...); ``h0`` is (batch, ...) and stands for
    the state before the first token (zero when omitted). Returns every state,
    shaped like ``b``. The loop runs over L only; everything else is vectorised.
    """
    if a.shape != b.shape:
        raise ShapeError(f"scan coefficient shapes differ: {a.shape} vs {b.shape}")
    state_shape = (a.shape[0],) + a.shape[2:]
    if h0 is not None and h0.shape != state_shape:
        raise ShapeError(f"initial state shape {h0.shape} != {state_shape}")
    at = np.ascontiguousarray(np.moveaxis(a.data, 1, 0))
    bt = np.moveaxis(b.data, 1, 0)
    L = at.shape[0]
    hs = np.empty_like(at)
    h = np.zeros(state_shape, dtype=at.dtype) if h0 is None else h0.data
    for t in range(L):
        h = at[t] * h + bt[t]
        hs[t] = h
    h_init = np.zeros(state_shape, dtype=at.dtype) if h0 is None else h0.data
    if _DEBUG:
        bad = ~np.isfinite(hs.reshape(L, -1)).all(axis=1)
        if bad.any():
            raise NonFiniteError(f"scan produced non-finite state at position {int(np.argmax(bad))}")

    def backward(g):
        gt = np.moveaxis(g, 1, 0)
        ga = np.empty_like(at)
        gb = np.empty_like(at)
        carry = np.zeros(state_shape, dtype=at.dtype)
        for t in range(L - 1, -1, -1):
            gh = gt[t] + carry
            gb[t] = gh
            ga[t] = gh * (hs[t - 1] if t > 0 else h_init)
            carry = gh * at[t]
        grads = [np.moveaxis(ga, 0, 1), np.moveaxis(gb, 0, 1)]
        if h0 is not None:
            grads.append(carry)
        return tuple(grads)

    parents = (a, b) if h0 is None else (a, b, h0)
    return _make(np.moveaxis(hs, 0, 1), parents, backward)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor,
                   D: Tensor | None = None, h0: Tensor | None = None) -> Tensor:
    """Fused ZOH-discretised selective scan with a hand-written adjoint.

    u, delta: (batch, L, E); A: (E, N); Bt, Ct: (batch, L, N); D: (E,);
    h0: (batch, E, N). Computes ``z = delta*A``, ``h_t = exp(z_t) h_{t-1} +
    phi1(z_t) delta_t B_t u_t`` and ``y_t = C_t . h_t + D u_t``.
    """
    nb, L, E = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape or A.shape != (E, N) or Bt.shape != (nb, L, N) or Ct.shape != (nb, L, N):
        raise ShapeError(f"selective_scan shapes u={u.shape} delta={delta.shape} A={A.shape} "
                         f"B={Bt.shape} C={Ct.shape} do not conform")
    if h0 is not None and h0.shape != (nb, E, N):
        raise ShapeError(f"initial state {h0.shape} != {(nb, E, N)}")
    ud, dd, Ad, Bd, Cd = u.data, delta.data, A.data, Bt.data, Ct.data
    if _FLOPS is not None:
        # discretise, update and read out each (t, b, e, n) state entry
        _FLOPS.add("scan", 8 * nb * L * E * N)
    # time-major working layout (L, batch, E, N)
    dT = np.ascontiguousarray(dd.transpose(1, 0, 2))
    z = dT[..., None] * Ad
    a = np.exp(z)
    p, _ = _phi1(z, a)
    du = np.ascontiguousarray((dd * ud).transpose(1, 0, 2))
    BT = np.ascontiguousarray(Bd.transpose(1, 0, 2))[:, :, None, :]
    CT = np.ascontiguousarray(Cd.transpose(1, 0, 2))[..., None]
    hs = p * BT
    hs *= du[..., None]
    init = np.zeros((nb, E, N), dtype=a.dtype) if h0 is None else h0.data
    tmp = np.empty_like(init)
    prev = init
    for t in range(L):
        np.multiply(a[t], prev, out=tmp)
        hs[t] += tmp
        prev = hs[t]
    if _DEBUG:
        bad = ~np.isfinite(hs.reshape(L, -1)).all(axis=1)
        if bad.any():
            raise NonFiniteError(f"scan produced non-finite state at position {int(np.argmax(bad))}")
    y = np.matmul(hs, CT)[..., 0].transpose(1, 0, 2)
    if D is not None:
        y = y + ud * D.data

    def backward(g):
        gT = np.ascontiguousarray(g.transpose(1, 0, 2))
        gC = np.matmul(gT[:, :, None, :], hs)[:, :, 0, :].transpose(1, 0, 2)
        gh = gT[..., None] * CT.transpose(0, 1, 3, 2)
        carry = np.zeros((nb, E, N), dtype=a.dtype)
        for t in range(L - 1, -1, -1):
            gh[t] += carry
            np.multiply(gh[t], a[t], out=carry)
        hprev = np.concatenate([init[None], hs[:-1]], axis=0)
        dp = (a - p) / np.where(z == 0, 1.0, z).astype(z.dtype, copy=False)
        small = np.abs(z) < 1e-6
        if small.any():
            dp = np.where(small, 0.5 + z / 6.0, dp).astype(z.dtype, copy=False)
        q = gh * p
        gdu = np.matmul(q, BT.transpose(0, 1, 3, 2))[..., 0]
        gB = np.matmul(du[:, :, None, :], q)[:, :, 0, :].transpose(1, 0, 2)
        gz = hprev
        gz *= a
        dp *= BT
        dp *= du[..., None]
        gz += dp
        gz *= gh
        gdelta = np.einsum("lben,en->lbe", gz, Ad) + gdu * ud.transpose(1, 0, 2)
        gu = (gdu * dT).transpose(1, 0, 2)
        if D is not None:
            gu = gu + g * D.data
        gA = np.einsum("lben,lbe->en", gz, dT)
        grads = [gu, gdelta.transpose(1, 0, 2), gA, gB, gC]
        if D is not None:
            grads.append((g * ud).sum(axis=(0, 1)))
        if h0 is not None:
            grads.append(carry)
        return tuple(grads)

    parents = [u, delta, A, Bt, Ct]
    if D is not None:
        parents.append(D)
    if h0 is not None:
        parents.append(h0)
    return _make(y, parents, backward)


def patch_correlate(x: Tensor, kernels: np.ndarray) -> Tensor:
    """Stride-2 correlation of the last two axes with a bank of 2x2 kernels.

    (..., H, W) -> (..., K, H/2, W/2) with ``kernels`` shaped (K, 2, 2).
    """
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"stride-2 correlation needs even extents, got {H}x{W}")
    k = np.asarray(kernels, dtype=x.dtype)
    lead = x.shape[:-2]
    blocks = x.data.reshape(lead + (H // 2, 2, W // 2, 2))
    out = np.einsum("...iajb,kab->...kij", blocks, k)

    def backward(g):
        return (_patch_correlate_t(g, k),)

    return _make(out, (x,), backward)


def _patch_correlate_t(y: np.ndarray, k: np.ndarray) -> np.ndarray:
    lead = y.shape[:-3]
    h, w = y.shape[-2:]
    blocks = np.einsum("...kij,kab->...iajb", y, k)
    return blocks.reshape(lead + (2 * h, 2 * w))


def patch_correlate_transpose(y: Tensor, kernels: np.ndarray) -> Tensor:
    """Adjoint of :func:`patch_correlate`: (..., K, h, w) -> (..., 2h, 2w)."""
    k = np.asarray(kernels, dtype=y.dtype)
    if y.ndim < 3 or y.shape[-3] != k.shape[0]:
        raise ShapeError(f"expected {k.shape[0]} stacked maps, got shape {y.shape}")
    out = _patch_correlate_t(y.data, k)

    def backward(g):
        lead = g.shape[:-2]
        H, W = g.shape[-2:]
        blocks = g.reshape(lead + (H // 2, 2, W // 2, 2))
        return (np.einsum("...iajb,kab->...kij", blocks, k),)

    return _make(out, (y,), backward)


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise causal convolution along axis 1.

    ``x`` (batch, L, C), ``weight`` (C, K); ``y[:, t] = sum_k w[:, k] * x[:, t-K+1+k]``
    with zeros before the first token.
    """
    Bn, L, C = x.shape
    if weight.ndim != 2 or weight.shape[0] != C:
        raise ShapeError(f"conv weight {weight.shape} does not match channels {C}")
    K = weight.shape[1]
    xd, wd = x.data, weight.data
    padded = np.concatenate([np.zeros((Bn, K - 1, C), dtype=xd.dtype), xd], axis=1)
    out = np.zeros_like(xd)
    for k in range(K):
        out += padded[:, k:k + L] * wd[:, k]
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gpad = np.zeros_like(padded)
        gw = np.empty_like(wd)
        for k in range(K):
            gpad[:, k:k + L] += g * wd[:, k]
            gw[:, k] = (g * padded[:, k:k + L]).sum(axis=(0, 1))
        grads = [gpad[:, K - 1:], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- verification -------------------------------------------------------------

def finite_diff_check(f: Callable[[], Tensor], params: Tensor | Iterable[Tensor],
                      eps: float = 1e-4, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` closes over ``params`` and returns a scalar tensor. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``. With
    ``max_coords`` set, at most that many coordinates per tensor are probed
    (chosen by a seeded generator) so large models stay tractable.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, s in zip(params, saved):
        p.grad = s
    pick = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.flat
            coords = np.arange(p.size)
            if max_coords is not None and p.size > max_coords:
                coords = pick.choice(p.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f().data)
                flat[i] = orig - eps
                down = float(f().data)
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                a = float(ga.reshape(-1)[i])
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
