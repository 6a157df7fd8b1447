"""Reverse-mode autodiff over dense float64 arrays.

The op set is deliberately small and fixed: it covers exactly what the
conditioner MLP, the flow stacks, volume compositing and the training
objective need, nothing more. Ops execute eagerly on numpy arrays and
record a tape; `Tensor.backward` replays it once in reverse topological
order.

Every module-level math function (`tanh`, `softplus`, `matmul`, ...) accepts
either a `Tensor` or a plain `numpy.ndarray` and returns the same kind. The
model code is written once against these functions and runs in two modes:
graph mode for training (gradients) and raw numpy mode for inference, where
no tape is wanted.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DiffcoreError(Exception):
    """Base class for autodiff failures."""


class NonFiniteError(DiffcoreError):
    """An op produced NaN/Inf. Carries the offending op kind."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


class GraphStateError(DiffcoreError):
    """Graph used out of order (e.g. backward before forward)."""


class InvertibilityError(DiffcoreError):
    """A log-determinant factor was non-positive."""


def _as_f64(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _check_finite(data: np.ndarray, op: str) -> None:
    # isfinite(sum) is one pass with no bool temp; any NaN/Inf entry makes
    # the sum non-finite. (A finite-but-astronomical array could overflow
    # the sum and trip this too, which is equally a training fault.)
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(np.sum(data)):
            raise NonFiniteError(op)


class Tensor:
    """A node in the computation DAG.

    `data` is always a float64 ndarray. `requires_grad` marks trainable
    leaves; interior nodes inherit it from their parents. Ops between
    gradient-free tensors short-circuit to a fresh leaf so constant
    subcomputations never lengthen the tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "name", "_grad_owned")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
        name: str | None = None,
    ):
        self.data = _as_f64(data)
        _check_finite(self.data, op)
        self.grad: np.ndarray | None = None
        self._grad_owned = False
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _make(op: str, data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        if not any(p.requires_grad for p in parents):
            return Tensor(data, op=op)
        return Tensor(data, requires_grad=True, op=op, parents=parents, vjp=vjp)

    # -- backward ----------------------------------------------------------

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Accumulate gradients of `seed . self` into the graph's leaves.

        Default seed is all-ones (so a scalar output yields plain
        gradients). Each node's vjp runs exactly once, in reverse
        topological order.
        """
        if seed is None:
            seed_arr = np.ones_like(self.data)
        else:
            seed_arr = _as_f64(seed)
            if seed_arr.shape != self.data.shape:
                raise GraphStateError(
                    f"seed shape {seed_arr.shape} != output shape {self.data.shape}"
                )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        for node in order:
            node.grad = None
            node._grad_owned = False
        self.grad = seed_arr.copy()
        self._grad_owned = True
        # The first accumulation borrows the vjp's array (it may be shared
        # with another parent, so it must not be mutated); the second
        # allocates a fresh owned sum; any further ones add in place.
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                elif not parent._grad_owned:
                    parent.grad = parent.grad + g
                    parent._grad_owned = True
                else:
                    parent.grad += g

    # -- operator sugar ------------------------------------------------------

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _graph_mode(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# -- elementwise binary ops ----------------------------------------------


def add(a, b):
    if not _graph_mode(a, b):
        return np.add(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = a.data + b.data
    _check_finite(out, "add")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._make("add", out, (a, b), vjp)


def sub(a, b):
    if not _graph_mode(a, b):
        return np.subtract(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = a.data - b.data
    _check_finite(out, "sub")

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._make("sub", out, (a, b), vjp)


def mul(a, b):
    if not _graph_mode(a, b):
        return np.multiply(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = a.data * b.data
    _check_finite(out, "mul")

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._make("mul", out, (a, b), vjp)


def div(a, b):
    if not _graph_mode(a, b):
        return np.divide(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = a.data / b.data
    _check_finite(out, "div")

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return Tensor._make("div", out, (a, b), vjp)


def neg(a):
    if not _graph_mode(a):
        return np.negative(a)
    a = Tensor._lift(a)
    return Tensor._make("neg", -a.data, (a,), lambda g: (-g,))


# -- elementwise unary ops -------------------------------------------------


def tanh(a):
    if not _graph_mode(a):
        return np.tanh(a)
    a = Tensor._lift(a)
    out = np.tanh(a.data)

    def vjp(g):
        tmp = out * out
        np.subtract(1.0, tmp, out=tmp)
        np.multiply(g, tmp, out=tmp)
        return (tmp,)

    return Tensor._make("tanh", out, (a,), vjp)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp of non-positive arguments only, so never overflows
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a):
    if not _graph_mode(a):
        return _sigmoid_np(np.asarray(a, dtype=np.float64))
    a = Tensor._lift(a)
    out = _sigmoid_np(a.data)
    return Tensor._make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    if not _graph_mode(a):
        return np.logaddexp(0.0, a)
    a = Tensor._lift(a)
    out = np.logaddexp(0.0, a.data)
    s = _sigmoid_np(a.data)
    return Tensor._make("softplus", out, (a,), lambda g: (g * s,))


def exp(a):
    if not _graph_mode(a):
        return np.exp(a)
    a = Tensor._lift(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return Tensor._make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if not _graph_mode(a):
        return np.log(a)
    a = Tensor._lift(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")
    return Tensor._make("log", out, (a,), lambda g: (g / a.data,))


def square(a):
    if not _graph_mode(a):
        return np.square(a)
    a = Tensor._lift(a)
    return Tensor._make("square", a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


def sqrt(a):
    if not _graph_mode(a):
        return np.sqrt(a)
    a = Tensor._lift(a)
    out = np.sqrt(a.data)
    _check_finite(out, "sqrt")
    return Tensor._make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# -- reductions ------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False):
    if not _graph_mode(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    a = Tensor._lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    _check_finite(np.asarray(out), "sum")

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        # read-only broadcast view is safe: gradients are never mutated
        return (np.broadcast_to(g, a.data.shape),)

    return Tensor._make("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False):
    if not _graph_mode(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    a = Tensor._lift(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) / float(count)


def cumsum(a, axis: int):
    if not _graph_mode(a):
        return np.cumsum(a, axis=axis)
    a = Tensor._lift(a)
    out = np.cumsum(a.data, axis=axis)
    _check_finite(out, "cumsum")

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev,)

    return Tensor._make("cumsum", out, (a,), vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape: Sequence[int]):
    if not _graph_mode(a):
        return np.reshape(a, shape)
    a = Tensor._lift(a)
    out = np.reshape(a.data, shape)
    src = a.data.shape
    return Tensor._make("reshape", out, (a,), lambda g: (np.reshape(g, src),))


def transpose(a, axes: Sequence[int] | None = None):
    if not _graph_mode(a):
        return np.transpose(a, axes)
    a = Tensor._lift(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return Tensor._make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a):
    """Transpose the trailing two axes (batched matrix transpose)."""
    if not _graph_mode(a):
        return np.swapaxes(a, -1, -2)
    a = Tensor._lift(a)
    out = np.swapaxes(a.data, -1, -2)
    return Tensor._make("swapaxes", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take(a, key):
    """Basic slicing/indexing; gradient scatter-adds into the source."""
    if not _graph_mode(a):
        return np.asarray(a)[key]
    a = Tensor._lift(a)
    out = a.data[key]
    src_shape = a.data.shape

    def vjp(g):
        full = np.zeros(src_shape, dtype=np.float64)
        full[key] += g
        return (full,)

    return Tensor._make("slice", out, (a,), vjp)


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    if not _graph_mode(*parts):
        return np.concatenate(parts, axis=axis)
    parts = [Tensor._lift(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return Tensor._make("concat", out, tuple(parts), vjp)


def stack(parts: Iterable, axis: int = 0):
    parts = list(parts)
    if not _graph_mode(*parts):
        return np.stack(parts, axis=axis)
    expanded = []
    for p in parts:
        p = Tensor._lift(p)
        new_shape = list(p.data.shape)
        new_shape.insert(axis if axis >= 0 else axis + p.data.ndim + 1, 1)
        expanded.append(reshape(p, new_shape))
    return concat(expanded, axis=axis)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """numpy `@` semantics: 2-D, batched with broadcast, or matrix-vector."""
    if not _graph_mode(a, b):
        return np.matmul(a, b)
    a, b = Tensor._lift(a), Tensor._lift(b)
    out = np.matmul(a.data, b.data)
    _check_finite(out, "matmul")
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1

    def vjp(g):
        ga = gb = None
        am = a.data[None, :] if a_vec else a.data
        bm = b.data[:, None] if b_vec else b.data
        gm = g
        if a_vec and b_vec:
            gm = np.asarray(g).reshape(1, 1)
        elif a_vec:
            gm = np.expand_dims(g, -2)
        elif b_vec:
            gm = np.expand_dims(g, -1)
        ga = np.matmul(gm, np.swapaxes(bm, -1, -2))
        gb = np.matmul(np.swapaxes(am, -1, -2), gm)
        if a_vec:
            ga = ga.reshape(-1) if ga.ndim <= 2 else ga.sum(axis=tuple(range(ga.ndim - 2)))[0]
        else:
            ga = _unbroadcast(ga, a.data.shape)
        if b_vec:
            gb = gb.reshape(-1) if gb.ndim <= 2 else gb.sum(axis=tuple(range(gb.ndim - 2)))[:, 0]
        else:
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb

    return Tensor._make("matmul", out, (a, b), vjp)


def affine(x, w, b):
    """Fused x @ w + b for 2-D weights and 1-D bias (one tape node)."""
    if not _graph_mode(x, w, b):
        return np.matmul(x, w) + b
    x, w, b = Tensor._lift(x), Tensor._lift(w), Tensor._lift(b)
    out = np.matmul(x.data, w.data) + b.data
    _check_finite(out, "affine")

    def vjp(g):
        dx = np.matmul(g, w.data.T)
        gm = g.reshape(-1, g.shape[-1])
        dw = np.matmul(x.data.reshape(-1, x.data.shape[-1]).T, gm)
        db = gm.sum(axis=0)
        return _unbroadcast(dx, x.data.shape), dw, db

    return Tensor._make("affine", out, (x, w, b), vjp)


def residual_tanh_step(z, a, b_mat, b_vec):
    """Fused residual map z + A tanh(B z + b), one tape node.

    Shapes: z (..., K, D) with broadcastable leading axes, A (P, D, M),
    B (P, M, D), b (P, M). This is the flow-stack hot path; the fused
    backward avoids materializing the ~10 intermediates the composed ops
    would record.
    """
    if not _graph_mode(z, a, b_mat, b_vec):
        t = np.tanh(np.matmul(z, np.swapaxes(b_mat, -1, -2)) + np.asarray(b_vec)[..., None, :])
        return np.matmul(t, np.swapaxes(a, -1, -2)) + z
    z, a, b_mat, b_vec = (Tensor._lift(x) for x in (z, a, b_mat, b_vec))
    zd, ad, bd, vd = z.data, a.data, b_mat.data, b_vec.data
    t = np.tanh(np.matmul(zd, np.swapaxes(bd, -1, -2)) + vd[..., None, :])
    out = np.matmul(t, np.swapaxes(ad, -1, -2)) + zd
    _check_finite(out, "residual_tanh_step")

    def vjp(g):
        dpre = np.matmul(g, ad)
        psi = t * t
        np.subtract(1.0, psi, out=psi)
        np.multiply(dpre, psi, out=dpre)
        dz = _unbroadcast(g + np.matmul(dpre, bd), zd.shape)
        zb = np.broadcast_to(zd, t.shape[:-1] + (zd.shape[-1],))
        da = np.matmul(np.swapaxes(g, -1, -2), t)
        db = np.matmul(np.swapaxes(dpre, -1, -2), zb)
        dv = dpre.sum(axis=-2)
        return (
            dz,
            _unbroadcast(da, ad.shape),
            _unbroadcast(db, bd.shape),
            _unbroadcast(dv, vd.shape),
        )

    return Tensor._make("residual_tanh_step", out, (z, a, b_mat, b_vec), vjp)


def logdet(a):
    """log|det| of (batched) small square matrices.

    Raises InvertibilityError when any determinant is not strictly
    positive: the flow construction guarantees positive factors, so a
    non-positive sign is a hard numerical fault, not a value to propagate.
    """
    if not _graph_mode(a):
        sign, ld = np.linalg.slogdet(a)
        if not np.all(sign > 0):
            raise InvertibilityError("non-positive determinant in logdet")
        return ld
    a = Tensor._lift(a)
    sign, ld = np.linalg.slogdet(a.data)
    if not np.all(sign > 0):
        raise InvertibilityError("non-positive determinant in logdet")
    _check_finite(ld, "logdet")
    inv_t = np.swapaxes(np.linalg.inv(a.data), -1, -2)
    return Tensor._make("logdet", ld, (a,), lambda g: (g[..., None, None] * inv_t,))


def logsumexp(a, axis: int = -1):
    """Numerically stable log-sum-exp along `axis`.

    The max shift is treated as a constant, which leaves the value and
    gradient exact for any finite shift.
    """
    data = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    m = np.max(data, axis=axis, keepdims=True)
    shifted = sub(a, m)
    s = tsum(exp(shifted), axis=axis)
    return add(log(s), np.squeeze(m, axis=axis))


def value_of(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- parameters and graphs ---------------------------------------------------


class ParameterSet:
    """Named trainable tensors with stable iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter '{name}'")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def arrays(self) -> dict[str, np.ndarray]:
        """Raw ndarray view (shared storage) for inference-mode calls."""
        return {k: v.data for k, v in self._params.items()}

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter '{name}' in checkpoint")
            src = np.asarray(arrays[name], dtype=np.float64)
            if src.shape != tensor.data.shape:
                raise ValueError(
                    f"parameter '{name}' shape {src.shape} != expected {tensor.data.shape}"
                )
            tensor.data[...] = src


class ValueGraph:
    """A differentiable computation: parameters + a builder function.

    `build(params, inputs)` assembles the eager op DAG and returns the
    output tensor; `forward` caches it, `backward` returns the gradient per
    trainable parameter. Rebuilding on every forward keeps parameter
    mutation (optimizer steps) trivially consistent.
    """

    def __init__(self, params: ParameterSet, build: Callable[[ParameterSet, dict], Tensor]):
        self.params = params
        self.build = build
        self.output: Tensor | None = None

    def forward(self, **inputs) -> Tensor:
        for _, p in self.params:
            p.grad = None
        self.output = self.build(self.params, inputs)
        return self.output

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self.output is None:
            raise GraphStateError("backward called before forward")
        self.output.backward(seed)
        grads = {}
        for name, p in self.params:
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        return grads
