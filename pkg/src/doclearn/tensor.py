"""Dense float64 tensors with a small reverse-mode autodiff tape.

Only the operations a small CNN needs are provided: matmul, conv2d,
relu, maxpool2d, flatten/reshape, bias addition and a few elementwise
helpers.  Every op checks its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating it.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _checked(arr: np.ndarray, op: str) -> np.ndarray:
    # a sum is NaN/Inf whenever any element is (or on overflow, also an error)
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tensor:
    """An n-d float64 array plus an optional node on the gradient tape.

    ``parents`` and ``backward_rule`` are filled in by ops; user code only
    sets ``data`` and ``requires_grad``.  ``grad`` accumulates across
    :meth:`backward` calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_rule", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        # leaves own a private copy; op outputs are fresh arrays already
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        self.data = _checked(arr, op)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tsum(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], rule, op: str) -> Tensor:
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=inputs, backward_rule=rule, op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; a node seen while still on the stack means a cycle
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise RuntimeError("cycle detected in gradient tape")
            state[key] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            if parent.requires_grad:
                ps = state.get(id(parent))
                if ps == 1:
                    raise RuntimeError("cycle detected in gradient tape")
                if ps is None:
                    stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any tracked tensor")
    order = _topo_order(loss)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node.backward_rule is None:
            continue
        for parent, pg in zip(node.parents, node.backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            _checked(pg, f"backward of {node.op}")
            k = id(parent)
            upstream[k] = pg if k not in upstream else upstream[k] + pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        ga = g if a.data.size == g.size else np.sum(g).reshape(a.shape)
        gb = g if b.data.size == g.size else np.sum(g).reshape(b.shape)
        return ga, gb

    return _make(a.data + b.data, (a, b), rule, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        ga = g * b.data
        gb = g * a.data
        if ga.shape != a.shape:
            ga = np.sum(ga).reshape(a.shape)
        if gb.shape != b.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _make(a.data * b.data, (a, b), rule, "mul")


def tsum(a: Tensor) -> Tensor:
    return _make(np.sum(a.data), (a,), lambda g: (np.full(a.shape, g.item()),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule, "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias: axis 1 of ``x`` must match ``bias``."""
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit input {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def rule(g):
        return g, g.sum(axis=axes)

    return _make(x.data + bias.data.reshape(bshape), (x, bias), rule, "add_bias")


def relu(x: Tensor) -> Tensor:
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    if kernel > size + 2 * padding:
        raise ShapeError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation, NCHW input and FCHW kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (n, c, oh, ow, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def rule(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), rule, "conv2d")


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties resolve to the first window element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    oh = conv_output_size(h, kernel, stride, 0)
    ow = conv_output_size(w, kernel, stride, 0)
    if stride == kernel and h == oh * kernel and w == ow * kernel:
        return _maxpool_tiled(x, kernel)
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gx = np.zeros_like(x.data)
        ri = np.arange(oh)[:, None] * stride + arg // kernel
        ci = np.arange(ow)[None, :] * stride + arg % kernel
        ni = np.arange(n)[:, None, None, None]
        chi = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, chi, ri, ci), g)
        return (gx,)

    return _make(out, (x,), rule, "maxpool2d")


def _maxpool_tiled(x: Tensor, k: int) -> Tensor:
    # non-overlapping windows covering the input exactly
    offsets = [(i, j) for i in range(k) for j in range(k)]
    out = x.data[:, :, ::k, ::k].copy()
    for i, j in offsets[1:]:
        np.maximum(out, x.data[:, :, i::k, j::k], out=out)

    def rule(g):
        gx = np.zeros_like(x.data)
        unclaimed = np.ones(out.shape, dtype=bool)
        for i, j in offsets:
            hit = unclaimed & (x.data[:, :, i::k, j::k] == out)
            gx[:, :, i::k, j::k] = np.where(hit, g, 0.0)
            unclaimed &= ~hit
        return (gx,)

    return _make(out, (x,), rule, "maxpool2d")


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``x``.

    ``f`` is evaluated on fresh untracked tensors, so it never touches the
    tape of ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64).copy()
    flat = base.reshape(-1)
    grad = np.empty_like(flat)

    def value(arr):
        out = f(Tensor(arr.reshape(base.shape)))
        out = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
        if out.size != 1:
            raise ShapeError(f"finite_difference_grad needs a scalar function, got shape {out.shape}")
        return float(out.reshape(()))

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value(flat)
        flat[i] = orig - eps
        fm = value(flat)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(base.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)

