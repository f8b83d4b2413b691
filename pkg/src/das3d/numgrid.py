"""Dense grids, bilinear sampling and a small reverse-mode autodiff core.

Everything is float64 numpy underneath. A :class:`Tensor` records the op
that produced it; :meth:`Tensor.backward` walks the recorded graph in
reverse topological order and accumulates ``.grad`` on every node that
requires gradients.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GraphError(RuntimeError):
    """Raised when a computation graph cannot be traversed (e.g. a cycle)."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is not."""


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers ---------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        if self.data.size != 1 and grad is None:
            raise ShapeError("backward() without a seed gradient needs a scalar output")
        seed = np.ones_like(self.data) if grad is None else _as_array(grad).reshape(self.shape)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        sparse: dict[int, list[_SparseGrad]] = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            pieces = sparse.pop(id(node), None)
            if pieces:
                g = _densify(node.shape, g, pieces)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, _SparseGrad):
                    sparse.setdefault(key, []).append(pg)
                elif key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS post-order; raises GraphError on a cycle."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    state[id(root)] = 1
    while stack:
        node, i = stack.pop()
        if i < len(node._parents):
            stack.append((node, i + 1))
            child = node._parents[i]
            if not child.requires_grad:
                continue
            s = state.get(id(child))
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            if s is None:
                state[id(child)] = 1
                stack.append((child, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return Tensor._make(out, (a, b), bw)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._make(out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo, hi) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    lo_arr, hi_arr = _as_array(lo), _as_array(hi)
    inside = (a.data >= lo_arr) & (a.data <= hi_arr)
    out = np.clip(a.data, lo_arr, hi_arr)
    return Tensor._make(out, (a,), lambda g: (_unbroadcast(g * inside, a.shape),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


class _SparseGrad:
    """Gradient of a fancy-index gather, densified once per target node."""

    __slots__ = ("idx", "values")

    def __init__(self, idx, values):
        self.idx = idx
        self.values = values


def _densify(shape, dense, pieces) -> np.ndarray:
    full = np.zeros(shape) if dense is None else dense.copy()
    for piece in pieces:
        np.add.at(full, piece.idx, piece.values)
    return full


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        if _is_fancy(idx):
            return (_SparseGrad(idx, g),)
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return Tensor._make(out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(out, tuple(ts), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return Tensor._make(out, tuple(ts), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), bw)


def conv3x3(x, weight, bias=None) -> Tensor:
    """Zero-padded 'same' 3x3 convolution.

    x: (B, H, W, Cin), weight: (3, 3, Cin, Cout), bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[3]:
        raise ShapeError(f"conv3x3 shapes {x.shape} * {weight.shape}")
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, weight.shape[3]))
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy:dy + H, dx:dx + W, :] @ weight.data[dy, dx]
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents = (x, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        for dy in range(3):
            for dx in range(3):
                gxp[:, dy:dy + H, dx:dx + W, :] += g @ weight.data[dy, dx].T
                patch = xp[:, dy:dy + H, dx:dx + W, :].reshape(-1, xp.shape[-1])
                gw[dy, dx] = patch.T @ g2
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, bw)


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def bilinear_corners(points, height: int, width: int):
    """Clamp continuous (x, y) points to the grid and split into corners.

    Returns integer corner indices (x0, x1, y0, y1) and differentiable
    fractional weights (wx, wy) as tensors of shape ``points.shape[:-1]``.
    Cell (i, j) sits at continuous coordinate (x=j, y=i).
    """
    points = as_tensor(points)
    if not np.all(np.isfinite(points.data)):
        bad = np.argwhere(~np.isfinite(points.data))[0]
        raise NonFiniteError(f"non-finite sample point at index {tuple(bad[:-1])}")
    x = clip(points[..., 0], 0.0, width - 1.0)
    y = clip(points[..., 1], 0.0, height - 1.0)
    x0 = np.floor(x.data).astype(np.int64)
    y0 = np.floor(y.data).astype(np.int64)
    x0 = np.minimum(x0, max(width - 2, 0))
    y0 = np.minimum(y0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = x - x0.astype(np.float64)
    wy = y - y0.astype(np.float64)
    return (x0, x1, y0, y1), (wx, wy)


def bilinear_combine(v00, v01, v10, v11, wx, wy) -> Tensor:
    """Blend four corner values; v01 is (y0, x1), v10 is (y1, x0)."""
    wx = reshape(wx, wx.shape + (1,))
    wy = reshape(wy, wy.shape + (1,))
    # (1 - w) * a + w * b is exact at both w = 0 and w = 1
    ux, uy = 1.0 - wx, 1.0 - wy
    top = v00 * ux + v01 * wx
    bottom = v10 * ux + v11 * wx
    return top * uy + bottom * wy


def bilinear_sample(grid, points) -> Tensor:
    """Sample a (H, W, C) map at continuous (x, y) points of shape (..., 2).

    Points outside the grid are border-clamped to [0, W-1] x [0, H-1].
    Differentiable w.r.t. both the map values and the points.
    """
    grid = as_tensor(grid.values if isinstance(grid, DenseMap) else grid)
    if grid.ndim != 3:
        raise ShapeError(f"expected a (H, W, C) map, got {grid.shape}")
    H, W, _ = grid.shape
    (x0, x1, y0, y1), (wx, wy) = bilinear_corners(points, H, W)
    return bilinear_combine(grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1], wx, wy)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def gradcheck(fn, params: list[Tensor], eps: float = 1e-5, floor: float = 1e-6,
              max_elems: int | None = None, rng=None) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. Relative error per element is |a - n| / max(|a|, |n|, floor).
    ``max_elems`` limits the number of probed entries per parameter.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            rng = np.random.default_rng(0) if rng is None else rng
            idx = rng.choice(flat.size, size=max_elems, replace=False)
        a_flat = a.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# DenseMap container and serialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenseMap:
    """A row-major (H, W, C) grid of finite float64 values."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"DenseMap needs (H, W, C) with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("DenseMap values must be finite")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def header(self) -> dict:
        return {"height": self.height, "width": self.width, "channels": self.channels,
                "dtype": "f64", "layout": "row-major"}

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, header: dict, raw: bytes, offset: int = 0) -> "DenseMap":
        if header.get("dtype", "f64") != "f64" or header.get("layout", "row-major") != "row-major":
            raise ValueError(f"unsupported map encoding: {header}")
        shape = (int(header["height"]), int(header["width"]), int(header["channels"]))
        count = shape[0] * shape[1] * shape[2]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        return cls(arr.reshape(shape).astype(np.float64))


def save_dense_map(path, dmap: DenseMap) -> None:
    """Write ``path`` (JSON header) and ``path`` with a .bin suffix (values)."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    header = dict(dmap.header(), data=bin_path.name)
    bin_path.write_bytes(dmap.to_bytes())
    path.write_text(json.dumps(header, indent=2) + "\n")


def load_dense_map(path) -> DenseMap:
    path = Path(path)
    header = json.loads(path.read_text())
    raw = (path.parent / header.get("data", path.with_suffix(".bin").name)).read_bytes()
    return DenseMap.from_bytes(header, raw)
