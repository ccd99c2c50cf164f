"""A small reverse-mode autodiff over numpy arrays.

Only the operations the forecasting models need are provided.  Every op
records its parents and a closure mapping the output gradient to parent
gradients; :meth:`Tensor.backward` walks the graph in reverse topological
order.  Broadcasting is limited to cases where the result has the shape of one
operand (bias add, per-channel scale).
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

_state = {"dtype": np.dtype(np.float32), "grad": True}


class TensorError(ValueError):
    pass


def default_dtype() -> np.dtype:
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    old = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "fiub":
            arr = arr.astype(_state["dtype"], copy=False)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every participant."""
        if not self.requires_grad:
            raise TensorError("tensor is not attached to a differentiation graph")
        if grad is None:
            if self.data.size != 1:
                raise TensorError(f"backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
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
        return neg(self)

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

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# element-wise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 1 and g.ndim == 2 and shape[0] == g.shape[1]:
        return np.ones(g.shape[0], dtype=g.dtype) @ g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> tuple:
    out = np.broadcast_shapes(a.shape, b.shape)
    if out != a.shape and out != b.shape:
        raise TensorError(f"refusing to broadcast {a.shape} with {b.shape}")
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) may overflow to inf for very negative x; 1/inf is the right limit
    with np.errstate(over="ignore"):
        out = np.exp(-x)
    out += 1.0
    return np.reciprocal(out, out=out)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    y = a.data * s
    return _make(y, (a,), lambda g: (g * (s + y * (1.0 - s)),))


def dropout(a, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    a = as_tensor(a)
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shapes and reductions


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, back)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _make(ad @ bd, (a, b), back)


def linear(x, w, b=None) -> Tensor:
    """x [N, in] @ w [in, out] + b [out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _rowsum(a: np.ndarray) -> np.ndarray:
    """Sum over the last axis as a matrix-vector product (much faster than
    ``ndarray.sum`` for narrow rows)."""
    return a @ np.ones(a.shape[-1], dtype=a.dtype)


def _leadsum(a: np.ndarray) -> np.ndarray:
    """Sum over all leading axes."""
    flat = a.reshape(-1, a.shape[-1])
    return np.ones(flat.shape[0], dtype=a.dtype) @ flat


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    n = xd.shape[-1]
    xc = xd - (_rowsum(xd) / n)[..., None]
    inv = 1.0 / np.sqrt(_rowsum(xc * xc) / n + eps)
    xhat = xc * inv[..., None]
    gd = gamma.data

    def back(g):
        dgamma = _leadsum(g * xhat) if gamma.requires_grad else None
        dbeta = _leadsum(g) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            s1 = _rowsum(dxhat)[..., None]
            s2 = _rowsum(dxhat * xhat)[..., None]
            dx = (inv / n)[..., None] * (n * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# graph ops


def _scatter_matrix(index: np.ndarray, out_size: int, dtype) -> sp.csr_matrix:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= out_size):
        raise TensorError(f"scatter index out of range for size {out_size}")
    e = len(index)
    # coo -> csr keeps per-row column order, i.e. edge-list order
    return sp.csr_matrix(
        (np.ones(e, dtype=dtype), (index, np.arange(e))), shape=(out_size, e)
    )


def _scatter(values: np.ndarray, index: np.ndarray, out_size: int) -> np.ndarray:
    if len(index) == 0:
        return np.zeros((out_size,) + values.shape[1:], dtype=values.dtype)
    flat = values.reshape(len(index), -1)
    out = _scatter_matrix(index, out_size, values.dtype) @ flat
    return np.asarray(out, dtype=values.dtype).reshape((out_size,) + values.shape[1:])


def scatter_sum(messages, targets: np.ndarray, out_size: int) -> Tensor:
    """out[i] = sum of messages[e] over edges with targets[e] == i."""
    m = as_tensor(messages)
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) != m.shape[0]:
        raise TensorError("one target per message row is required")
    out = _scatter(m.data, targets, out_size)
    return _make(out, (m,), lambda g: (g[targets],))


def take_rows(x, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[start:stop]`` along the first axis."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(x.data[start:stop], (x,), back)


def gather(x, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by ``index`` (repeats allowed)."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise TensorError(f"gather index out of range for size {n}")
    return _make(x.data[index], (x,), lambda g: (_scatter(g, index, n),))


# ---------------------------------------------------------------------------
# convolutions and rearrangements


def conv3d(x, weight, bias, stride) -> Tensor:
    """Non-overlapping 3-D convolution of x [T, C, H, W].

    ``weight`` is [C', C, kT, kH, kW] and must equal ``stride`` in size.
    Output is [C', T', H', W'] with the time axis squeezed when T' == 1.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 5:
        raise TensorError("conv3d expects x [T,C,H,W] and weight [C',C,kT,kH,kW]")
    T, C, H, W = x.shape
    co, ci, kt, kh, kw = weight.shape
    if ci != C:
        raise TensorError(f"conv3d channel mismatch: input {C}, weight {ci}")
    if tuple(stride) != (kt, kh, kw):
        raise TensorError("conv3d requires kernel == stride")
    if T % kt or H % kh or W % kw:
        raise TensorError(f"input {x.shape} not divisible by stride {tuple(stride)}")
    to, ho, wo = T // kt, H // kh, W // kw
    cols = (
        x.data.reshape(to, kt, C, ho, kh, wo, kw)
        .transpose(0, 3, 5, 2, 1, 4, 6)
        .reshape(to * ho * wo, C * kt * kh * kw)
    )
    wmat = weight.data.reshape(co, -1)
    y = cols @ wmat.T + bias.data
    out = y.reshape(to, ho, wo, co).transpose(3, 0, 1, 2)
    squeeze = to == 1
    if squeeze:
        out = out[:, 0]

    def back(g):
        if squeeze:
            g = g[:, None]
        g2 = g.transpose(1, 2, 3, 0).reshape(-1, co)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = (
                (g2 @ wmat)
                .reshape(to, ho, wo, C, kt, kh, kw)
                .transpose(0, 4, 3, 1, 5, 2, 6)
                .reshape(T, C, H, W)
            )
        return dx, dw, db

    return _make(np.ascontiguousarray(out), (x, weight, bias), back)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 'same' convolution with zero padding; x [N, C, H, W]."""
    if bias is None:
        bias = Tensor(np.zeros(weight.shape[0], dtype=as_tensor(weight).dtype))
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    N, C, H, W = x.shape
    co, ci, k, k2 = weight.shape
    if ci != C or k != k2 or k % 2 == 0:
        raise TensorError(f"conv2d expects an odd square kernel over {C} channels")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = (
        sliding_window_view(xp, (k, k), axis=(2, 3))
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(N * H * W, C * k * k)
    )
    wmat = weight.data.reshape(co, -1)
    out = (cols @ wmat.T + bias.data).reshape(N, H, W, co).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, co)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(N, H, W, C, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + H, j : j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p : p + H, p : p + W]
        return dx, dw, db

    return _make(np.ascontiguousarray(out), (x, weight, bias), back)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    c2, h, w = a.shape
    c = c2 // (r * r)
    return a.reshape(c, r, r, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    c, hr, wr = a.shape
    h, w = hr // r, wr // r
    return a.reshape(c, h, r, w, r).transpose(0, 2, 4, 1, 3).reshape(c * r * r, h, w)


def pixel_shuffle(x, r: int) -> Tensor:
    """[r*r*C, H, W] -> [C, r*H, r*W]; out[c, r*y+dy, r*x+dx] = in[c*r*r + dy*r + dx, y, x]."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] % (r * r):
        raise TensorError(f"pixel_shuffle: {x.shape[0]} channels not divisible by {r * r}")
    return _make(_shuffle(x.data, r), (x,), lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x, r: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] % r or x.shape[2] % r:
        raise TensorError(f"pixel_unshuffle: spatial dims not divisible by {r}")
    return _make(_unshuffle(x.data, r), (x,), lambda g: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits, target, mask=None) -> Tensor:
    """Mean binary cross-entropy over the cells selected by ``mask``.

    Cells outside the mask are never read, so changing them cannot change
    the result.
    """
    z = as_tensor(logits)
    y = np.asarray(target, dtype=z.dtype)
    if y.shape != z.shape:
        raise TensorError(f"target shape {y.shape} != logits shape {z.shape}")
    sel = np.ones(z.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(sel.sum())
    if n == 0:
        raise TensorError("loss mask selects no cells")
    zs, ys = z.data[sel], y[sel]
    per = np.maximum(zs, 0) - zs * ys + np.log1p(np.exp(-np.abs(zs)))
    loss = np.asarray(per.sum() / n, dtype=z.dtype)

    def back(g):
        dz = np.zeros_like(z.data)
        dz[sel] = (_sigmoid(zs) - ys) * (g / n)
        return (dz,)

    return _make(loss, (z,), back)


# ---------------------------------------------------------------------------
# debug dump: uint32 ndim, uint32 dims, little-endian float32 payload


def dump_tensor(t, path) -> None:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape)


# ---------------------------------------------------------------------------
# finite differences


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, indices, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. selected entries of ``t``."""
    flat = t.data.reshape(-1)
    if not np.shares_memory(flat, t.data):
        raise TensorError("numerical_grad needs a contiguous tensor")
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(indices):
            old = flat[i]
            flat[i] = old + eps
            hi = float(fn().data)
            flat[i] = old - eps
            lo = float(fn().data)
            flat[i] = old
            out[k] = (hi - lo) / (2 * eps)
    return out


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
