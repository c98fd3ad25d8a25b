"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are numpy arrays (float32 for training, float64 for gradient
verification). Each `Tensor` is a node in an acyclic compute graph; ops
record their parents and a vector-Jacobian closure, and `backward` walks
the graph once in reverse topological order. The operator set is fixed:
exactly what the exchange encoder, cross-fusion block, U-shaped decoder
and loss need.
"""

import hashlib

import numpy as np
from numpy.lib.stride_tricks import as_strided

NARROW = np.float32
WIDE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class Tensor:
    """A value plus its place in the differentiation graph.

    `grad` is materialized lazily: leaves accumulate gradients across
    backward calls until explicitly zeroed; interior nodes never store one.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, (np.ndarray, np.generic)):
            self.data = np.asarray(data)  # numpy scalars keep their dtype
        else:
            self.data = np.asarray(data, dtype=NARROW)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp) -> Tensor:
    """Create an op output; graph edges are dropped when no parent needs them."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops (with numpy broadcasting)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", NARROW))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _make(ad + bd, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", NARROW))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)

    return _make(ad - bd, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", NARROW))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _wrap(a, getattr(b, "dtype", NARROW))
    b = _wrap(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), vjp)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(ad ** p, (a,), vjp)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (out > 0),)

    return _make(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, overflow-safe for large |x|."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes through on [lo, hi] and is zero outside."""
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)

    def vjp(g):
        return (g * mask,)

    return _make(np.clip(ad, lo, hi), (a,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= shape[ax]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / n,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def concat(parts, axis=0) -> Tensor:
    """Concatenate along `axis`; all other extents must match."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat needs at least one part")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise ShapeError(f"concat extent mismatch: {s} vs {ref} on axis {axis}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def upsample_nearest2(a: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of a C x H x W map."""
    c, h, w = a.data.shape
    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul mismatch: {ad.shape} x {bd.shape}")

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max-subtraction for stability."""
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for rank {x.ndim}")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = as_strided(xp, shape=(c, k, k, ho, wo),
                      strides=(s0, s1, s2, s1 * stride, s2 * stride))
    return view.reshape(c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation of a C_in x H x W map with C_out x C_in x k x k kernels."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects C x H x W input and O x C x k x k kernel")
    c_in, h, w = x.data.shape
    c_out, ck, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    if ck != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, kernel {ck}")
    if padding < 0 or stride < 1:
        raise ShapeError("conv2d needs padding >= 0 and stride >= 1")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(f"conv2d non-integral output extent for {h}x{w}, k={kh}, "
                         f"stride={stride}, padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, stride, ho, wo)
    kmat = kernel.data.reshape(c_out, -1)
    out = kmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]

    def vjp(g):
        gmat = g.reshape(c_out, -1)
        dk = (gmat @ cols.T).reshape(kernel.data.shape)
        dcols = (kmat.T @ gmat).reshape(c_in, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, i, j]
        dx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        if bias is not None:
            return dx, dk, gmat.sum(axis=1)
        return dx, dk

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out.reshape(c_out, ho, wo), parents, vjp)


def conv1d(x: Tensor, kernel: Tensor, padding: int | None = None) -> Tensor:
    """Length-preserving 1D convolution of a 1 x C row with a 1 x 1 x k kernel."""
    if x.data.ndim != 2 or x.data.shape[0] != 1 or kernel.data.ndim != 3:
        raise ShapeError("conv1d expects 1 x C input and 1 x 1 x k kernel")
    k = kernel.data.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {k}")
    if padding is None:
        padding = (k - 1) // 2
    if padding != (k - 1) // 2:
        raise ShapeError("conv1d padding must preserve length: (k-1)/2")
    c = x.data.shape[1]
    xp = np.pad(x.data[0], (padding, padding))
    w = kernel.data[0, 0]
    out = np.zeros(c, dtype=x.data.dtype)
    for j in range(k):
        out += xp[j:j + c] * w[j]

    def vjp(g):
        g1 = g[0]
        dw = np.array([[[float((g1 * xp[j:j + c]).sum()) for j in range(k)]]], dtype=g.dtype)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[j:j + c] += g1 * w[j]
        return dxp[padding:padding + c][None, :], dw

    return _make(out[None, :], (x, kernel), vjp)


POOL_MODES = ("gap", "channel_avg", "channel_max", "spatial_max2x2")


def pool(x: Tensor, mode: str) -> Tensor:
    """Pooling over a C x H x W map.

    gap -> C x 1 x 1 spatial mean; channel_avg / channel_max -> 1 x H x W
    reduced over channels; spatial_max2x2 -> C x H/2 x W/2. Max modes route
    the gradient to the first-index argmax.
    """
    if x.data.ndim != 3:
        raise ShapeError("pool expects a C x H x W tensor")
    c, h, w = x.data.shape
    if mode == "gap":
        out = x.data.mean(axis=(1, 2), keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g, (c, h, w)) / (h * w),)

    elif mode == "channel_avg":
        out = x.data.mean(axis=0, keepdims=True)

        def vjp(g):
            return (np.broadcast_to(g, (c, h, w)) / c,)

    elif mode == "channel_max":
        idx = x.data.argmax(axis=0)
        out = np.take_along_axis(x.data, idx[None], axis=0)

        def vjp(g):
            dx = np.zeros((c, h, w), dtype=g.dtype)
            np.put_along_axis(dx, idx[None], g, axis=0)
            return (dx,)

    elif mode == "spatial_max2x2":
        if h % 2 or w % 2:
            raise ShapeError(f"spatial_max2x2 needs even extents, got {h}x{w}")
        blocks = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4) \
                       .reshape(c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def vjp(g):
            db = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
            np.put_along_axis(db, idx[..., None], g[..., None], axis=-1)
            return (db.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
                      .reshape(c, h, w),)

    else:
        raise ValueError(f"unknown pool mode {mode!r}")
    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# parameters and backward
# ---------------------------------------------------------------------------

class ParamStore:
    """Named learnable tensors with stable insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def backward(loss: Tensor, params: ParamStore | None = None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    `loss` must be scalar. With `params` given, unreachable parameters get
    an explicit zero gradient so optimizer steps see a full set.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    if params is not None:
        for t in params.tensors():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
