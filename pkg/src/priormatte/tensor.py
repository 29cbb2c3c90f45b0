"""Dense tensor engine with reverse-mode differentiation.

Values live in numpy arrays (float32 by default, float64 for gradient-check
runs).  Every operation that participates in training records a backward
closure; `Tensor.backward()` walks the recorded graph in reverse topological
order.  Layout is row-major and reductions run in numpy's fixed left-to-right
order, so forward passes are bit-deterministic for identical inputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data plumbing)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def use_dtype(dtype):
    """Switch the default float width (float64 for oracle runs)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate grads of every reachable tensor with requires_grad.

        Repeated calls without zeroing accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """Learnable tensor; name is filled in when a model collects its params."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def relu(a):
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def absolute(a):
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a):
    """Tanh-approximate GELU (the common deep-learning surrogate).

    Bounded below 1e-3 absolute error against the exact erf form; the erf
    oracle lives in the test suite.
    """
    a = as_tensor(a)
    inner = tanh(mul(add(a, mul(power(a, 3.0), 0.044715)), _GELU_C))
    return mul(mul(a, 0.5), add(inner, 1.0))


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for i in ax:
            count *= a.shape[i]
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading dimensions broadcast in the numpy convention."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- shape manipulation ------------------------------------------------------


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def getitem(a, key):
    a = as_tensor(a)
    out_data = a.data[key]
    fancy = isinstance(key, (np.ndarray, list)) or (
        isinstance(key, tuple)
        and any(isinstance(k, (np.ndarray, list)) for k in key))

    def backward(g):
        if not a.requires_grad:
            return
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        a._accumulate(ga)

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))

    return _make(out_data, (a,), backward)


# -- neural-net layers as ops ------------------------------------------------


def softmax_last_dim(x):
    """Softmax over the trailing axis, stabilized by max subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not "
            f"match feature dim {x.shape[-1]}")
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """3x3 cross-correlation over a single [C,H,W] map.

    Cross-correlation convention (no kernel flip), matching the prevailing
    deep-learning usage.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d expects x[C,H,W] and w[O,C,3,3], got {x.shape}, {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    c, h, wd = x.shape
    if (h + 2 * pad - 3) % stride or (wd + 2 * pad - 3) % stride:
        raise ShapeError(
            f"conv2d output size not integral for input {x.shape}, "
            f"stride={stride}, pad={pad}")
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (wd + 2 * pad - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # [C,ho,wo,3,3]
    patches = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * 9)
    wmat = w.data.reshape(w.shape[0], c * 9)
    out_data = (patches @ wmat.T).T.reshape(w.shape[0], ho, wo)
    if bias is not None:
        out_data = out_data + as_tensor(bias).data[:, None, None]

    def backward(g):
        if w.requires_grad:
            gw = (g.reshape(w.shape[0], ho * wo) @ patches).reshape(w.shape)
            w._accumulate(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(3):
                for kj in range(3):
                    contrib = np.tensordot(w.data[:, :, ki, kj], g,
                                           axes=([0], [0]))
                    gxp[:, ki:ki + stride * ho:stride,
                        kj:kj + stride * wo:stride] += contrib
            if pad:
                gx = gxp[:, pad:pad + h, pad:pad + wd]
            else:
                gx = gxp
            x._accumulate(gx)

    parents = (x, w) if bias is None else (x, w, as_tensor(bias))
    return _make(out_data, parents, backward)


def upsample_bilinear(x, factor):
    """Bilinear upscale of a [C,H,W] map, align_corners=False convention."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"upsample_bilinear expects [C,H,W], got {x.shape}")
    if factor not in (2, 4, 8):
        raise ContractError(f"upsample factor must be 2, 4 or 8, got {factor}")
    c, h, w = x.shape
    oh, ow = h * factor, w * factor

    def axis_weights(n_out, n_in):
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        return i0, i1, frac

    y0, y1, fy = axis_weights(oh, h)
    x0, x1, fx = axis_weights(ow, w)
    wy0 = (1.0 - fy)[None, :, None]
    wy1 = fy[None, :, None]
    wx0 = (1.0 - fx)[None, None, :]
    wx1 = fx[None, None, :]
    d = x.data
    out_data = (d[:, y0][:, :, x0] * wy0 * wx0
                + d[:, y0][:, :, x1] * wy0 * wx1
                + d[:, y1][:, :, x0] * wy1 * wx0
                + d[:, y1][:, :, x1] * wy1 * wx1)

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        ch = np.arange(c)[:, None, None]
        for yi, wyv in ((y0, wy0), (y1, wy1)):
            for xi, wxv in ((x0, wx0), (x1, wx1)):
                np.add.at(gx, (ch, yi[None, :, None], xi[None, None, :]),
                          g * wyv * wxv)
        x._accumulate(gx)

    return _make(out_data.astype(x.dtype), (x,), backward)


# -- gradient oracle ---------------------------------------------------------


def finite_diff_check(f, x, h=1e-4, indices=None):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must rebuild its graph on every
    call.  Run in float64 for meaningful tolerances.  `indices` optionally
    restricts the check to a subset of flat coordinates (large layers).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    xt = Tensor(base.copy(), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad.ravel()

    flat = base.ravel()
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        lo = f(Tensor(base.copy())).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


# -- checkpoint format -------------------------------------------------------

_CKPT_MAGIC = b"PMATCKPT"
_CKPT_VERSION = 1


def save_checkpoint(params, path):
    """Write a flat name -> array archive.

    Layout: magic, version, entry count, then per entry a name, the shape and
    a little-endian float32 payload.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(
                value.data if isinstance(value, Tensor) else value,
                dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as a dict of name -> float32 array."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise ContractError(f"{path} is not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = arr.copy()
    return out
