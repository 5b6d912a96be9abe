"""Minimal dense-tensor reverse-mode autodiff engine.

Everything is float64 and numpy-backed. The tape is built eagerly during the
forward pass (each op output keeps closures over its parents) and torn down
after ``backward``. No broadcasting beyond scalar-tensor; reshape explicitly.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class Tensor:
    """Dense N-d array with an optional gradient tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    # -- plumbing -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad ancestor."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # free the tape: intermediate grads are not user-visible state
                node._parents = ()
                node._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise ops ------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        if np.ndim(other) == 0:
            return Tensor(np.float64(other))
        raise TypeError("only Tensor or scalar operands are supported")

    def _check_same_shape(self, other: "Tensor"):
        if self.shape != other.shape and self.size != 1 and other.size != 1:
            raise ValueError(f"shape mismatch: {self.shape} vs {other.shape}")

    def __add__(self, other):
        other = self._coerce(other)
        self._check_same_shape(other)
        a, b = self, other

        def bw(g):
            if a.requires_grad:
                a._accumulate(g if a.size > 1 or g.size == 1 else g.sum())
            if b.requires_grad:
                b._accumulate(g if b.size > 1 or g.size == 1 else g.sum())

        return Tensor._result(a.data + b.data, (a, b), "add", bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(-g)

        return Tensor._result(-a.data, (a,), "neg", bw)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_same_shape(other)
        a, b = self, other
        ad, bd = a.data, b.data

        def bw(g):
            if a.requires_grad:
                ga = g * bd
                a._accumulate(ga if a.size > 1 or ga.size == 1 else ga.sum())
            if b.requires_grad:
                gb = g * ad
                b._accumulate(gb if b.size > 1 or gb.size == 1 else gb.sum())

        return Tensor._result(ad * bd, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        return self * other ** -1.0

    def __pow__(self, exponent: float):
        a = self
        ad = a.data

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * exponent * ad ** (exponent - 1.0))

        return Tensor._result(ad ** exponent, (a,), "pow", bw)

    def relu(self):
        a = self
        mask = a.data > 0

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._result(a.data * mask, (a,), "relu", bw)

    def sigmoid(self):
        a = self
        s = 1.0 / (1.0 + np.exp(-a.data))

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * s * (1.0 - s))

        return Tensor._result(s, (a,), "sigmoid", bw)

    def log(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._result(np.log(a.data), (a,), "log", bw)

    def clamp(self, lo: float, hi: float):
        a = self
        mask = (a.data > lo) & (a.data < hi)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * mask)

        return Tensor._result(np.clip(a.data, lo, hi), (a,), "clamp", bw)

    def abs(self):
        a = self
        sign = np.sign(a.data)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g * sign)

        return Tensor._result(np.abs(a.data), (a,), "abs", bw)

    # -- reductions / shape ops -----------------------------------------------

    def sum(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a._accumulate(np.full_like(a.data, float(g)))

        return Tensor._result(np.asarray(a.data.sum()), (a,), "sum", bw)

    def mean(self):
        return self.sum() / float(self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.reshape(old))

        return Tensor._result(a.data.reshape(shape), (a,), "reshape", bw)

    def transpose(self, axes: Sequence[int]):
        a = self
        inv = np.argsort(axes)

        def bw(g):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))

        return Tensor._result(a.data.transpose(axes), (a,), "transpose", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product with gradient rules."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ bd.T)
        if b.requires_grad:
            b._accumulate(ad.T @ g)

    return Tensor._result(ad @ bd, (a, b), "matmul", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._result(np.concatenate([t.data for t in parts], axis=axis),
                          parts, "concat", bw)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x D row vector (bias) to every row of an N x D matrix."""
    if x.ndim != 2 or b.shape != (1, x.shape[1]):
        raise ValueError(f"add_rowvec shapes incompatible: {x.shape} + {b.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0, keepdims=True))

    return Tensor._result(x.data + b.data, (x, b), "add_rowvec", bw)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (shape C) to a C x H x W map."""
    if x.ndim != 3 or b.shape != (x.shape[0],):
        raise ValueError(f"add_channel_bias shapes incompatible: {x.shape} + {b.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return Tensor._result(x.data + b.data[:, None, None], (x, b), "add_channel_bias", bw)


def gather_rows(t: Tensor, idx) -> Tensor:
    """Select rows ``t[idx]`` from a 2D tensor; adjoint is scatter-add."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= t.shape[0]):
        raise IndexError("gather_rows index out of range")
    a = t

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

    return Tensor._result(a.data[idx], (a,), "gather_rows", bw)


def scatter_add_rows(t: Tensor, idx, num_rows: int) -> Tensor:
    """Sum rows of ``t`` into an output of ``num_rows`` rows at positions ``idx``."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise IndexError("scatter_add_rows index out of range")
    a = t
    out = np.zeros((num_rows,) + a.shape[1:])
    np.add.at(out, idx, a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[idx])

    return Tensor._result(out, (a,), "scatter_add_rows", bw)


# -- convolution --------------------------------------------------------------

def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]          # C x Ho x Wo x kh x kw
    ho, wo = windows.shape[1], windows.shape[2]
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, shape, kh, kw, stride, padding, ho, wo) -> np.ndarray:
    c, h, w = shape
    acc = np.zeros((c, h + 2 * padding, w + 2 * padding))
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            acc[:, i:i + ho * stride:stride, j:j + wo * stride:stride] += cols[:, i, j]
    if padding:
        acc = acc[:, padding:-padding, padding:-padding]
    return acc


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution of a C_in x H x W map with C_out x C_in x kh x kw weights."""
    c_out, c_in, kh, kw = weight.shape
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ValueError(f"conv2d input {x.shape} incompatible with weight {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    _, h, w = x.shape
    ho = _conv_out_extent(h, kh, stride, padding)
    wo = _conv_out_extent(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output extent non-positive for input {x.shape}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(c_out, c_in * kh * kw)
    out = (wmat @ cols).reshape(c_out, ho, wo)

    def bw(g):
        g2 = g.reshape(c_out, ho * wo)
        if weight.requires_grad:
            weight._accumulate((g2 @ cols.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = wmat.T @ g2
            x._accumulate(_col2im(gcols, x.shape, kh, kw, stride, padding, ho, wo))

    return Tensor._result(out, (x, weight), "conv2d", bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a C x H x W map."""
    a = x
    c, h, w = x.shape

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    out = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)
    return Tensor._result(out, (a,), "upsample2x", bw)


def bilinear_sample(feature_map: Tensor, uv: np.ndarray) -> Tensor:
    """Sample a C x H x W map at N continuous (u, v) pixel coordinates -> N x C.

    Coordinates outside [0, W-1] x [0, H-1] yield the zero vector. Differentiable
    with respect to the feature map only.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    c, h, w = feature_map.shape
    u, v = uv[:, 0], uv[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(uc), w - 2 if w > 1 else 0).astype(np.intp)
    v0 = np.minimum(np.floor(vc), h - 2 if h > 1 else 0).astype(np.intp)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = uc - u0
    dv = vc - v0
    w00 = (1 - du) * (1 - dv) * inside
    w01 = du * (1 - dv) * inside
    w10 = (1 - du) * dv * inside
    w11 = du * dv * inside
    fm = feature_map.data
    out = (fm[:, v0, u0] * w00 + fm[:, v0, u1] * w01 +
           fm[:, v1, u0] * w10 + fm[:, v1, u1] * w11).T

    def bw(g):
        if feature_map.requires_grad:
            acc = np.zeros_like(fm)
            gt = g.T  # C x N
            for wgt, vv, uu in ((w00, v0, u0), (w01, v0, u1),
                                (w10, v1, u0), (w11, v1, u1)):
                np.add.at(acc.transpose(1, 2, 0), (vv, uu), (gt * wgt).T)
            feature_map._accumulate(acc)

    return Tensor._result(out, (feature_map,), "bilinear_sample", bw)


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction, applied in place to f64 parameters."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                raise ValueError("Adam.step() called with a parameter missing its grad")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint format --------------------------------------------------------
#
# Byte layout (all integers little-endian):
#   magic  b"BFCK"
#   u8     version (currently 1)
#   u32    record count
#   per record:
#     u16  name length, then utf-8 name bytes
#     u8   ndim, then ndim x u32 extents
#     f64  data, row-major, little-endian

_CKPT_MAGIC = b"BFCK"
_CKPT_VERSION = 1


def save_checkpoint(params: dict, path):
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<B", _CKPT_VERSION))
        f.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<B", f.read(1))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.copy()
        return out
