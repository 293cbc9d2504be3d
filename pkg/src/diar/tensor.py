"""Minimal dense tensors with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record the operations that produced them in a
graph of parent links.  Calling ``backward()`` on a scalar result walks the
graph in reverse topological order and accumulates gradients into every
reachable tensor that has ``requires_grad`` set.

The op set is intentionally small: just enough arithmetic, structural
reshuffling, convolution and attention plumbing to express the reconstruction
models.  Every differentiable op listed in ``REGISTERED_OPS`` has its backward
rule checked against central finite differences in the test suite.
"""

from __future__ import annotations

import functools
import struct

import numpy as np

# Ops with a registered backward rule.  The gradient test suite asserts that
# it covers every name in this list.
REGISTERED_OPS = [
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "index_select",
    "concat",
    "reduce_sum",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "conv2d",
    "upsample2x",
    "scale",
]


class Tensor:
    """A numpy-backed array node in a reverse-mode gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output, got shape %s" % (self.data.shape,))
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def shape_error(op, *shapes):
    return ValueError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise shape_error("add", a.shape, b.shape)
    out = Tensor(out_data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data - b.data
    except ValueError:
        raise shape_error("sub", a.shape, b.shape)
    out = Tensor(out_data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise shape_error("mul", a.shape, b.shape)
    out = Tensor(out_data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = bwd
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data / b.data
    except ValueError:
        raise shape_error("div", a.shape, b.shape)
    out = Tensor(out_data, parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._backward = bwd
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    out._backward = bwd
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (kept out of the graph)."""
    out = Tensor(a.data * s, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports identical leading batch dimensions."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise shape_error("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise shape_error("matmul", a.shape, b.shape)
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    out._backward = bwd
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    out._backward = bwd
    return out


def index_select(a: Tensor, flat_index: np.ndarray, out_shape) -> Tensor:
    """Gather flattened elements of ``a`` at ``flat_index``; the workhorse
    behind rolls, replicate padding and cropping.  Backward scatters with
    accumulation, so repeated indices are handled correctly."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    out = Tensor(a.data.reshape(-1)[flat_index].reshape(out_shape), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            acc = np.bincount(
                flat_index.reshape(-1),
                weights=g.reshape(-1).astype(np.float64),
                minlength=a.data.size,
            )
            a._accumulate(acc.reshape(a.shape).astype(a.dtype))

    out._backward = bwd
    return out


def roll(a: Tensor, shifts, axes) -> Tensor:
    idx = np.arange(a.data.size).reshape(a.shape)
    idx = np.roll(idx, shifts, axis=axes)
    return index_select(a, idx, a.shape)


def replicate_pad(a: Tensor, pad_widths) -> Tensor:
    """Edge-replicating pad; ``pad_widths`` is a per-axis (before, after) list."""
    idx = np.arange(a.data.size).reshape(a.shape)
    idx = np.pad(idx, pad_widths, mode="edge")
    return index_select(a, idx, idx.shape)


def crop(a: Tensor, slices) -> Tensor:
    idx = np.arange(a.data.size).reshape(a.shape)
    idx = idx[tuple(slices)]
    return index_select(a, idx, idx.shape)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    out._backward = bwd
    return out


def stack(tensors, axis=0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    out._backward = bwd
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    out._backward = bwd
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    out._backward = bwd
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    out._backward = bwd
    return out


LAYER_NORM_EPS = 1e-5


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise shape_error("layer_norm", a.shape, gamma.shape, beta.shape)
    mu = mean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = _rsqrt(add(var, Tensor(np.asarray(LAYER_NORM_EPS, dtype=a.dtype))))
    return add(mul(mul(centered, inv), gamma), beta)


def _rsqrt(a: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(a.data)
    out = Tensor(y, parents=(a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (-0.5) * y / a.data)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@functools.lru_cache(maxsize=None)
def _im2col_index(c_in, h, w, k, stride, pad):
    """Flat indices into the zero-padded input that lay out conv patches as
    columns: result shape (c_in*k*k, oh*ow).  Cached: the same geometry
    recurs for every conv call of a given layer."""
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = _conv_out_extent(h, k, stride, pad)
    ow = _conv_out_extent(w, k, stride, pad)
    c_idx = np.repeat(np.arange(c_in), k * k)
    ky, kx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    ky = np.tile(ky.ravel(), c_in)
    kx = np.tile(kx.ravel(), c_in)
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    oy = oy.ravel() * stride
    ox = ox.ravel() * stride
    rows = ky[:, None] + oy[None, :]
    cols = kx[:, None] + ox[None, :]
    return (c_idx[:, None] * hp * wp + rows * wp + cols), oh, ow


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with a (C_out, C_in, k, k) kernel and zero
    padding; the input is (C_in, H, W) or batched (N, C_in, H, W)."""
    if x.data.ndim not in (3, 4) or w.data.ndim != 4:
        raise shape_error("conv2d", x.shape, w.shape)
    batched = x.data.ndim == 4
    x4 = x.data if batched else x.data[None]
    n, c_in, h, wid = x4.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise shape_error("conv2d", x.shape, w.shape)
    if k % 2 == 0:
        raise ValueError("conv2d: kernel extent must be odd")
    oh = _conv_out_extent(h, k, stride, pad)
    ow = _conv_out_extent(wid, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: non-positive output extent {oh}x{ow}")

    hp, wp = h + 2 * pad, wid + 2 * pad
    if pad:
        xp = np.zeros((n, c_in, hp, wp), dtype=x.dtype)
        xp[:, :, pad:-pad, pad:-pad] = x4
    else:
        xp = x4
    col_idx, oh, ow = _im2col_index(c_in, h, wid, k, stride, pad)
    # gather per sample with np.take: a single advanced index over the batch
    # axis would produce a non-contiguous result that BLAS handles poorly
    flat = xp.reshape(n, -1)
    cols = np.empty((n,) + col_idx.shape, dtype=x.dtype)
    for i in range(n):
        np.take(flat[i], col_idx, out=cols[i])
    w_mat = w.data.reshape(c_out, -1)
    out_data = (w_mat @ cols).reshape(n, c_out, oh, ow)
    if b is not None:
        out_data = out_data + b.data[:, None, None]
    if not batched:
        out_data = out_data[0]
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(out_data, parents=parents)

    def bwd(g):
        g3 = np.ascontiguousarray(g.reshape(n, c_out, oh * ow))
        if w.requires_grad:
            dw = (g3 @ cols.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g3.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = (w_mat.T @ g3).reshape(n, c_in, k, k, oh, ow)
            dxp = np.zeros((n, c_in, hp, wp), dtype=x.dtype)
            # col2im as k*k strided slice-adds; patches overlap so += is a sum
            for ky in range(k):
                for kx in range(k):
                    dxp[:, :, ky:ky + oh * stride:stride,
                        kx:kx + ow * stride:stride] += dcols[:, :, ky, kx]
            if pad:
                dxp = dxp[:, :, pad:-pad, pad:-pad]
            x._accumulate(dxp if batched else dxp[0])

    out._backward = bwd
    return out


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C, H, W) tensor."""
    c, h, w = a.shape
    idx = np.arange(a.data.size).reshape(a.shape)
    idx = idx.repeat(2, axis=1).repeat(2, axis=2)
    return index_select(a, idx, (c, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# parameters, Adam, checkpoints

CHECKPOINT_MAGIC = b"DIARW1"


class ParamStore:
    """Named parameter tensors with per-parameter Adam moment accumulators."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data, dtype=np.float64)
        self.v[name] = np.zeros_like(t.data, dtype=np.float64)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        """Bias-corrected Adam update using each parameter's accumulated grad."""
        for name, t in self.params.items():
            if t.grad is None:
                raise ValueError(f"adam_step: missing gradient for parameter {name!r}")
        self.step_count += 1
        t_step = self.step_count
        for name, p in self.params.items():
            g = p.grad.astype(np.float64)
            self.m[name] = beta1 * self.m[name] + (1 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1 - beta2) * g * g
            m_hat = self.m[name] / (1 - beta1 ** t_step)
            v_hat = self.v[name] / (1 - beta2 ** t_step)
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)

    # -- flat binary checkpoint: magic, count, then per-parameter records of
    #    (name length, name bytes, rank, extents, float32 little-endian data)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", p.data.ndim))
                f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                f.write(p.data.astype("<f4").tobytes())

    @staticmethod
    def load_arrays(path) -> dict[str, np.ndarray]:
        with open(path, "rb") as f:
            magic = f.read(6)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            (count,) = struct.unpack("<I", f.read(4))
            out = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", f.read(4))
                name = f.read(nlen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                extents = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n = int(np.prod(extents)) if rank else 1
                raw = f.read(4 * n)
                if len(raw) != 4 * n:
                    raise ValueError(f"truncated checkpoint while reading {name!r}")
                out[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float64)
        return out

    def load(self, path):
        arrays = self.load_arrays(path)
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in arrays.items():
            p = self.params[name]
            if p.data.shape != arr.shape:
                raise ValueError(
                    f"checkpoint mismatch for {name!r}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.astype(p.dtype)
