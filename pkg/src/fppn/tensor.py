"""Minimal dense-tensor autodiff engine (N,C,H,W layout).

Only the operations the depth prediction networks actually need are
implemented: 2D convolution / transposed convolution, batch norm, a small
elementwise suite, pooling, and reductions. Reverse-mode gradients are
accumulated additively on each Tensor; callers zero them between steps.

All shape formulas live here:
    conv2d:   out = (in + 2*pad - kernel) // stride + 1
    deconv2d: out = (in - 1) * stride - 2*pad + kernel
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """A numpy-backed array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else data.dtype)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def _accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Run reverse-mode accumulation from this node.

        `grad` defaults to ones (scalar outputs in practice).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad=False, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Convolution plumbing (shared by conv2d / deconv2d and their gradients)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (transposed) convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel extents must be >= 1, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def out_size(self, h, w):
        kh, kw = self.kernel
        if self.transposed:
            return (h - 1) * self.stride - 2 * self.padding + kh, (w - 1) * self.stride - 2 * self.padding + kw
        return (h + 2 * self.padding - kh) // self.stride + 1, (w + 2 * self.padding - kw) // self.stride + 1


def _conv_fwd(x, w, stride, pad):
    # x: (N,IC,H,W), w: (OC,IC,kh,kw) -> (N,OC,OH,OW)
    n, ic, h, wd = x.shape
    oc, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{wd} too small for kernel {kh}x{kw} pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, ic, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (OC,N,OH,OW)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_dx(g, w, stride, pad, in_hw):
    # g: (N,OC,OH,OW) -> gradient w.r.t. conv input (N,IC,H,W)
    n, oc, oh, ow = g.shape
    _, ic, kh, kw = w.shape
    h, wd = in_hw
    dxp = np.zeros((n, ic, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    # per-tap contribution: dX[p + tap] += W[tap]^T g[p]
    contrib = np.tensordot(g, w, axes=([1], [0]))  # (N,OH,OW,IC,kh,kw)
    contrib = contrib.transpose(0, 3, 4, 5, 1, 2)  # (N,IC,kh,kw,OH,OW)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += contrib[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + wd]
    return dxp


def _conv_dw(x, g, stride, pad, kshape):
    # x: conv input, g: grad of conv output -> (OC,IC,kh,kw)
    n, ic, h, wd = x.shape
    _, oc, oh, ow = g.shape
    oc2, ic2, kh, kw = kshape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dw = np.empty(kshape, dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            dw[:, :, i, j] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
    return dw


def conv2d(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Standard cross-correlation convolution; weights (OC,IC,kh,kw)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be N,C,H,W, got rank {x.data.ndim}")
    if spec.transposed:
        raise ShapeError("spec.transposed set; use deconv2d")
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input channel dim is {c}, spec.in_channels is {spec.in_channels}")
    expect = (spec.out_channels, spec.in_channels, *spec.kernel)
    if w.shape != expect:
        raise ShapeError(f"weight shape {w.shape} != expected {expect}")
    y = _conv_fwd(x.data, w.data, spec.stride, spec.padding)

    def backward(g):
        return (
            _conv_dx(g, w.data, spec.stride, spec.padding, (h, wd)),
            _conv_dw(x.data, g, spec.stride, spec.padding, w.shape),
        )

    return _make(y, (x, w), backward)


def deconv2d(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """Transposed convolution (adjoint of conv2d); weights (IC,OC,kh,kw)."""
    if x.data.ndim != 4:
        raise ShapeError(f"deconv2d input must be N,C,H,W, got rank {x.data.ndim}")
    if not spec.transposed:
        raise ShapeError("deconv2d requires spec.transposed")
    n, c, h, wd = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input channel dim is {c}, spec.in_channels is {spec.in_channels}")
    expect = (spec.in_channels, spec.out_channels, *spec.kernel)
    if w.shape != expect:
        raise ShapeError(f"weight shape {w.shape} != expected {expect}")
    oh, ow = spec.out_size(h, wd)
    if oh < 1 or ow < 1:
        raise ShapeError(f"deconv output {oh}x{ow} degenerate for input {h}x{wd}")
    # deconv forward is exactly the input-gradient of the mirrored convolution
    y = _conv_dx(x.data, w.data, spec.stride, spec.padding, (oh, ow))

    def backward(g):
        return (
            _conv_fwd(g, w.data, spec.stride, spec.padding),
            _conv_dw(g, x.data, spec.stride, spec.padding, w.shape),
        )

    return _make(y, (x, w), backward)


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormParams:
    """Learnable affine terms plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float64):
        return cls(
            gamma=tensor(np.ones(channels), requires_grad=True, dtype=dtype),
            beta=tensor(np.zeros(channels), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm(x: Tensor, params: BatchNormParams, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise ShapeError(f"channel count {c} != params channel count {params.gamma.shape[0]}")
    axes = (0, 2, 3)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased estimator
        params.running_mean = (1 - params.momentum) * params.running_mean + params.momentum * mean
        params.running_var = (1 - params.momentum) * params.running_var + params.momentum * var
    else:
        mean = params.running_mean
        var = params.running_var
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    y = params.gamma.data[None, :, None, None] * xhat + params.beta.data[None, :, None, None]

    m = n * h * w

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * params.gamma.data[None, :, None, None]
        if mode == "eval":
            dx = gx * inv[None, :, None, None]
        else:
            # standard BN backward through batch mean/variance
            dx = (
                inv[None, :, None, None]
                / m
                * (m * gx - gx.sum(axis=axes)[None, :, None, None] - xhat * (gx * xhat).sum(axis=axes)[None, :, None, None])
            )
        return dx, dgamma, dbeta

    return _make(y, (x, params.gamma, params.beta), backward)


# ---------------------------------------------------------------------------
# Elementwise suite


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # exp overflow saturates to 0, clamped below
        y = 1.0 / (1.0 + np.exp(-x.data))
    # keep the output strictly inside (0,1) even where exp saturates
    tiny = np.finfo(y.dtype).tiny
    y = np.clip(y, tiny, 1.0 - np.finfo(y.dtype).epsneg)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    # numerically stable: log(1+e^x) = max(x,0) + log1p(e^-|x|)
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    with np.errstate(over="ignore"):  # exp overflow saturates the gate to 0/1
        s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(y, (x,), lambda g: (g * s,))


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.data.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (x,), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    y = a.data + b.data
    return _make(y, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    y = a.data * b.data
    return _make(y, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, alpha: float) -> Tensor:
    return _make(x.data * alpha, (x,), lambda g: (g * alpha,))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def concat(tensors, axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} out of range for rank {nd}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(y, tuple(tensors), backward)


def max_pool(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by pool size {k}")
    win = x.data.reshape(n, c, h // k, k, w // k, k)
    y = win.max(axis=(3, 5))
    # route gradient to the first max within each window (deterministic ties)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = flat.argmax(axis=-1)

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        return (dflat.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(y, (x,), backward)


def avg_pool(x: Tensor, k: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by pool size {k}")
    y = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(y, (x,), backward)


def global_avg(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3), keepdims=True)
    return _make(y, (x,), lambda g: (np.broadcast_to(g, x.shape) / (h * w),))


def global_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(n, c, 1, 1)

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g.reshape(n, c, 1), axis=-1)
        return (dflat.reshape(x.shape),)

    return _make(y, (x,), backward)


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis, keepdims -> (N,1,H,W)."""
    arg = x.data.argmax(axis=1, keepdims=True)
    y = np.take_along_axis(x.data, arg, axis=1)

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg, g, axis=1)
        return (dx,)

    return _make(y, (x,), backward)


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]
    y = x.data.mean(axis=1, keepdims=True)
    return _make(y, (x,), lambda g: (np.broadcast_to(g, x.shape) / c,))


def tsum(x: Tensor) -> Tensor:
    y = np.array(x.data.sum())
    return _make(y, (x,), lambda g: (np.broadcast_to(np.asarray(g), x.shape).astype(x.dtype),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    finite: bool
    checked: int

    @property
    def ok(self):
        return self.finite and np.isfinite(self.max_rel_error)


def grad_check(f, x: Tensor, eps: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode d f/d x against central finite differences.

    `f` must return a scalar Tensor. Returns the max relative error over
    all input coordinates; non-finite intermediates are flagged, never
    silently passed.
    """
    x.zero_grad()
    x.requires_grad = True
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        return GradCheckReport(np.inf, False, 0)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    finite = True
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(x.data.copy())).data.item()
        flat[i] = orig - eps
        fm = f(Tensor(x.data.copy())).data.item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            finite = False
        numeric[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.abs(analytic.reshape(-1)) + np.abs(numeric), 1e-8)
    max_rel = float(np.abs(analytic.reshape(-1) - numeric).__truediv__(denom).max()) if flat.size else 0.0
    return GradCheckReport(max_rel, finite, flat.size)


# ---------------------------------------------------------------------------
# Checkpoint container: magic "FPPN1", then per entry:
#   u32 name length | name (utf-8) | u8 dtype code (1=f32, 2=f64) |
#   u8 rank | u32 extents... | little-endian raw values

_MAGIC = b"FPPN1"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save_arrays(path, arrays: dict):
    """Write named float arrays to the flat checkpoint container."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _CODE_FOR.get(arr.dtype.newbyteorder("="))
            if code is None:
                raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for ext in arr.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())


def load_arrays(path) -> dict:
    """Read a checkpoint container written by save_arrays (bit-exact)."""
    with open(path, "rb") as fh:
        if fh.read(5) != _MAGIC:
            raise ValueError(f"{path}: not a FPPN1 checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            dt = _DTYPE_CODES[code]
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise ValueError(f"{path}: truncated payload for entry {name!r}")
            arrays[name] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        return arrays
