"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operations the nodule classifiers need: 2-D
convolution and its transpose, max/avg/global pooling, dense and
per-channel dense layers, batch normalization, ReLU, elementwise
arithmetic and softmax cross-entropy, each with a hand-written backward
pass over numpy arrays. Convolutions lower to im2col matrix products so
the heavy lifting stays inside BLAS.

A forward op records its parents on the output Tensor; calling
``backward()`` on a scalar loss walks the graph once in reverse
topological order and accumulates gradients into ``Tensor.grad``.
Calling backward again while any reachable gradient is still populated
raises GraphError instead of silently accumulating; ``no_grad()``
suppresses graph construction for cheap inference.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import GraphError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping reverse-mode autodiff needs."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = None
        self._parents = ()
        self._backward_fn = None
        self._grad_owned = False

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = "grad" if self.requires_grad else "nograd"
        op = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, {grad}{op})"

    # -- autodiff ------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None
        self._grad_owned = False

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that does not require gradients")
        topo = _toposort(self)
        stale = sum(1 for t in topo if t.grad is not None)
        if stale:
            raise GraphError(
                f"{stale} tensors reachable from the loss already hold gradients; "
                "zero them before calling backward again"
            )
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is not None:
                fn(node.grad)
                node._backward_fn = None  # free captured buffers as we go

    # convenience operators used by tests and the training loop
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        return mul(self, other if isinstance(other, Tensor) else Tensor(other))


def _toposort(root: Tensor):
    topo, visited, stack = [], set(), [(root, False)]
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
    return topo


def _result(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._grad_owned = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First contribution may alias an upstream buffer; own it before any
    # in-place accumulation so fan-out never corrupts another node's grad.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _check_finite(arr: np.ndarray, what: str) -> None:
    # One-pass reduction: any NaN/Inf survives the sum.
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values in {what}")


def _as4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{what} must be 4-D [N,C,H,W], got shape {t.shape}")


# ---------------------------------------------------------------------
# im2col plumbing shared by conv2d / conv_transpose2d / pooling
# ---------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )


def _gather6(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    # im2col in [N, C*kh*kw, oh*ow] layout: every slice copy below moves
    # whole rows, which is what keeps this off the profile.
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + sh * (oh - 1) + 1 : sh, kj : kj + sw * (ow - 1) + 1 : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _scatter6(cols6: np.ndarray, n, c, hp, wp, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    # adjoint of _gather6 (overlaps accumulate)
    out = np.zeros((n, c, hp, wp), dtype=cols6.dtype)
    cs = cols6.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + sh * (oh - 1) + 1 : sh, kj : kj + sw * (ow - 1) + 1 : sw] += cs[:, :, ki, kj]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_forward(xd: np.ndarray, wd: np.ndarray, stride: int, padding: int):
    """Returns (y [N,Co,oh,ow], cols6 [N,C*k*k,oh*ow], oh, ow)."""
    n, c, h, w = xd.shape
    co, ci, kh, kw = wd.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols6 = np.ascontiguousarray(xd).reshape(n, c, h * w)
    else:
        cols6 = _gather6(_pad(xd, padding), kh, kw, stride, stride, oh, ow)
    wmat = wd.reshape(co, ci * kh * kw)
    y3 = np.matmul(wmat[None], cols6)  # batched [Co,CK] @ [CK,oh*ow]
    return y3.reshape(n, co, oh, ow), cols6, oh, ow


# ---------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x [N,Cin,H,W] with kernels w [Cout,Cin,kH,kW]."""
    _as4d(x, "conv2d input")
    _as4d(w, "conv2d weight")
    n, c, h, wdim = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    if h + 2 * padding < kh or wdim + 2 * padding < kw:
        raise ShapeError(f"conv2d window {kh}x{kw} exceeds padded input {h + 2 * padding}x{wdim + 2 * padding}")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"conv2d bias must have shape ({co},), got {b.shape}")
    _check_finite(x.data, "conv2d input")
    _check_finite(w.data, "conv2d weight")

    y, cols6, oh, ow = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        y += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    def backward_fn(gout):
        g3 = gout.reshape(n, co, oh * ow)
        if w.requires_grad:
            _accum(w, np.matmul(g3, cols6.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g3.sum(axis=(0, 2)))
        if x.requires_grad:
            wmat = w.data.reshape(co, ci * kh * kw)
            dcols6 = np.matmul(wmat.T[None], g3)
            if pointwise:
                _accum(x, dcols6.reshape(x.shape))
            else:
                dxp = _scatter6(dcols6, n, c, h + 2 * padding, wdim + 2 * padding, kh, kw, stride, stride, oh, ow)
                _accum(x, dxp[:, :, padding : padding + h, padding : padding + wdim] if padding else dxp)

    return _result(y, parents, backward_fn, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of conv2d: x [N,Cout,H,W], w [Cout,Cin,kH,kW] -> [N,Cin,(H-1)s+kH,(W-1)s+kW].

    Shares the conv2d weight layout, so for zero-padding conv2d it holds
    that <conv2d(x, w), y> == <x, conv_transpose2d(y, w)>.
    """
    _as4d(x, "conv_transpose2d input")
    _as4d(w, "conv_transpose2d weight")
    n, co, h, wdim = x.shape
    wco, ci, kh, kw = w.shape
    if wco != co:
        raise ShapeError(f"conv_transpose2d channel mismatch: input has {co}, weight expects {wco}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d needs stride >= 1, got {stride}")
    _check_finite(x.data, "conv_transpose2d input")
    _check_finite(w.data, "conv_transpose2d weight")

    oh = (h - 1) * stride + kh
    ow = (wdim - 1) * stride + kw
    wmat = w.data.reshape(co, ci * kh * kw)
    x3 = np.ascontiguousarray(x.data).reshape(n, co, h * wdim)
    prod6 = np.matmul(wmat.T[None], x3)  # [N, Ci*kH*kW, H*W]
    out = _scatter6(prod6, n, ci, oh, ow, kh, kw, stride, stride, h, wdim)

    def backward_fn(gout):
        cols_g6 = _gather6(np.ascontiguousarray(gout), kh, kw, stride, stride, h, wdim)
        if x.requires_grad:
            _accum(x, np.matmul(wmat[None], cols_g6).reshape(x.shape))
        if w.requires_grad:
            _accum(w, np.matmul(x3, cols_g6.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))

    return _result(out, (x, w), backward_fn, "conv_transpose2d")


# ---------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------


def _pool_geometry(x: Tensor, kernel: int, stride: int, padding: int, op: str):
    _as4d(x, f"{op} input")
    n, c, h, w = x.shape
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"{op} needs kernel/stride >= 1 and padding >= 0")
    ph, pw = h + 2 * padding, w + 2 * padding
    if ph < kernel or pw < kernel:
        raise ShapeError(f"{op} window {kernel} exceeds padded input {ph}x{pw}")
    return n, c, h, w, (ph - kernel) // stride + 1, (pw - kernel) // stride + 1


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over kernel x kernel windows; ties keep the first element in row-major order."""
    n, c, h, w, oh, ow = _pool_geometry(x, kernel, stride, 0, "maxpool2d")
    xd = np.ascontiguousarray(x.data)
    win = _windows(xd, kernel, kernel, stride, stride, oh, ow).reshape(n, oh, ow, c, kernel * kernel)
    idx = win.argmax(axis=4)
    out = np.ascontiguousarray(np.take_along_axis(win, idx[..., None], axis=4)[..., 0].transpose(0, 3, 1, 2))
    idx = idx.transpose(0, 3, 1, 2)  # [N,C,oh,ow]

    def backward_fn(gout):
        if not x.requires_grad:
            return
        if stride == kernel:
            dwin = np.zeros((n, c, oh, ow, kernel * kernel), dtype=gout.dtype)
            np.put_along_axis(dwin, idx[..., None], gout[..., None], axis=4)
            dx = dwin.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(
                n, c, oh * kernel, ow * kernel
            )
            if oh * kernel != h or ow * kernel != w:  # floor semantics left a tail
                full = np.zeros((n, c, h, w), dtype=gout.dtype)
                full[:, :, : oh * kernel, : ow * kernel] = dx
                dx = full
            _accum(x, dx)
        else:
            dx = np.zeros((n, c, h, w), dtype=gout.dtype)
            rows = (np.arange(oh) * stride)[None, None, :, None] + idx // kernel
            cols = (np.arange(ow) * stride)[None, None, None, :] + idx % kernel
            ni = np.arange(n)[:, None, None, None]
            cc = np.arange(c)[None, :, None, None]
            np.add.at(dx, (ni, cc, rows, cols), gout)
            _accum(x, dx)

    return _result(out, (x,), backward_fn, "maxpool2d")


def avgpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Mean over kernel x kernel windows (zero padding counts toward the mean)."""
    n, c, h, w, oh, ow = _pool_geometry(x, kernel, stride, padding, "avgpool2d")
    xp = _pad(x.data, padding)
    win = _windows(xp, kernel, kernel, stride, stride, oh, ow)
    out = np.ascontiguousarray(win.mean(axis=(4, 5)).transpose(0, 3, 1, 2))

    def backward_fn(gout):
        if not x.requires_grad:
            return
        g = gout / (kernel * kernel)
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gout.dtype)
        for ki in range(kernel):
            for kj in range(kernel):
                dxp[:, :, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride] += g
        _accum(x, dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)

    return _result(out, (x,), backward_fn, "avgpool2d")


def global_pool(x: Tensor, mode: str) -> Tensor:
    """Collapse [N,C,H,W] to [N,C]; mode 'avg' or 'max' (first-tie argmax)."""
    _as4d(x, "global_pool input")
    if mode not in ("avg", "max"):
        raise ShapeError(f"global_pool mode must be 'avg' or 'max', got {mode!r}")
    n, c, h, w = x.shape
    if mode == "avg":
        out = x.data.mean(axis=(2, 3))

        def backward_fn(gout):
            if x.requires_grad:
                _accum(x, np.ascontiguousarray(np.broadcast_to((gout / (h * w))[:, :, None, None], x.shape)))

    else:
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

        def backward_fn(gout):
            if x.requires_grad:
                dflat = np.zeros((n, c, h * w), dtype=gout.dtype)
                np.put_along_axis(dflat, idx[..., None], gout[..., None], axis=2)
                _accum(x, dflat.reshape(n, c, h, w))

    return _result(np.ascontiguousarray(out), (x,), backward_fn, "global_pool")


# ---------------------------------------------------------------------
# dense / elementwise
# ---------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine layer: x [N,D] @ w [D,M] + b [M]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense expects 2-D operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense size mismatch: input width {x.shape[1]} vs weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense bias must have shape ({w.shape[1]},), got {b.shape}")
    _check_finite(x.data, "dense input")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward_fn(gout):
        if x.requires_grad:
            _accum(x, gout @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ gout)
        if b is not None and b.requires_grad:
            _accum(b, gout.sum(axis=0))

    return _result(out, parents, backward_fn, "dense")


def per_channel_dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """One independent single-neuron affine map per channel.

    x [N,C,L], w [C,L], b [C] -> [N,C] with out[n,c] = x[n,c] . w[c] + b[c].
    Channel c's output depends on channel c's inputs and weights only.
    """
    if x.ndim != 3:
        raise ShapeError(f"per_channel_dense expects [N,C,L] input, got {x.shape}")
    n, c, l = x.shape
    if w.shape != (c, l):
        raise ShapeError(f"per_channel_dense weight must be ({c},{l}), got {w.shape}")
    if b.shape != (c,):
        raise ShapeError(f"per_channel_dense bias must be ({c},), got {b.shape}")
    out = np.einsum("ncl,cl->nc", x.data, w.data) + b.data

    def backward_fn(gout):
        if x.requires_grad:
            _accum(x, gout[:, :, None] * w.data[None, :, :])
        if w.requires_grad:
            _accum(w, np.einsum("nc,ncl->cl", gout, x.data))
        if b.requires_grad:
            _accum(b, gout.sum(axis=0))

    return _result(out, (x, w, b), backward_fn, "per_channel_dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward_fn(gout):
        if x.requires_grad:
            _accum(x, gout * mask)

    return _result(out, (x,), backward_fn, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add requires identical shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def backward_fn(gout):
        _accum(a, gout)
        _accum(b, gout)

    return _result(out, (a, b), backward_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul requires identical shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward_fn(gout):
        if a.requires_grad:
            _accum(a, gout * b.data)
        if b.requires_grad:
            _accum(b, gout * a.data)

    return _result(out, (a, b), backward_fn, "mul")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along axis 1 ([N,C] or [N,C,H,W] operands)."""
    if a.ndim != b.ndim or a.ndim not in (2, 4):
        raise ShapeError(f"concat_channels expects matching 2-D or 4-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels non-channel dims must match, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(gout):
        _accum(a, gout[:, :ca])
        _accum(b, gout[:, ca:])

    return _result(out, (a, b), backward_fn, "concat_channels")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward_fn(gout):
        if x.requires_grad:
            _accum(x, gout.reshape(x.shape))

    return _result(out, (x,), backward_fn, "reshape")


def tsum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar (mainly for building test losses)."""
    out = np.asarray(x.data.sum())

    def backward_fn(gout):
        if x.requires_grad:
            _accum(x, np.full(x.shape, float(gout), dtype=x.dtype))

    return _result(out, (x,), backward_fn, "sum")


# ---------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Training mode normalizes with biased batch statistics and folds them
    into the running buffers in place (unbiased variance, standard
    momentum update). Eval mode normalizes with the running buffers and
    backpropagates through the affine part only.
    """
    _as4d(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({c},)")
    _check_finite(x.data, "batchnorm2d input")
    cnt = n * h * w
    if training:
        if cnt < 2:
            raise ShapeError("batchnorm2d training needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (cnt / (cnt - 1)))
    else:
        mu = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)

    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * ivstd[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(gout):
        # shared per-channel reductions; dx uses the projection form of the
        # batch-stats chain rule so only two full passes touch the data
        gsum = np.einsum("nchw->c", gout)
        gxsum = np.einsum("nchw,nchw->c", gout, xhat)
        if gamma.requires_grad:
            _accum(gamma, gxsum)
        if beta.requires_grad:
            _accum(beta, gsum)
        if not x.requires_grad:
            return
        g4 = gamma.data[None, :, None, None]
        iv4 = ivstd[None, :, None, None]
        if not training:
            _accum(x, gout * (g4 * iv4))
            return
        scale = (gamma.data * ivstd / cnt)[None, :, None, None]
        _accum(x, scale * (cnt * gout - gsum[None, :, None, None] - xhat * gxsum[None, :, None, None]))

    return _result(out, (x, gamma, beta), backward_fn, "batchnorm2d")


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits [N,K], labels [N] with values in [0, K). Uses the max-shift
    trick so saturated logits stay finite.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels must have shape ({logits.shape[0]},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("label values out of range for the logit width")
    _check_finite(logits.data, "softmax_cross_entropy logits")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = np.asarray(-logp[np.arange(n), labels].mean())

    def backward_fn(gout):
        if logits.requires_grad:
            d = p.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(logits, d * (float(gout) / n))

    return _result(loss, (logits,), backward_fn, "softmax_cross_entropy")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain softmax over the last axis of a numpy array (no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)
