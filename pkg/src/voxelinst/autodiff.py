"""Minimal reverse-mode automatic differentiation over numpy arrays.

Tensors form a DAG built eagerly by the ops below; ``backward`` on a scalar
walks it once in reverse topological order. Heavy kernels (3D convolution,
transposed convolution, instance norm) are fused nodes with hand-written
backward passes so graphs stay small and gemm-bound. All ops run in the
dtype of their inputs, so the same graph code serves float32 training and
float64 finite-difference verification.

Feature layout is channel-last throughout: volumes are (D, H, W, C).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import GraphBuildError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff.

    ``requires_grad`` marks leaves (parameters); interior nodes inherit it
    from their parents. ``grad`` is populated by ``backward`` and has the
    same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, parents=(), backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise GraphBuildError(f"backward requires a scalar, got shape {self.data.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # Convenience arithmetic; keeps model code readable.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise GraphBuildError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder over grad-requiring nodes; deterministic."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + b

        def bwd(g):
            _accum(a, g)

        return _node(out, (a,), bwd)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data * b

        def bwd(g):
            _accum(a, g * b)

        return _node(out, (a,), bwd)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out, (a,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last (channel) axis."""
    out = np.concatenate([a.data, b.data], axis=-1)
    ca = a.data.shape[-1]

    def bwd(g):
        if a.requires_grad:
            _accum(a, g[..., :ca])
        if b.requires_grad:
            _accum(b, g[..., ca:])

    return _node(out, (a, b), bwd)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _node(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _node(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return _node(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bwd)


def softmax_lastaxis(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), bwd)


def clamped_log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero on the clamped region."""
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)

    def bwd(g):
        _accum(a, np.where(a.data > floor, g / clamped, 0.0))

    return _node(out, (a,), bwd)


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = a.data
    absx = np.abs(x)
    inner = absx < 1.0
    out = np.where(inner, 0.5 * x * x, absx - 0.5)

    def bwd(g):
        _accum(a, g * np.where(inner, x, np.sign(x)))

    return _node(out, (a,), bwd)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick a[i, idx[i]] from a 2D tensor; backward scatter-adds."""
    n = a.data.shape[0]
    rows = np.arange(n)
    out = a.data[rows, idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        _accum(a, ga)

    return _node(out, (a,), bwd)


# ---------------------------------------------------------------------------
# fused volumetric kernels


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided patch view of a padded (Dp,Hp,Wp,C) volume.

    Returns (Do, Ho, Wo, C, k, k, k); a reshape of this view materializes
    the gemm input with (c, kd, kh, kw) minor order.
    """
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(0, 1, 2))
    return v[::stride, ::stride, ::stride]


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3D convolution, zero padding k//2, channel-last.

    x: (D, H, W, Cin); w: (Cin, k, k, k, Cout); b: (Cout,).
    Output spatial dims are floor((D + 2*(k//2) - k)/stride) + 1.
    """
    cin, k = w.data.shape[0], w.data.shape[1]
    if x.data.shape[-1] != cin:
        raise GraphBuildError(
            f"conv3d channel mismatch: input has {x.data.shape[-1]}, weight expects {cin}"
        )
    pad = k // 2
    if pad:
        xp = np.pad(x.data, ((pad, pad), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x.data
    patches = _im2col(xp, k, stride)
    do, ho, wo = patches.shape[:3]
    cols = np.ascontiguousarray(patches).reshape(do * ho * wo, cin * k**3)
    wmat = w.data.reshape(cin * k**3, -1)
    out = (cols @ wmat + b.data).reshape(do, ho, wo, -1)

    def bwd(g):
        gflat = g.reshape(do * ho * wo, -1)
        if w.requires_grad:
            _accum(w, (cols.T @ gflat).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wmat.T).reshape(do, ho, wo, cin, k, k, k)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for bb in range(k):
                    for c in range(k):
                        gxp[
                            a : a + do * stride : stride,
                            bb : bb + ho * stride : stride,
                            c : c + wo * stride : stride,
                        ] += gcols[:, :, :, :, a, bb, c]
            d, h, ww = x.data.shape[:3]
            _accum(x, gxp[pad : pad + d, pad : pad + h, pad : pad + ww])

    return _node(out, (x, w, b), bwd)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2) -> Tensor:
    """Transposed 3D convolution with kernel == stride (exact upsampling).

    x: (D, H, W, Cin); w: (Cin, k, k, k, Cout) with k == stride; output is
    (D*k, H*k, W*k, Cout). Each output voxel receives exactly one input.
    """
    cin, k = w.data.shape[0], w.data.shape[1]
    if k != stride:
        raise GraphBuildError("conv_transpose3d supports kernel == stride only")
    if x.data.shape[-1] != cin:
        raise GraphBuildError(
            f"conv_transpose3d channel mismatch: input has {x.data.shape[-1]}, weight expects {cin}"
        )
    d, h, ww = x.data.shape[:3]
    cout = w.data.shape[-1]
    xflat = x.data.reshape(d * h * ww, cin)
    wmat = w.data.reshape(cin, k**3 * cout)
    t = (xflat @ wmat).reshape(d, h, ww, k, k, k, cout)
    out = t.transpose(0, 3, 1, 4, 2, 5, 6).reshape(d * k, h * k, ww * k, cout) + b.data

    def bwd(g):
        g6 = (
            g.reshape(d, k, h, k, ww, k, cout)
            .transpose(0, 2, 4, 1, 3, 5, 6)
            .reshape(d * h * ww, k**3 * cout)
        )
        if w.requires_grad:
            _accum(w, (xflat.T @ g6).reshape(w.data.shape))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            _accum(x, (g6 @ wmat.T).reshape(x.data.shape))

    return _node(out, (x, w, b), bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial dims of one volume.

    No running statistics: each forward normalizes with its own mean/var,
    so behavior is batch-size independent and fully deterministic.
    """
    if x.data.shape[-1] != gamma.data.shape[-1]:
        raise GraphBuildError(
            f"instance_norm channel mismatch: input has {x.data.shape[-1]}, "
            f"scale expects {gamma.data.shape[-1]}"
        )
    axes = (0, 1, 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=axes, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
            _accum(x, (gxhat - m1 - xhat * m2) * inv)

    return _node(out, (x, gamma, beta), bwd)
