"""Minimal reverse-mode autodiff over rank-4 NCHW tensors.

Implements exactly the operator set the block library needs: standard and
depthwise convolution (stride 1, same padding), batch norm, relu/gelu/sigmoid,
2x2 pooling, global average pooling, elementwise combine ops, nearest
upsampling and dropout. Gradients are recorded on an explicit tape and
replayed in exact reverse order.

Two scalar precisions exist per graph: binary32 for normal runs and binary64
for gradient verification (finite differences are meaningless in binary32).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

__all__ = [
    "CorePrecision",
    "Tensor",
    "Parameter",
    "Tape",
    "Ctx",
    "ShapeError",
    "GraphError",
    "active_tape",
    "record_op",
    "accumulate_grad",
    "conv2d",
    "depthwise_conv2d",
    "BatchNormStats",
    "batchnorm2d",
    "activation",
    "pool2d",
    "global_avg_pool",
    "add",
    "concat_channels",
    "mul_broadcast",
    "slice_channels",
    "upsample_nearest",
    "crop_spatial",
    "dropout",
    "sum_squares_loss",
    "finite_diff_check",
]


class CorePrecision(enum.Enum):
    """Scalar width of a graph: binary32 for runs, binary64 for verification."""

    BINARY32 = np.float32
    BINARY64 = np.float64

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)


class ShapeError(ValueError):
    """Shape mismatch naming the offending dimension."""

    def __init__(self, op: str, dimension: str, expected, got):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dimension} mismatch (expected {expected}, got {got})")


class GraphError(RuntimeError):
    """Misuse of the tape (empty backward, double backward, non-scalar loss)."""


_VALID_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense array plus optional gradient buffer.

    The dominant case is rank-4 NCHW, but scalars (losses) and rank-1 vectors
    (batchnorm affine parameters) share the same machinery.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _VALID_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a name path (block index + role)."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class TapeNode:
    """One recorded operation: node ids plus the backward rule."""

    out_id: int
    in_ids: tuple
    out: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Ordered operation record; backward replays it in exact reverse order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._ids: dict[int, int] = {}
        self._next_id = 0
        self._finished = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def _node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[key] = nid
        return nid

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> None:
        in_ids = tuple(self._node_id(t) for t in inputs)
        out.requires_grad = True
        self.nodes.append(TapeNode(self._node_id(out), in_ids, out, backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate .grad on every reachable input; zero-fill unreached params."""
        if self._finished:
            raise GraphError("backward called twice on the same tape without reset")
        if not self.nodes:
            raise GraphError("backward on an empty tape")
        if loss.data.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        self._finished = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is not None:
                node.backward(g)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)

    def reset(self) -> None:
        self.nodes.clear()
        self._ids.clear()
        self._next_id = 0
        self._finished = False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Record `out = op(inputs)` on the active tape, if any input tracks grads."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a contribution to t.grad (accumulated, never overwritten)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


@dataclass
class Ctx:
    """Execution context threaded through a network forward pass.

    precision: "auto" uses the network's own wrap config, None forces a plain
    forward, or an explicit config object overrides. deploy switches to the
    simulated-device path; `post` is then applied after every operator.
    """

    mode: str = "eval"  # "train" | "eval"
    rng: Optional[np.random.Generator] = None
    precision: object = "auto"
    deploy: bool = False
    post: Optional[Callable[[Tensor], Tensor]] = None
    deploy_cache: Optional[dict] = None
    cost_log: Optional[list] = None
    kink_gaps: Optional[list] = None
    peak_abs: Optional[list] = None

    def apply_post(self, t: Tensor) -> Tensor:
        if self.post is not None:
            t = self.post(t)
        if self.peak_abs is not None and t.data.size:
            self.peak_abs[0] = max(self.peak_abs[0], float(np.max(np.abs(t.data))))
        return t

    def note_kink(self, gap: float) -> None:
        if self.kink_gaps is not None:
            self.kink_gaps.append(float(gap))


def _check_rank4(op: str, name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(op, f"{name} rank", 4, t.data.ndim)


def _check_same_dtype(op: str, *tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(op, "dtype", dt, t.data.dtype)
    return dt


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N,C,H,W) -> (N, C*k*k, H*W) with zero same-padding, stride 1."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N,C,H,W,k,k)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _im2col: (N, C*k*k, H*W) -> (N,C,H,W)."""
    n, c, h, w = shape
    p = k // 2
    acc = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + h, j : j + w] += cols6[:, :, i, j]
    return acc[:, :, p : p + h, p : p + w]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padding stride-1 convolution; kernel must be 1, 3 or 5."""
    _check_rank4("conv2d", "input", x)
    if weight.data.ndim != 4:
        raise ShapeError("conv2d", "weight rank", 4, weight.data.ndim)
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3, 5):
        raise ShapeError("conv2d", "kernel", "square, size in {1,3,5}", (kh, kw))
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError("conv2d", "input channels", c_in, c)
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", "bias length", (c_out,), bias.shape)
    _check_same_dtype("conv2d", x, weight, *( [bias] if bias is not None else [] ))

    k = kh
    if k == 1:
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = _im2col(x.data, k)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out_data = np.matmul(w2, cols).reshape(n, c_out, h, w)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(out_data, dtype=out_data.dtype)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, c_out, h * w)
        if weight.requires_grad:
            dw = np.einsum("nch,nkh->ck", g2, cols).reshape(weight.shape)
            accumulate_grad(weight, dw)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if k == 1:
                dx = dcols.reshape(n, c, h, w)
            else:
                dx = _col2im(dcols, x.shape, k)
            accumulate_grad(x, dx)

    return record_op(out, inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """Per-channel spatial convolution; weight shape (C, 1, k, k)."""
    _check_rank4("depthwise_conv2d", "input", x)
    if weight.data.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError("depthwise_conv2d", "weight shape", "(C,1,k,k)", weight.shape)
    n, c, h, w = x.shape
    cw, _, kh, kw = weight.shape
    if cw != c:
        raise ShapeError("depthwise_conv2d", "channels", c, cw)
    if kh != kw or kh not in (1, 3, 5):
        raise ShapeError("depthwise_conv2d", "kernel", "square, size in {1,3,5}", (kh, kw))
    _check_same_dtype("depthwise_conv2d", x, weight)

    k = kh
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # view, (N,C,H,W,k,k)
    w3 = weight.data[:, 0]
    out = Tensor(np.einsum("nchwij,cij->nchw", win, w3), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            dw = np.einsum("nchwij,nchw->cij", win, g)
            accumulate_grad(weight, dw[:, None])
        if x.requires_grad:
            acc = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    acc[:, :, i : i + h, j : j + w] += g * w3[:, i, j][None, :, None, None]
            accumulate_grad(x, acc[:, :, p : p + h, p : p + w])

    return record_op(out, (x, weight), backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormStats:
    """Mutable running statistics owned by a batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: BatchNormStats,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    _check_rank4("batchnorm2d", "input", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError("batchnorm2d", "gamma length", (c,), gamma.shape)
    if beta.shape != (c,):
        raise ShapeError("batchnorm2d", "beta length", (c,), beta.shape)
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be > 0")
    _check_same_dtype("batchnorm2d", x, gamma, beta)
    m = n * h * w

    if mode == "train":
        if m < 2:
            raise ShapeError("batchnorm2d", "train-mode elements per channel", ">= 2", m)
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean[:] = (1.0 - momentum) * running.mean + momentum * mu
        running.var[:] = (1.0 - momentum) * running.var + momentum * var
    elif mode == "eval":
        mu = running.mean.astype(x.data.dtype, copy=False)
        var = running.var.astype(x.data.dtype, copy=False)
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None], dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = inv_std[None, :, None, None] * (dxhat - s1 / m - xhat * s2 / m)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            accumulate_grad(x, dx)

    return record_op(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        out = Tensor(np.maximum(x.data, 0), dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            accumulate_grad(x, g * (x.data > 0))

    elif kind == "gelu":
        # exact Gaussian CDF form x * Phi(x), not the tanh approximation
        cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
        out = Tensor(x.data * cdf, dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            accumulate_grad(x, (g * (cdf + x.data * pdf)).astype(x.data.dtype, copy=False))

    elif kind == "sigmoid":
        s = expit(x.data)
        out = Tensor(s, dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            accumulate_grad(x, (g * s * (1.0 - s)).astype(x.data.dtype, copy=False))

    else:
        raise ValueError(f"activation: unknown kind {kind!r}")
    return record_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, kind: str) -> Tensor:
    """2x2 window, stride 2. Odd dims are padded right/bottom by one."""
    _check_rank4("pool2d", "input", x)
    n, c, h, w = x.shape
    if h == 0 or w == 0:
        raise ShapeError("pool2d", "spatial dims", ">= 1", (h, w))
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: unknown kind {kind!r}")
    ho, wo = (h + 1) // 2, (w + 1) // 2
    ph, pw = 2 * ho - h, 2 * wo - w

    if kind == "max":
        fill = -np.inf
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill)
        wins = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        idx = wins.argmax(axis=-1)
        out = Tensor(np.take_along_axis(wins, idx[..., None], axis=-1)[..., 0], dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            dwins = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(dwins, idx[..., None], g[..., None], axis=-1)
            dxp = dwins.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
            accumulate_grad(x, dxp[:, :, :h, :w])

    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)))
        ones = np.pad(np.ones((h, w), dtype=x.data.dtype), ((0, ph), (0, pw)))
        counts = ones.reshape(ho, 2, wo, 2).sum(axis=(1, 3))  # valid cells per window
        sums = xp.reshape(n, c, ho, 2, wo, 2).sum(axis=(3, 5))
        out = Tensor(sums / counts[None, None], dtype=x.data.dtype)

        def backward(g: np.ndarray) -> None:
            per_cell = (g / counts[None, None]).astype(g.dtype, copy=False)
            dxp = np.repeat(np.repeat(per_cell, 2, axis=2), 2, axis=3)
            accumulate_grad(x, dxp[:, :, :h, :w])

    return record_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4("global_avg_pool", "input", x)
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.broadcast_to(g / (h * w), x.shape).astype(g.dtype, copy=False))

    return record_op(out, (x,), backward)


# ---------------------------------------------------------------------------
# combining ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "shape", a.shape, b.shape)
    _check_same_dtype("add", a, b)
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return record_op(out, (a, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_rank4("concat_channels", "a", a)
    _check_rank4("concat_channels", "b", b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError("concat_channels", "N,H,W", (na, ha, wa), (nb, hb, wb))
    _check_same_dtype("concat_channels", a, b)
    out = Tensor(np.concatenate([a.data, b.data], axis=1), dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return record_op(out, (a, b), backward)


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Per-channel scaling: a is (N,C,H,W), b is (N,C,1,1)."""
    _check_rank4("mul_broadcast", "a", a)
    n, c, h, w = a.shape
    if b.shape != (n, c, 1, 1):
        raise ShapeError("mul_broadcast", "scale shape", (n, c, 1, 1), b.shape)
    _check_same_dtype("mul_broadcast", a, b)
    out = Tensor(a.data * b.data, dtype=a.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, (g * a.data).sum(axis=(2, 3), keepdims=True))

    return record_op(out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel range [start, stop)."""
    _check_rank4("slice_channels", "input", x)
    n, c, h, w = x.shape
    if not 0 <= start < stop <= c:
        raise ShapeError("slice_channels", "channel range", f"within [0, {c}]", (start, stop))
    out = Tensor(x.data[:, start:stop].copy(), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        accumulate_grad(x, dx)

    return record_op(out, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    _check_rank4("upsample_nearest", "input", x)
    if factor < 1:
        raise ValueError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = Tensor(x.data.repeat(factor, axis=2).repeat(factor, axis=3), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return record_op(out, (x,), backward)


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Top-left crop to (h, w); identity when already that size."""
    _check_rank4("crop_spatial", "input", x)
    n, c, xh, xw = x.shape
    if xh < h or xw < w:
        raise ShapeError("crop_spatial", "spatial dims", f">= ({h},{w})", (xh, xw))
    if (xh, xw) == (h, w):
        return x
    out = Tensor(x.data[:, :, :h, :w].copy(), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, np.pad(g, ((0, 0), (0, 0), (0, xh - h), (0, xw - w))))

    return record_op(out, (x,), backward)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator]) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode requires a random stream")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(x.data.dtype) * scale
    out = Tensor(x.data * mask, dtype=x.data.dtype)

    def backward(g: np.ndarray) -> None:
        accumulate_grad(x, g * mask)

    return record_op(out, (x,), backward)


def sum_squares_loss(y: Tensor) -> Tensor:
    """0.5 * sum(y^2) as a scalar tensor; the gradient-check objective."""
    out = Tensor(np.asarray(0.5 * np.sum(y.data * y.data), dtype=y.data.dtype))

    def backward(g: np.ndarray) -> None:
        accumulate_grad(y, (g * y.data).astype(y.data.dtype, copy=False))

    return record_op(out, (y,), backward)


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(network, x, epsilon: float = 1e-5, mode: str = "train", rng_seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires a binary64 network. Every forward evaluation reuses the same
    dropout seed so the loss is a pure function of the parameters. Returns
    max over all parameter scalars of |analytic - central| / (|analytic| + 1e-12).
    """
    params = list(network.parameters())
    if any(p.data.dtype != np.float64 for p in params):
        raise GraphError("finite_diff_check requires a binary64 network")
    x_arr = np.asarray(x, dtype=np.float64)

    def run() -> Tensor:
        ctx = Ctx(mode=mode, rng=np.random.default_rng(rng_seed), precision=None)
        y = network.forward(Tensor(x_arr, dtype=np.float64), ctx)
        return sum_squares_loss(y)

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = run()
    tape.backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(run().data)
            flat[i] = orig - epsilon
            lm = float(run().data)
            flat[i] = orig
            central = (lp - lm) / (2.0 * epsilon)
            rel = abs(gflat[i] - central) / (abs(gflat[i]) + 1e-12)
            worst = max(worst, rel)
    return worst
