"""
Forward kernels and vector-Jacobian products for every layer type in the network.

All functions take and return numpy arrays. Inputs stored as float16 are
promoted to float32 for the arithmetic and the forward result is rounded back
to float16; gradients are always returned in the accumulation precision
(float32 for half/single, float64 for double).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from . import _kernels
from .tensor import check_finite, compute_dtype

_use_kernels = _kernels.AVAILABLE


def use_compiled_kernels(enabled: bool) -> None:
    """Switch depthwise convolution between the compiled loops and pure numpy."""
    global _use_kernels
    _use_kernels = bool(enabled) and _kernels.AVAILABLE

Pair = Union[int, Tuple[int, int]]


def _pair(v: Pair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_out_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@dataclass
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Pair = 3
    stride: Pair = 1
    padding: Pair = 0
    dilation: Pair = 1
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.groups < 1:
            raise ValueError("groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups) + self.kernel

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        ho = conv_out_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0])
        wo = conv_out_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1])
        if ho < 1 or wo < 1:
            raise ValueError(f"convolution output extent {ho}x{wo} < 1 for input {h}x{w}")
        return ho, wo


# -- convolution --------------------------------------------------------------

def _padded(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap(xp: np.ndarray, spec: ConvSpec, i: int, j: int, ho: int, wo: int):
    """Strided view of the padded input seen by kernel tap (i, j)."""
    (sh, sw), (dh, dw) = spec.stride, spec.dilation
    return xp[:, :, i * dh: i * dh + sh * (ho - 1) + 1: sh, j * dw: j * dw + sw * (wo - 1) + 1: sw]


def _check_conv(x: np.ndarray, w: np.ndarray, spec: ConvSpec):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {w.shape} != expected {spec.weight_shape}")
    return spec.output_hw(x.shape[2], x.shape[3])


def _im2col(xp: np.ndarray, spec: ConvSpec, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    g = spec.groups
    kh, kw = spec.kernel
    if (kh, kw) == (1, 1) and spec.stride == (1, 1):
        return xp.reshape(n, g, c // g, ho * wo)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = _tap(xp, spec, i, j, ho, wo)
    return cols.reshape(n, g, (c // g) * kh * kw, ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Zero-padded 2-D cross-correlation with stride, dilation and groups."""
    ho, wo = _check_conv(x, w, spec)
    acc = compute_dtype(x)
    wa = w.astype(acc, copy=False)
    n = x.shape[0]
    kh, kw = spec.kernel
    xp = _padded(x.astype(acc, copy=False), spec)
    if spec.depthwise and _use_kernels:
        out = _kernels.dw_forward(
            np.ascontiguousarray(xp), np.ascontiguousarray(wa[:, 0]), *spec.stride, *spec.dilation, ho, wo
        )
    elif spec.depthwise:
        out = np.zeros((n, spec.out_channels, ho, wo), dtype=acc)
        tmp = np.empty_like(out)
        for i in range(kh):
            for j in range(kw):
                np.multiply(_tap(xp, spec, i, j, ho, wo), wa[:, 0, i, j][None, :, None, None], out=tmp)
                out += tmp
    else:
        g = spec.groups
        cols = _im2col(xp, spec, ho, wo)
        wm = wa.reshape(g, spec.out_channels // g, -1)
        out = np.matmul(wm[None], cols).reshape(n, spec.out_channels, ho, wo)
    if b is not None:
        out += b.astype(acc, copy=False)[None, :, None, None]
    return check_finite(out.astype(x.dtype, copy=False), "conv2d")


def conv2d_vjp(x: np.ndarray, w: np.ndarray, spec: ConvSpec, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_b`` is None when the spec has no bias."""
    ho, wo = _check_conv(x, w, spec)
    if grad_out.shape != (x.shape[0], spec.out_channels, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output")
    acc = np.dtype(np.float64) if x.dtype == np.float64 else np.dtype(np.float32)
    xp = _padded(x.astype(acc, copy=False), spec)
    wa = w.astype(acc, copy=False)
    go = grad_out.astype(acc, copy=False)
    n = x.shape[0]
    kh, kw = spec.kernel
    grad_b = go.sum(axis=(0, 2, 3)) if spec.bias else None
    if spec.depthwise and _use_kernels:
        gxp, gw = _kernels.dw_backward(
            np.ascontiguousarray(xp), np.ascontiguousarray(wa[:, 0]), np.ascontiguousarray(go),
            *spec.stride, *spec.dilation,
        )
        grad_w = gw.astype(acc)[:, None]
    elif spec.depthwise:
        gxp = np.zeros(xp.shape, dtype=acc)
        grad_w = np.empty(wa.shape, dtype=acc)
        tmp = np.empty_like(go)
        for i in range(kh):
            for j in range(kw):
                tap = _tap(xp, spec, i, j, ho, wo)
                np.multiply(go, tap, out=tmp)
                grad_w[:, 0, i, j] = tmp.sum(axis=(0, 2, 3))
                np.multiply(go, wa[:, 0, i, j][None, :, None, None], out=tmp)
                _tap(gxp, spec, i, j, ho, wo)[...] += tmp
    else:
        gxp = np.zeros(xp.shape, dtype=acc)
        g = spec.groups
        cin_g = spec.in_channels // g
        cols = _im2col(xp, spec, ho, wo)
        gom = go.reshape(n, g, spec.out_channels // g, ho * wo)
        grad_w = np.matmul(gom, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wa.shape)
        wm = wa.reshape(g, spec.out_channels // g, -1)
        dcols = np.matmul(wm.transpose(0, 2, 1)[None], gom)
        if (kh, kw) == (1, 1) and spec.stride == (1, 1):
            gxp = dcols.reshape(gxp.shape)
        else:
            dcols = dcols.reshape(n, g * cin_g, kh, kw, ho, wo)
            for i in range(kh):
                for j in range(kw):
                    _tap(gxp, spec, i, j, ho, wo)[...] += dcols[:, :, i, j]
    ph, pw = spec.padding
    grad_x = gxp[:, :, ph: gxp.shape[2] - ph, pw: gxp.shape[3] - pw]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# -- activations -------------------------------------------------------------

def relu6(x: np.ndarray) -> np.ndarray:
    if _use_kernels and x.dtype in (np.float32, np.float64):
        return _kernels.act_relu6(np.ascontiguousarray(x))
    return np.minimum(np.maximum(x, 0), 6).astype(x.dtype, copy=False)


def relu6_vjp(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    acc = np.float64 if grad_out.dtype == np.float64 else np.float32
    if _use_kernels:
        return _kernels.relu6_backward(np.ascontiguousarray(x), np.ascontiguousarray(grad_out, dtype=acc))
    return np.where((x > 0) & (x < 6), grad_out, 0).astype(acc, copy=False)


def _compiled(x: np.ndarray) -> bool:
    return _use_kernels and x.dtype in (np.float32, np.float64)


def relu(x: np.ndarray) -> np.ndarray:
    if _compiled(x):
        return _kernels.act_relu(np.ascontiguousarray(x))
    return np.maximum(x, 0)


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> np.ndarray:
    if _compiled(x):
        return _kernels.act_leaky_relu(np.ascontiguousarray(x), x.dtype.type(slope))
    return np.where(x > 0, x, x * x.dtype.type(slope))


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if _compiled(x):
        return _kernels.act_elu(np.ascontiguousarray(x), x.dtype.type(alpha))
    return np.where(x > 0, x, alpha * np.expm1(x)).astype(x.dtype, copy=False)


def celu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if _compiled(x):
        return _kernels.act_celu(np.ascontiguousarray(x), x.dtype.type(alpha))
    return np.where(x > 0, x, alpha * np.expm1(x / alpha)).astype(x.dtype, copy=False)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray, approximate: str = "tanh") -> np.ndarray:
    """GELU; ``approximate="tanh"`` (default) or ``"none"`` for the exact erf form."""
    if approximate not in ("tanh", "none"):
        raise ValueError(f"unknown GELU approximation {approximate!r}")
    if _compiled(x):
        fn = _kernels.act_gelu_tanh if approximate == "tanh" else _kernels.act_gelu_erf
        return fn(np.ascontiguousarray(x))
    if approximate == "tanh":
        y = 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))
    else:
        from scipy.special import erf

        y = 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    return y.astype(x.dtype, copy=False)


# -- batch norm ---------------------------------------------------------------

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype), running_var=np.ones(channels, dtype), **kw,
        )


def _bn_check(x: np.ndarray, state: BatchNormState):
    if x.ndim != 4:
        raise ValueError("batch_norm expects NCHW input")
    if state.gamma.shape[0] != x.shape[1]:
        raise ValueError(f"batch_norm: {state.gamma.shape[0]} parameters for {x.shape[1]} channels")


def _bn_batch_stats(xa: np.ndarray):
    if _use_kernels:
        mu, var = _kernels.bn_stats(np.ascontiguousarray(xa))
        return mu.astype(xa.dtype), var.astype(xa.dtype)
    mu = xa.mean(axis=(0, 2, 3))
    var = np.square(xa - mu[None, :, None, None]).mean(axis=(0, 2, 3))
    return mu, var


def batch_norm(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    """Normalize over (N, H, W). Train mode also updates the running statistics."""
    _bn_check(x, state)
    acc = compute_dtype(x)
    xa = x.astype(acc, copy=False)
    if state.mode == "train":
        mu, var = _bn_batch_stats(xa)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    elif state.mode == "eval":
        mu = state.running_mean.astype(acc)
        var = state.running_var.astype(acc)
    else:
        raise ValueError(f"unknown batch_norm mode {state.mode!r}")
    scale = state.gamma.astype(acc) / np.sqrt(var + state.eps)
    shift = state.beta.astype(acc) - mu * scale
    out = xa * scale[None, :, None, None] + shift[None, :, None, None]
    return check_finite(out.astype(x.dtype, copy=False), "batch_norm")


def batch_norm_vjp(x: np.ndarray, state: BatchNormState, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)`` for the mode in ``state``."""
    _bn_check(x, state)
    acc = np.float64 if x.dtype == np.float64 else np.float32
    xa = x.astype(acc, copy=False)
    g = grad_out.astype(acc, copy=False)
    gamma = state.gamma.astype(acc)
    if state.mode == "train":
        mu, var = _bn_batch_stats(xa)
    else:
        mu, var = state.running_mean.astype(acc), state.running_var.astype(acc)
    inv = 1.0 / np.sqrt(var + state.eps)
    if state.mode == "train" and _use_kernels:
        gx, gg, gb = _kernels.bn_backward_train(
            np.ascontiguousarray(xa), np.ascontiguousarray(g), mu, inv, gamma
        )
        return gx, gg.astype(acc), gb.astype(acc)
    xhat = (xa - mu[None, :, None, None]) * inv[None, :, None, None]
    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    if state.mode == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        k = (gamma * inv)[None, :, None, None]
        grad_x = k * (g - grad_beta[None, :, None, None] / m - xhat * (grad_gamma / m)[None, :, None, None])
    else:
        grad_x = g * (gamma * inv)[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


# -- global response normalization ---------------------------------------------

@dataclass
class GrnState:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-6

    @classmethod
    def create(cls, channels: int, dtype=np.float32, per_channel: bool = True, eps: float = 1e-6):
        n = channels if per_channel else 1
        return cls(gamma=np.zeros(n, dtype), beta=np.zeros(n, dtype), eps=eps)


def _grn_norms(xa: np.ndarray, eps: float):
    gx = np.sqrt(np.sum(xa * xa, axis=(2, 3), keepdims=True))
    denom = gx.mean(axis=1, keepdims=True) + eps
    return gx, denom


def _grn_param(p: np.ndarray, acc, channels: int) -> np.ndarray:
    p = p.astype(acc)
    if p.size not in (1, channels):
        raise ValueError(f"GRN parameter of size {p.size} for {channels} channels")
    return p.reshape(1, -1, 1, 1)


def grn(x: np.ndarray, state: GrnState) -> np.ndarray:
    """``gamma * (x * N(x)) + beta + x`` with ``N_c = |x_c| / (mean_c |x_c| + eps)``."""
    if x.ndim != 4:
        raise ValueError("grn expects NCHW input")
    acc = compute_dtype(x)
    xa = x.astype(acc, copy=False)
    gx, denom = _grn_norms(xa, state.eps)
    gamma = _grn_param(state.gamma, acc, x.shape[1])
    beta = _grn_param(state.beta, acc, x.shape[1])
    out = gamma * (xa * (gx / denom)) + beta + xa
    return check_finite(out.astype(x.dtype, copy=False), "grn")


def grn_vjp(x: np.ndarray, state: GrnState, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_gamma, grad_beta)``; parameter grads match the parameter shape."""
    acc = np.float64 if x.dtype == np.float64 else np.float32
    xa = x.astype(acc, copy=False)
    g = grad_out.astype(acc, copy=False)
    c = x.shape[1]
    gamma = _grn_param(state.gamma, acc, c)
    gx, denom = _grn_norms(xa, state.eps)
    nx = gx / denom
    per_channel = state.gamma.size != 1
    red = (0, 2, 3) if per_channel else None
    grad_gamma = np.asarray((g * xa * nx).sum(axis=red)).reshape(state.gamma.shape)
    grad_beta = np.asarray(g.sum(axis=red)).reshape(state.beta.shape)
    a = g * gamma
    d_n = (a * xa).sum(axis=(2, 3), keepdims=True)
    d_g = d_n / denom - (d_n * gx).sum(axis=1, keepdims=True) / (c * denom * denom)
    safe = np.where(gx > 0, gx, 1.0)
    d_x_norm = np.where(gx > 0, d_g / safe, 0.0)
    grad_x = g + a * nx + d_x_norm * xa
    return grad_x, grad_gamma, grad_beta


# -- pooling --------------------------------------------------------------------

def _pool_out(x: np.ndarray, k: int, s: int) -> Tuple[int, int]:
    if x.ndim != 4:
        raise ValueError("pooling expects NCHW input")
    h, w = x.shape[2:]
    if h < k or w < k:
        raise ValueError(f"pooling window {k} larger than input {h}x{w}")
    return (h - k) // s + 1, (w - k) // s + 1


def _pool_tap(x: np.ndarray, i: int, j: int, s: int, ho: int, wo: int):
    return x[:, :, i: i + s * (ho - 1) + 1: s, j: j + s * (wo - 1) + 1: s]


def max_pool2d(x: np.ndarray, k: int = 2, s: int = 2) -> np.ndarray:
    ho, wo = _pool_out(x, k, s)
    out = _pool_tap(x, 0, 0, s, ho, wo).copy()
    for i in range(k):
        for j in range(k):
            if i or j:
                np.maximum(out, _pool_tap(x, i, j, s, ho, wo), out=out)
    return out


def max_pool2d_vjp(x: np.ndarray, k: int, s: int, grad_out: np.ndarray) -> np.ndarray:
    """Routes each output gradient to the first (row-major) maximum of its window."""
    ho, wo = _pool_out(x, k, s)
    acc = np.float64 if grad_out.dtype == np.float64 else np.float32
    taps = [(i, j) for i in range(k) for j in range(k)]
    best = _pool_tap(x, 0, 0, s, ho, wo)
    arg = np.zeros(best.shape, dtype=np.int32)
    for t, (i, j) in enumerate(taps[1:], start=1):
        v = _pool_tap(x, i, j, s, ho, wo)
        better = v > best
        best = np.where(better, v, best)
        arg[better] = t
    gx = np.zeros(x.shape, dtype=acc)
    g = grad_out.astype(acc, copy=False)
    for t, (i, j) in enumerate(taps):
        _pool_tap(gx, i, j, s, ho, wo)[...] += np.where(arg == t, g, 0)
    return gx


def avg_pool2d(x: np.ndarray, k: int = 2, s: int = 2) -> np.ndarray:
    ho, wo = _pool_out(x, k, s)
    acc = compute_dtype(x)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=acc)
    for i in range(k):
        for j in range(k):
            out += _pool_tap(x, i, j, s, ho, wo)
    out /= k * k
    return out.astype(x.dtype, copy=False)


def avg_pool2d_vjp(x: np.ndarray, k: int, s: int, grad_out: np.ndarray) -> np.ndarray:
    ho, wo = _pool_out(x, k, s)
    acc = np.float64 if grad_out.dtype == np.float64 else np.float32
    gx = np.zeros(x.shape, dtype=acc)
    g = grad_out.astype(acc) / (k * k)
    for i in range(k):
        for j in range(k):
            _pool_tap(gx, i, j, s, ho, wo)[...] += g
    return gx


def adaptive_avg_pool(x: np.ndarray) -> np.ndarray:
    """Average each channel plane down to 1x1."""
    if x.ndim != 4:
        raise ValueError("adaptive_avg_pool expects NCHW input")
    return np.mean(x, axis=(2, 3), keepdims=True, dtype=compute_dtype(x)).astype(x.dtype)


def adaptive_avg_pool_vjp(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    acc = np.float64 if grad_out.dtype == np.float64 else np.float32
    hw = x.shape[2] * x.shape[3]
    return np.broadcast_to(grad_out.astype(acc) / hw, x.shape).copy()


# -- channel shuffle -------------------------------------------------------------

def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    rest = x.shape[2:]
    return np.ascontiguousarray(
        x.reshape((n, groups, c // groups) + rest).swapaxes(1, 2).reshape(x.shape)
    )


def channel_shuffle_vjp(grad_out: np.ndarray, groups: int) -> np.ndarray:
    return channel_shuffle(grad_out, grad_out.shape[1] // groups)


# -- linear / loss ----------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    acc = compute_dtype(x)
    out = x.astype(acc, copy=False) @ w.astype(acc, copy=False).T
    if b is not None:
        out += b.astype(acc, copy=False)
    return check_finite(out.astype(x.dtype, copy=False), "linear")


def linear_vjp(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    acc = np.float64 if x.dtype == np.float64 else np.float32
    g = grad_out.astype(acc, copy=False)
    xa = x.astype(acc, copy=False)
    return g @ w.astype(acc), g.T @ xa, g.sum(axis=0)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be (N, K) with N labels")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    acc = np.float64 if logits.dtype == np.float64 else np.float32
    z = logits.astype(acc)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return float(loss), grad
