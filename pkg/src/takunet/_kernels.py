"""Compiled loops for the hot paths: depthwise convolution, batch-norm
statistics and backward, and elementwise activations.

The depthwise kernels take an already zero-padded input. Each output element
accumulates its taps in row-major (i, j) order, the same order as the numpy
fallback in ``ops``, so both paths give identical forward results. Weight
gradients are reduced per row in the input dtype, then summed in float64.
"""

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

AVAILABLE = numba is not None


def _njit(fn):
    return numba.njit(cache=True)(fn) if numba is not None else fn


@_njit
def dw_forward(xp, w, sh, sw, dh, dw, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.empty((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            src = xp[b, ch]
            dst = out[b, ch]
            wk = w[ch]
            for oy in range(ho):
                row = dst[oy]
                for ox in range(wo):
                    row[ox] = 0
                for i in range(kh):
                    s = src[oy * sh + i * dh]
                    for j in range(kw):
                        wv = wk[i, j]
                        off = j * dw
                        if sw == 1:
                            for ox in range(wo):
                                row[ox] += s[ox + off] * wv
                        else:
                            for ox in range(wo):
                                row[ox] += s[ox * sw + off] * wv
    return out


@_njit
def dw_backward(xp, w, go, sh, sw, dh, dw):
    """Gradients w.r.t. the padded input and the (C, kh, kw) weights."""
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = go.shape[2], go.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros((c, kh, kw), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            src = xp[b, ch]
            g = go[b, ch]
            gs = gxp[b, ch]
            wk = w[ch]
            for oy in range(ho):
                gr = g[oy]
                for i in range(kh):
                    s = src[oy * sh + i * dh]
                    gsr = gs[oy * sh + i * dh]
                    for j in range(kw):
                        wv = wk[i, j]
                        off = j * dw
                        acc = xp.dtype.type(0)
                        if sw == 1:
                            for ox in range(wo):
                                gsr[ox + off] += gr[ox] * wv
                                acc += gr[ox] * s[ox + off]
                        else:
                            for ox in range(wo):
                                gsr[ox * sw + off] += gr[ox] * wv
                                acc += gr[ox] * s[ox * sw + off]
                        gw[ch, i, j] += acc
    return gxp, gw


@_njit
def bn_stats(x):
    """Per-channel mean and biased variance over (N, H, W), two-pass in float64."""
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c, dtype=np.float64)
    var = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            plane = x[b, ch]
            for i in range(h):
                for j in range(w):
                    s += plane[i, j]
        mu = s / m
        ss = 0.0
        for b in range(n):
            plane = x[b, ch]
            for i in range(h):
                for j in range(w):
                    d = plane[i, j] - mu
                    ss += d * d
        mean[ch] = mu
        var[ch] = ss / m
    return mean, var


@_njit
def bn_backward_train(x, g, mean, inv, gamma):
    n, c, h, w = x.shape
    m = n * h * w
    gx = np.empty_like(g)
    ggamma = np.zeros(c, dtype=np.float64)
    gbeta = np.zeros(c, dtype=np.float64)
    for ch in range(c):
        mu = mean[ch]
        iv = inv[ch]
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            xp = x[b, ch]
            gp = g[b, ch]
            for i in range(h):
                for j in range(w):
                    gv = gp[i, j]
                    sg += gv
                    sgx += gv * (xp[i, j] - mu) * iv
        ggamma[ch] = sgx
        gbeta[ch] = sg
        k = gamma[ch] * iv
        a = sg / m
        bb = sgx / m
        for b in range(n):
            xp = x[b, ch]
            gp = g[b, ch]
            op = gx[b, ch]
            for i in range(h):
                for j in range(w):
                    op[i, j] = k * (gp[i, j] - a - (xp[i, j] - mu) * iv * bb)
    return gx, ggamma, gbeta


@_njit
def relu6_backward(x, g):
    flat_x = x.ravel()
    flat_g = g.ravel()
    out = np.empty(flat_g.size, dtype=g.dtype)
    for i in range(flat_g.size):
        v = flat_x[i]
        out[i] = flat_g[i] if (v > 0 and v < 6) else 0
    return out.reshape(g.shape)


# Elementwise activations. Each is one compiled loop with a branch per element,
# the same execution model for all six, so their timings compare like for like.

@_njit
def act_relu(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = v if v > 0 else 0
    return out


@_njit
def act_relu6(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        o[i] = min(max(f[i], 0), 6)
    return out


@_njit
def act_leaky_relu(x, slope):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = v if v > 0 else v * slope
    return out


@_njit
def act_elu(x, alpha):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = v if v > 0 else alpha * math.expm1(v)
    return out


@_njit
def act_celu(x, alpha):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    for i in range(f.size):
        v = f[i]
        o[i] = v if v > 0 else alpha * math.expm1(v / alpha)
    return out


@_njit
def act_gelu_tanh(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    c = math.sqrt(2.0 / math.pi)
    for i in range(f.size):
        v = f[i]
        o[i] = 0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v * v * v)))
    return out


@_njit
def act_gelu_erf(x):
    out = np.empty_like(x)
    f = x.ravel()
    o = out.ravel()
    r = 1.0 / math.sqrt(2.0)
    for i in range(f.size):
        v = f[i]
        o[i] = 0.5 * v * (1.0 + math.erf(v * r))
    return out
