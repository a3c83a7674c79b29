"""Convolution kernels on channels-last (NHWC) float64 arrays.

Two interchangeable paths exist for every kernel: numba loops and a
numpy path built from strided slices and matmuls. ``NUMBA_OK`` picks the
default; the ``backend`` argument forces one for comparison and testing.
"""
from __future__ import annotations

import numpy as np

from ._accel import NUMBA_OK, njit

__all__ = [
    "conv2d_forward",
    "conv2d_backward",
    "bn_train_forward",
    "bn_train_backward",
    "default_backend",
]


def default_backend() -> str:
    return "numba" if NUMBA_OK else "numpy"


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------


@njit(cache=True, error_model="numpy")
def _dw_fwd(xp, w, stride, Ho, Wo):
    # xp (N,Hp,Wp,C), w (k,k,C)
    N = xp.shape[0]
    C = xp.shape[3]
    k = w.shape[0]
    out = np.zeros((N, Ho, Wo, C))
    for n in range(N):
        for y in range(Ho):
            for x in range(Wo):
                o = out[n, y, x]
                for i in range(k):
                    for j in range(k):
                        src = xp[n, y * stride + i, x * stride + j]
                        wv = w[i, j]
                        for c in range(C):
                            o[c] += wv[c] * src[c]
    return out


@njit(cache=True, error_model="numpy")
def _dw_bwd(xp, w, gout, stride):
    N, Ho, Wo, C = gout.shape
    k = w.shape[0]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for n in range(N):
        for y in range(Ho):
            for x in range(Wo):
                g = gout[n, y, x]
                for i in range(k):
                    for j in range(k):
                        yy = y * stride + i
                        xx = x * stride + j
                        src = xp[n, yy, xx]
                        dst = gxp[n, yy, xx]
                        wv = w[i, j]
                        gwv = gw[i, j]
                        for c in range(C):
                            dst[c] += wv[c] * g[c]
                            gwv[c] += src[c] * g[c]
    return gxp, gw


@njit(cache=True, error_model="numpy")
def _grp_fwd(xp, w, stride, Ho, Wo):
    # w (k,k,G,cig,cog)
    N = xp.shape[0]
    k = w.shape[0]
    G = w.shape[2]
    cig = w.shape[3]
    cog = w.shape[4]
    out = np.zeros((N, Ho, Wo, G * cog))
    for n in range(N):
        for y in range(Ho):
            for x in range(Wo):
                o = out[n, y, x]
                for i in range(k):
                    for j in range(k):
                        src = xp[n, y * stride + i, x * stride + j]
                        for g in range(G):
                            for ci in range(cig):
                                v = src[g * cig + ci]
                                wr = w[i, j, g, ci]
                                base = g * cog
                                for co in range(cog):
                                    o[base + co] += v * wr[co]
    return out


@njit(cache=True, error_model="numpy")
def _grp_bwd(xp, w, gout, stride):
    N, Ho, Wo, _ = gout.shape
    k = w.shape[0]
    G = w.shape[2]
    cig = w.shape[3]
    cog = w.shape[4]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for n in range(N):
        for y in range(Ho):
            for x in range(Wo):
                go = gout[n, y, x]
                for i in range(k):
                    for j in range(k):
                        yy = y * stride + i
                        xx = x * stride + j
                        src = xp[n, yy, xx]
                        dst = gxp[n, yy, xx]
                        for g in range(G):
                            base = g * cog
                            for ci in range(cig):
                                v = src[g * cig + ci]
                                wr = w[i, j, g, ci]
                                gwr = gw[i, j, g, ci]
                                acc = 0.0
                                for co in range(cog):
                                    gv = go[base + co]
                                    acc += wr[co] * gv
                                    gwr[co] += v * gv
                                dst[g * cig + ci] += acc
    return gxp, gw


# --------------------------------------------------------------------------
# numpy kernels
# --------------------------------------------------------------------------


def _window(xp, i, j, stride, Ho, Wo):
    return xp[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :]


def _dw_fwd_np(xp, w, stride, Ho, Wo):
    N, C = xp.shape[0], xp.shape[3]
    k = w.shape[0]
    out = np.zeros((N, Ho, Wo, C))
    for i in range(k):
        for j in range(k):
            out += _window(xp, i, j, stride, Ho, Wo) * w[i, j]
    return out


def _dw_bwd_np(xp, w, gout, stride):
    N, Ho, Wo, C = gout.shape
    k = w.shape[0]
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for i in range(k):
        for j in range(k):
            _window(gxp, i, j, stride, Ho, Wo)[...] += gout * w[i, j]
            gw[i, j] = np.einsum("nhwc,nhwc->c", _window(xp, i, j, stride, Ho, Wo), gout)
    return gxp, gw


def _grp_fwd_np(xp, w, stride, Ho, Wo):
    N = xp.shape[0]
    k, _, G, cig, cog = w.shape
    M = N * Ho * Wo
    out = np.zeros((G, M, cog))
    for i in range(k):
        for j in range(k):
            patch = _window(xp, i, j, stride, Ho, Wo).reshape(M, G, cig).transpose(1, 0, 2)
            out += np.matmul(patch, w[i, j])
    return out.transpose(1, 0, 2).reshape(N, Ho, Wo, G * cog)


def _grp_bwd_np(xp, w, gout, stride):
    N, Ho, Wo, _ = gout.shape
    k, _, G, cig, cog = w.shape
    M = N * Ho * Wo
    g = gout.reshape(M, G, cog).transpose(1, 0, 2)
    gxp = np.zeros(xp.shape)
    gw = np.zeros(w.shape)
    for i in range(k):
        for j in range(k):
            win = _window(gxp, i, j, stride, Ho, Wo)
            win[...] += np.matmul(g, w[i, j].transpose(0, 2, 1)).transpose(1, 0, 2).reshape(win.shape)
            patch = _window(xp, i, j, stride, Ho, Wo).reshape(M, G, cig).transpose(1, 2, 0)
            gw[i, j] = np.matmul(patch, g)
    return gxp, gw


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    N, H, W, C = x.shape
    xp = np.zeros((N, H + 2 * padding, W + 2 * padding, C))
    xp[:, padding : padding + H, padding : padding + W, :] = x
    return xp


def _is_depthwise(w, groups, cin):
    return groups == cin and w.shape[0] == cin and w.shape[1] == 1


def _grouped_weight(w, groups):
    # (Cout, cig, k, k) -> (k, k, G, cig, cog)
    cout, cig, k, _ = w.shape
    return np.ascontiguousarray(w.reshape(groups, cout // groups, cig, k, k).transpose(3, 4, 0, 2, 1))


def conv2d_forward(x, w, stride=1, padding=0, groups=1, backend=None):
    """Convolve NHWC ``x`` with weight ``w`` of shape (Cout, Cin/groups, k, k).

    Returns a contiguous NHWC array.
    """
    backend = backend or default_backend()
    N, H, W, cin = x.shape
    cout, cig, k, _ = w.shape
    Ho, Wo = _out_size(H, k, stride, padding), _out_size(W, k, stride, padding)
    if k == 1 and groups == 1 and padding == 0:
        xs = x[:, ::stride, ::stride, :] if stride > 1 else x
        return (xs.reshape(-1, cin) @ w.reshape(cout, cin).T).reshape(N, Ho, Wo, cout)
    xp = _pad(x, padding)
    if _is_depthwise(w, groups, cin):
        wk = np.ascontiguousarray(w[:, 0].transpose(1, 2, 0))
        f = _dw_fwd if backend == "numba" else _dw_fwd_np
        return f(xp, wk, stride, Ho, Wo)
    f = _grp_fwd if backend == "numba" else _grp_fwd_np
    return f(xp, _grouped_weight(w, groups), stride, Ho, Wo)


def conv2d_backward(x, w, gout, stride=1, padding=0, groups=1, backend=None):
    """Gradients of ``conv2d_forward`` with respect to input and weight."""
    backend = backend or default_backend()
    N, H, W, cin = x.shape
    cout, cig, k, _ = w.shape
    gout = np.ascontiguousarray(gout)
    if k == 1 and groups == 1 and padding == 0:
        xs = x[:, ::stride, ::stride, :] if stride > 1 else x
        g2 = gout.reshape(-1, cout)
        gw = (g2.T @ xs.reshape(-1, cin)).reshape(cout, cin, 1, 1)
        gxs = (g2 @ w.reshape(cout, cin)).reshape(xs.shape)
        if stride > 1:
            gx = np.zeros(x.shape)
            gx[:, ::stride, ::stride, :] = gxs
            return gx, gw
        return gxs, gw
    xp = _pad(x, padding)
    if _is_depthwise(w, groups, cin):
        wk = np.ascontiguousarray(w[:, 0].transpose(1, 2, 0))
        f = _dw_bwd if backend == "numba" else _dw_bwd_np
        gxp, gwk = f(xp, wk, gout, stride)
        gw = gwk.transpose(2, 0, 1)[:, None, :, :]
    else:
        f = _grp_bwd if backend == "numba" else _grp_bwd_np
        gxp, gwk = f(xp, _grouped_weight(w, groups), gout, stride)
        # (k,k,G,cig,cog) -> (Cout, cig, k, k)
        gw = gwk.transpose(2, 4, 3, 0, 1).reshape(cout, cig, k, k)
    if padding:
        gxp = gxp[:, padding : padding + H, padding : padding + W, :]
    return gxp, np.ascontiguousarray(gw)


# --------------------------------------------------------------------------
# batch norm (training mode) on (M, C) rows
# --------------------------------------------------------------------------


@njit(cache=True, error_model="numpy")
def _bn_fwd(x, gamma, beta, eps):
    M, C = x.shape
    mean = np.zeros(C)
    var = np.zeros(C)
    for r in range(M):
        row = x[r]
        for c in range(C):
            mean[c] += row[c]
    for c in range(C):
        mean[c] /= M
    for r in range(M):
        row = x[r]
        for c in range(C):
            d = row[c] - mean[c]
            var[c] += d * d
    invstd = np.empty(C)
    for c in range(C):
        var[c] /= M
        invstd[c] = 1.0 / np.sqrt(var[c] + eps)
    xhat = np.empty((M, C))
    out = np.empty((M, C))
    for r in range(M):
        row = x[r]
        xr = xhat[r]
        orow = out[r]
        for c in range(C):
            v = (row[c] - mean[c]) * invstd[c]
            xr[c] = v
            orow[c] = v * gamma[c] + beta[c]
    return out, xhat, mean, var, invstd


@njit(cache=True, error_model="numpy")
def _bn_bwd(gy, xhat, gamma, invstd):
    M, C = gy.shape
    dbeta = np.zeros(C)
    dgamma = np.zeros(C)
    for r in range(M):
        g = gy[r]
        xr = xhat[r]
        for c in range(C):
            dbeta[c] += g[c]
            dgamma[c] += g[c] * xr[c]
    a = np.empty(C)
    b = np.empty(C)
    cc = np.empty(C)
    for c in range(C):
        a[c] = gamma[c] * invstd[c]
        b[c] = dbeta[c] / M
        cc[c] = dgamma[c] / M
    gx = np.empty((M, C))
    for r in range(M):
        g = gy[r]
        xr = xhat[r]
        o = gx[r]
        for c in range(C):
            o[c] = a[c] * (g[c] - b[c] - xr[c] * cc[c])
    return gx, dgamma, dbeta


def _bn_fwd_np(x, gamma, beta, eps):
    M = x.shape[0]
    mean = x.mean(axis=0)
    xc = x - mean
    var = np.einsum("mc,mc->c", xc, xc) / M
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    return xhat * gamma + beta, xhat, mean, var, invstd


def _bn_bwd_np(gy, xhat, gamma, invstd):
    M = gy.shape[0]
    dbeta = gy.sum(axis=0)
    dgamma = np.einsum("mc,mc->c", gy, xhat)
    gx = (gamma * invstd) * (gy - dbeta / M - xhat * (dgamma / M))
    return gx, dgamma, dbeta


def bn_train_forward(x, gamma, beta, eps, backend=None):
    """Normalize rows of (M, C) ``x`` with batch statistics.

    Returns (out, xhat, mean, biased var, invstd).
    """
    f = _bn_fwd if (backend or default_backend()) == "numba" else _bn_fwd_np
    return f(np.ascontiguousarray(x), gamma, beta, eps)


def bn_train_backward(gy, xhat, gamma, invstd, backend=None):
    """Returns (grad x, grad gamma, grad beta)."""
    f = _bn_bwd if (backend or default_backend()) == "numba" else _bn_bwd_np
    return f(np.ascontiguousarray(gy), xhat, gamma, invstd)
