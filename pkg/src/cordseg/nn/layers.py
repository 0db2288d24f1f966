"""Layer operations with forward and backward passes.

Tensors are plain numpy arrays in NC(D)HW layout, float32 or float64.
Forward functions are pure; batch-norm running-stat updates are returned
to the caller rather than applied in place.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_conv_args(x, weights, bias, dilation, ndim):
    if x.ndim != ndim + 2:
        raise ConfigError(f"expected {ndim + 2}-D input, got {x.ndim}-D")
    if weights.ndim != ndim + 2:
        raise ConfigError(f"expected {ndim + 2}-D weights, got {weights.ndim}-D")
    k = weights.shape[2]
    if any(weights.shape[2 + i] != k for i in range(ndim)):
        raise ConfigError(f"kernel must be cubic, got {weights.shape[2:]}")
    if k % 2 == 0:
        raise ConfigError(f"kernel extent must be odd, got {k}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if x.shape[1] != weights.shape[1]:
        raise ConfigError(
            f"channel mismatch: input has {x.shape[1]}, weights expect {weights.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise ConfigError(f"bias shape {bias.shape} != ({weights.shape[0]},)")


def conv2d(x, weights, bias, dilation=1):
    """Same-padded 2D convolution: [N,C,H,W] x [F,C,k,k] -> [N,F,H,W].

    Zero padding of dilation*(k-1)/2 per side keeps spatial dims; the
    effective receptive field is k + (k-1)*(dilation-1).
    """
    _check_conv_args(x, weights, bias, dilation, 2)
    xc = np.ascontiguousarray(x)
    wc = np.ascontiguousarray(weights)
    out = np.empty((x.shape[0], weights.shape[0], x.shape[2], x.shape[3]), dtype=x.dtype)
    kernels.conv2d_forward(xc, wc, dilation, out)
    out += bias[None, :, None, None]
    return out


def conv3d(x, weights, bias, dilation=1):
    """Same-padded 3D convolution: [N,C,D,H,W] x [F,C,k,k,k] -> [N,F,D,H,W]."""
    _check_conv_args(x, weights, bias, dilation, 3)
    xc = np.ascontiguousarray(x)
    wc = np.ascontiguousarray(weights)
    out = np.empty(
        (x.shape[0], weights.shape[0], x.shape[2], x.shape[3], x.shape[4]), dtype=x.dtype
    )
    kernels.conv3d_forward(xc, wc, dilation, out)
    out += bias[None, :, None, None, None]
    return out


def conv_backward(x, weights, gout, dilation):
    """Gradients of a same-padded convolution w.r.t. input, weights, bias."""
    ndim = x.ndim - 2
    xc = np.ascontiguousarray(x)
    wc = np.ascontiguousarray(weights)
    gc = np.ascontiguousarray(gout)
    gx = np.empty_like(xc)
    gw = np.empty_like(wc)
    if ndim == 2:
        kernels.conv2d_backward_input(gc, wc, dilation, gx)
        kernels.conv2d_backward_weight(xc, gc, dilation, gw)
    else:
        kernels.conv3d_backward_input(gc, wc, dilation, gx)
        kernels.conv3d_backward_weight(xc, gc, dilation, gw)
    spatial = tuple(range(2, gout.ndim))
    gb = gout.sum(axis=(0,) + spatial, dtype=np.float64).astype(gout.dtype)
    return gx, gw, gb


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(x, rate, mode, rng=None):
    """Inverted dropout: zero with probability ``rate``, scale by 1/(1-rate).

    Identity in infer mode. Pass a seeded Generator for reproducibility.
    """
    out, _ = dropout_forward(x, rate, mode, rng)
    return out


def dropout_forward(x, rate, mode, rng):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return x * keep * scale, (keep, scale)


def dropout_backward(gout, cache):
    if cache is None:
        return gout
    keep, scale = cache
    return gout * keep * scale


def batch_norm(x, scale, shift, running_stats, mode):
    """Per-channel batch normalization.

    ``running_stats`` is a (mean, var) pair. Train mode normalizes by batch
    statistics and returns updated running stats; infer mode uses the
    running stats unchanged. Returns (out, (mean, var)).
    """
    out, _, stats = batch_norm_forward(x, scale, shift, running_stats[0], running_stats[1], mode)
    return out, stats


def batch_norm_forward(x, gamma, beta, run_mean, run_var, mode):
    if gamma.shape != (x.shape[1],):
        raise ConfigError(f"batch-norm channel mismatch: {gamma.shape} vs input C={x.shape[1]}")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if mode == "train":
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
        mean = mean.astype(x.dtype)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        new_mean = (1.0 - BN_MOMENTUM) * run_mean + BN_MOMENTUM * mean
        new_var = (1.0 - BN_MOMENTUM) * run_var + BN_MOMENTUM * var.astype(x.dtype)
        new_var = np.maximum(new_var, np.finfo(x.dtype).tiny)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        return out, (xhat, inv, True), (new_mean, new_var)
    inv = (1.0 / np.sqrt(run_var.astype(np.float64) + BN_EPS)).astype(x.dtype)
    xhat = (x - run_mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, inv, False), (run_mean, run_var)


def batch_norm_backward(gout, gamma, cache):
    xhat, inv, trained_stats = cache
    axes = (0,) + tuple(range(2, gout.ndim))
    shape = (1, gout.shape[1]) + (1,) * (gout.ndim - 2)
    dgamma = (gout * xhat).sum(axis=axes, dtype=np.float64).astype(gout.dtype)
    dbeta = gout.sum(axis=axes, dtype=np.float64).astype(gout.dtype)
    dxhat = gout * gamma.reshape(shape)
    if not trained_stats:
        return dxhat * inv.reshape(shape), dgamma, dbeta
    n = gout.size // gout.shape[1]
    sum_dxhat = dxhat.sum(axis=axes, dtype=np.float64).astype(gout.dtype)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes, dtype=np.float64).astype(gout.dtype)
    dx = (inv.reshape(shape) / n) * (
        n * dxhat - sum_dxhat.reshape(shape) - xhat * sum_dxhat_xhat.reshape(shape)
    )
    return dx, dgamma, dbeta


def maxpool(x, factor=2):
    """Non-overlapping max pooling; spatial dims must divide the factor."""
    out, _ = maxpool_forward(x, factor)
    return out


def _pool_view(x, factor):
    spatial = x.shape[2:]
    if any(s % factor for s in spatial):
        raise ConfigError(f"spatial dims {spatial} not divisible by pool factor {factor}")
    shape = [x.shape[0], x.shape[1]]
    for s in spatial:
        shape += [s // factor, factor]
    v = x.reshape(shape)
    ndim = len(spatial)
    # move the block axes last: (N, C, s1, f, s2, f, ...) -> (N, C, s1, s2, ..., f, f, ...)
    order = [0, 1] + [2 + 2 * i for i in range(ndim)] + [3 + 2 * i for i in range(ndim)]
    v = v.transpose(order)
    flat = v.reshape(v.shape[: 2 + ndim] + (factor**ndim,))
    return flat


def maxpool_forward(x, factor=2):
    flat = _pool_view(x, factor)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (idx, x.shape, factor)


def maxpool_backward(gout, cache):
    idx, in_shape, factor = cache
    ndim = gout.ndim - 2
    flat_g = np.zeros(gout.shape + (factor**ndim,), dtype=gout.dtype)
    np.put_along_axis(flat_g, idx[..., None], gout[..., None], axis=-1)
    block = flat_g.reshape(gout.shape + (factor,) * ndim)
    # inverse of the transpose in _pool_view
    order = [0, 1]
    for i in range(ndim):
        order += [2 + i, 2 + ndim + i]
    block = block.transpose(order)
    return np.ascontiguousarray(block.reshape(in_shape))


def upsample(x, factor=2):
    """Nearest-neighbor upsampling by integer factor on all spatial axes."""
    out = x
    for axis in range(2, x.ndim):
        out = np.repeat(out, factor, axis=axis)
    return out


def upsample_backward(gout, factor=2):
    ndim = gout.ndim - 2
    shape = [gout.shape[0], gout.shape[1]]
    for s in gout.shape[2:]:
        shape += [s // factor, factor]
    v = gout.reshape(shape)
    for i in reversed(range(ndim)):
        v = v.sum(axis=3 + 2 * i)
    return v
