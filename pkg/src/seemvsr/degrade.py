"""MATLAB-style bicubic resampling (the BI degradation) and colour helpers."""

from fractions import Fraction
import math

import numpy as np
import torch


def cubic(x, a=-0.5):
    """Keys cubic convolution kernel; a = -0.5 is MATLAB's choice."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    return (((a + 2) * x3 - (a + 3) * x2 + 1) * (x <= 1)
            + (a * x3 - 5 * a * x2 + 8 * a * x - 4 * a) * ((x > 1) & (x <= 2)))


def _as_scale(scale):
    scale = Fraction(scale).limit_denominator(1000) if not isinstance(scale, Fraction) else scale
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return scale


def output_length(in_len, scale):
    return int(math.ceil(in_len * _as_scale(scale)))


def contributions(in_len, scale, antialias=True):
    """Per-output-pixel tap indices (unclamped) and normalised weights.

    Returns ``(indices, weights)`` each of shape (out_len, taps).
    """
    scale = _as_scale(scale)
    s = float(scale)
    out_len = output_length(in_len, scale)
    if s < 1 and antialias:
        def kernel(x):
            return s * cubic(s * x)
        width = 4.0 / s
    else:
        kernel = cubic
        width = 4.0
    # 0-indexed centre of each output pixel in input coordinates
    u = (np.arange(out_len, dtype=np.float64) + 0.5) / s - 0.5
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel(u[:, None] - indices)
    weights /= weights.sum(axis=1, keepdims=True)
    return indices.astype(np.int64), weights


def _fold(indices, in_len, edge):
    if edge == "clamp":
        return np.clip(indices, 0, in_len - 1)
    if edge == "reflect":
        # MATLAB's symmetric extension: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
        period = 2 * in_len
        m = np.mod(indices, period)
        return np.where(m < in_len, m, period - 1 - m)
    raise ValueError(f"unknown edge mode {edge!r}")


def resize_matrix(in_len, scale, antialias=True, edge="clamp"):
    """Dense (out_len, in_len) resampling matrix along one axis."""
    indices, weights = contributions(in_len, scale, antialias)
    folded = _fold(indices, in_len, edge)
    mat = np.zeros((indices.shape[0], in_len), dtype=np.float64)
    rows = np.repeat(np.arange(indices.shape[0]), indices.shape[1])
    np.add.at(mat, (rows, folded.ravel()), weights.ravel())
    return mat


_MATRIX_CACHE = {}


def _cached_matrix(in_len, scale, antialias, edge):
    key = (in_len, _as_scale(scale), antialias, edge)
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = resize_matrix(in_len, scale, antialias, edge)
    return _MATRIX_CACHE[key]


def bicubic_resize(img, scale, antialias=True, edge="clamp"):
    """Resize the last two axes of ``img`` by ``scale``.

    Works on numpy arrays and torch tensors (differentiable, keeps dtype).
    Downsampling widens the kernel by 1/scale so high frequencies are
    attenuated before decimation; each output pixel's weights sum to one.
    """
    scale = _as_scale(scale)
    h, w = img.shape[-2:]
    my = _cached_matrix(h, scale, antialias, edge)
    mx = _cached_matrix(w, scale, antialias, edge)
    if isinstance(img, torch.Tensor):
        my_t = torch.as_tensor(my, dtype=img.dtype, device=img.device)
        mx_t = torch.as_tensor(mx, dtype=img.dtype, device=img.device)
        return torch.matmul(torch.matmul(my_t, img), mx_t.transpose(0, 1))
    arr = np.asarray(img)
    out = my @ arr.astype(np.float64) @ mx.T
    return out.astype(arr.dtype) if np.issubdtype(arr.dtype, np.floating) else out


def rgb_to_y(img):
    """BT.601 limited-range luma of an RGB image in [0, 1].

    ``img`` has the colour axis first (3, ...). Output lies in
    [16/255, 235/255].
    """
    r, g, b = img[0], img[1], img[2]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
