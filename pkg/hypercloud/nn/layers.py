"""Forward and backward kernels for the layer kinds both networks are built from.

Tensors are channels-last numpy arrays. Spatial kernels accept an optional
leading batch axis: 1D layers take (L, C) or (N, L, C), 2D layers take
(H, W, C) or (N, H, W, C).
"""

from typing import List, Tuple

import numpy as np

from ..common.constants import Constants
from ..common.errors import ExtentTooSmall, InputTooShort, ShapeMismatch


def _out_dtype(*arrays):
    return np.result_type(*arrays, np.float32)


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid 1D correlation: (..., L, Cin) -> (..., L - k + 1, Cout)."""
    k, c_in, c_out = kernel.shape
    length = x.shape[-2]
    if x.shape[-1] != c_in:
        raise ShapeMismatch(f"conv1d expects {c_in} input channels, got {x.shape[-1]}")
    if length < k:
        raise InputTooShort(f"conv1d kernel {k} is longer than the input ({length})")
    out_len = length - k + 1
    out = np.zeros(x.shape[:-2] + (out_len, c_out), dtype=_out_dtype(x, kernel))
    for i in range(k):
        out += x[..., i:i + out_len, :] @ kernel[i]
    out += bias
    return out


def conv1d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    k, c_in, c_out = kernel.shape
    out_len = grad_out.shape[-2]
    grad_flat = grad_out.reshape(-1, c_out)
    grad_x = np.zeros_like(x, dtype=_out_dtype(x, grad_out))
    grad_kernel = np.empty(kernel.shape, dtype=_out_dtype(kernel, grad_out))
    for i in range(k):
        window = x[..., i:i + out_len, :]
        grad_kernel[i] = window.reshape(-1, c_in).T @ grad_flat
        grad_x[..., i:i + out_len, :] += grad_out @ kernel[i].T
    grad_bias = grad_flat.sum(axis=0)
    return grad_x, grad_kernel, grad_bias


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 3) + [(pad, pad), (pad, pad), (0, 0)]
    return np.pad(x, widths)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 2D correlation: (..., H, W, Cin) -> (..., H, W, Cout)."""
    k, k2, c_in, c_out = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"conv2d needs an odd square kernel, got {k}x{k2}")
    if x.shape[-1] != c_in:
        raise ShapeMismatch(f"conv2d expects {c_in} input channels, got {x.shape[-1]}")
    height, width = x.shape[-3], x.shape[-2]
    padded = _pad_spatial(x, k // 2)
    out = np.zeros(x.shape[:-1] + (c_out,), dtype=_out_dtype(x, kernel))
    for dy in range(k):
        for dx in range(k):
            out += padded[..., dy:dy + height, dx:dx + width, :] @ kernel[dy, dx]
    out += bias
    return out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, grad_out: np.ndarray):
    k, _, c_in, c_out = kernel.shape
    pad = k // 2
    height, width = x.shape[-3], x.shape[-2]
    padded = _pad_spatial(x, pad)
    grad_padded = np.zeros_like(padded, dtype=_out_dtype(x, grad_out))
    grad_kernel = np.empty(kernel.shape, dtype=_out_dtype(kernel, grad_out))
    grad_flat = grad_out.reshape(-1, c_out)
    for dy in range(k):
        for dx in range(k):
            window = padded[..., dy:dy + height, dx:dx + width, :]
            grad_kernel[dy, dx] = window.reshape(-1, c_in).T @ grad_flat
            grad_padded[..., dy:dy + height, dx:dx + width, :] += grad_out @ kernel[dy, dx].T
    grad_x = grad_padded[..., pad:pad + height, pad:pad + width, :]
    return np.ascontiguousarray(grad_x), grad_kernel, grad_flat.sum(axis=0)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------

def maxpool1d_forward(x: np.ndarray, pool: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pool over axis -2; a trailing partial window is dropped.

    Returns the pooled tensor and the winner offset inside every window.
    """
    length = x.shape[-2]
    if length < pool:
        raise ExtentTooSmall(f"cannot pool {length} elements with window {pool}")
    n = length // pool
    windows = x[..., :n * pool, :].reshape(x.shape[:-2] + (n, pool, x.shape[-1]))
    routing = windows.argmax(axis=-2)
    out = np.take_along_axis(windows, routing[..., None, :], axis=-2)[..., 0, :]
    return out, routing


def maxpool1d_backward(input_shape, routing: np.ndarray, grad_out: np.ndarray, pool: int = 2) -> np.ndarray:
    n = routing.shape[-2]
    windows = np.zeros(grad_out.shape[:-2] + (n, pool, grad_out.shape[-1]), dtype=grad_out.dtype)
    np.put_along_axis(windows, routing[..., None, :], grad_out[..., None, :], axis=-2)
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    grad_x[..., :n * pool, :] = windows.reshape(grad_out.shape[:-2] + (n * pool, grad_out.shape[-1]))
    return grad_x


def _pool2d_windows(x: np.ndarray, pool: int) -> np.ndarray:
    lead = x.shape[:-3]
    nh, nw, c = x.shape[-3] // pool, x.shape[-2] // pool, x.shape[-1]
    cropped = x[..., :nh * pool, :nw * pool, :]
    blocks = cropped.reshape(lead + (nh, pool, nw, pool, c))
    # (..., nh, nw, c, pool*pool)
    order = tuple(range(len(lead))) + tuple(len(lead) + a for a in (0, 2, 4, 1, 3))
    return blocks.transpose(order).reshape(lead + (nh, nw, c, pool * pool))


def maxpool2d_forward(x: np.ndarray, pool: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    if x.shape[-3] < pool or x.shape[-2] < pool:
        raise ExtentTooSmall(f"cannot pool {x.shape[-3]}x{x.shape[-2]} with window {pool}")
    windows = _pool2d_windows(x, pool)
    routing = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, routing[..., None], axis=-1)[..., 0]
    return out, routing


def maxpool2d_backward(input_shape, routing: np.ndarray, grad_out: np.ndarray, pool: int = 2) -> np.ndarray:
    lead = grad_out.shape[:-3]
    nh, nw, c = grad_out.shape[-3:]
    windows = np.zeros(lead + (nh, nw, c, pool * pool), dtype=grad_out.dtype)
    np.put_along_axis(windows, routing[..., None], grad_out[..., None], axis=-1)
    blocks = windows.reshape(lead + (nh, nw, c, pool, pool))
    order = tuple(range(len(lead))) + tuple(len(lead) + a for a in (0, 3, 1, 4, 2))
    grad_x = np.zeros(input_shape, dtype=grad_out.dtype)
    grad_x[..., :nh * pool, :nw * pool, :] = blocks.transpose(order).reshape(lead + (nh * pool, nw * pool, c))
    return grad_x


def upsample_nearest_forward(x: np.ndarray, factor: int = 2) -> np.ndarray:
    return x.repeat(factor, axis=-3).repeat(factor, axis=-2)


def upsample_nearest_backward(grad_out: np.ndarray, factor: int = 2) -> np.ndarray:
    lead = grad_out.shape[:-3]
    h, w, c = grad_out.shape[-3] // factor, grad_out.shape[-2] // factor, grad_out.shape[-1]
    blocks = grad_out.reshape(lead + (h, factor, w, factor, c))
    return blocks.sum(axis=(-4, -2))


def concat_forward(inputs: List[np.ndarray]) -> np.ndarray:
    spatial = {a.shape[:-1] for a in inputs}
    if len(spatial) != 1:
        raise ShapeMismatch(f"concat inputs disagree outside the channel axis: {sorted(spatial)}")
    return np.concatenate(inputs, axis=-1)


def concat_backward(sizes: List[int], grad_out: np.ndarray) -> List[np.ndarray]:
    return np.split(grad_out, np.cumsum(sizes)[:-1], axis=-1)


# ---------------------------------------------------------------------------
# Pointwise, dense and output layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weights.shape[0]:
        raise ShapeMismatch(f"dense expects {weights.shape[0]} features, got {x.shape[-1]}")
    return x @ weights + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    x_flat = x.reshape(-1, x.shape[-1])
    grad_flat = grad_out.reshape(-1, grad_out.shape[-1])
    return grad_out @ weights.T, x_flat.T @ grad_flat, grad_flat.sum(axis=0)


def softmax_forward(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return probs * (grad_out - (grad_out * probs).sum(axis=-1, keepdims=True))


def dense_softmax_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Dense layer followed by a numerically stable softmax."""
    return softmax_forward(dense_forward(x, weights, bias))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _check_target(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if probs.shape[:-1] != target.shape:
        raise ShapeMismatch(
            f"predictions {probs.shape} do not match targets {target.shape}"
        )
    return target.astype(np.intp, copy=False)


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean of -log p[target] over every sample or pixel, with p floored at 1e-12."""
    target = _check_target(probs, target)
    picked = np.take_along_axis(probs, target[..., None], axis=-1)[..., 0]
    return float(-np.log(np.maximum(picked, Constants.PROBABILITY_FLOOR)).mean())


def cross_entropy_logits_grad(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. the softmax input: (p - onehot) / count."""
    target = _check_target(probs, target)
    grad = probs.astype(np.float64, copy=True)
    np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
    return grad / max(target.size, 1)
