"""Numeric kernels for the CNN engine.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 laid out as
NCHW for feature maps and OIHW for convolution weights.  Every kernel here
is a pure function of its arguments.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a kernel's contract."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def _pad_amount(kernel: int, padding: str) -> int:
    if padding == "same":
        if kernel % 2 != 1:
            raise ShapeError(f"SAME padding needs an odd kernel size, got {kernel}")
        return kernel // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding mode {padding!r} (expected 'same' or 'valid')")


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NCHW (4-D), got rank {x.ndim}")
    if w.ndim != 4:
        raise ShapeError(f"conv weights must be OIHW (4-D), got rank {w.ndim}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has C={x.shape[1]} but weights expect I={w.shape[1]}"
        )
    kh, kw = w.shape[2:]
    if x.shape[2] + 2 * pad < kh:
        raise ShapeError(f"kernel height {kh} does not fit input height {x.shape[2]}")
    if x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"kernel width {kw} does not fit input width {x.shape[3]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Unfold a padded NCHW array into rows of (C*kh*kw) patches, one per output site."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N C Ho Wo kh kw
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = xp.shape[0]
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(xp, kh, kw)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def conv2d_forward(x, w, b, padding: str = "same") -> np.ndarray:
    """Stride-1 cross-correlation of an NCHW batch with OIHW kernels."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    pad = _pad_amount(w.shape[2], padding) if w.ndim == 4 else 0
    _check_conv_shapes(x, w, b, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = _correlate(xp, w)
    if b is not None:
        out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out, x, w, padding: str = "same", need_input_grad: bool = True):
    """Adjoint of :func:`conv2d_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false.
    """
    grad_out, x, w = as_tensor(grad_out), as_tensor(x), as_tensor(w)
    o, c, kh, kw = w.shape
    pad = _pad_amount(kh, padding)
    _check_conv_shapes(x, w, None, pad)
    expected = (x.shape[0], o, x.shape[2] + 2 * pad - kh + 1, x.shape[3] + 2 * pad - kw + 1)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, _, _ = _im2col(xp, kh, kw)
    go = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (go.T @ cols).reshape(o, c, kh, kw)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=DTYPE)

    grad_x = None
    if need_input_grad:
        # full correlation with the spatially flipped, channel-transposed kernel
        fpad_h, fpad_w = kh - 1 - pad, kw - 1 - pad
        gp = np.pad(grad_out, ((0, 0), (0, 0), (fpad_h, fpad_h), (fpad_w, fpad_w)))
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        grad_x = np.ascontiguousarray(_correlate(gp, w_flip))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


def maxpool2x2_forward(x):
    """2x2 / stride-2 max pooling.

    Returns ``(output, argmax)`` where ``argmax`` holds, for every output
    cell, the flat index into the input's H*W plane of the winning element.
    Ties go to the first element in row-major scan order of the window.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool input must be NCHW, got rank {x.ndim}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(h // 2)[:, None] * 2 + local // 2
    cols = np.arange(w // 2)[None, :] * 2 + local % 2
    return np.ascontiguousarray(out), rows * w + cols


def maxpool2x2_backward(grad_out, argmax) -> np.ndarray:
    grad_out = as_tensor(grad_out)
    argmax = np.asarray(argmax)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"argmax shape {argmax.shape} does not match grad_out shape {grad_out.shape}")
    n, c, ho, wo = grad_out.shape
    grad_in = np.zeros((n, c, 4 * ho * wo), dtype=DTYPE)
    np.put_along_axis(grad_in, argmax.reshape(n, c, -1), grad_out.reshape(n, c, -1), axis=2)
    return grad_in.reshape(n, c, 2 * ho, 2 * wo)


def dense_forward(x, w, b) -> np.ndarray:
    """Affine map on flattened inputs; ``w`` is (out_features, in_features)."""
    x, w = as_tensor(x), as_tensor(w)
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ShapeError(f"dense expects {w.shape[1]} input features, got {flat.shape[1]}")
    out = flat @ w.T
    if b is not None:
        out += as_tensor(b)
    return out


def dense_backward(grad_out, x, w, need_input_grad: bool = True):
    grad_out, x, w = as_tensor(grad_out), as_tensor(x), as_tensor(w)
    flat = x.reshape(x.shape[0], -1)
    if grad_out.shape != (flat.shape[0], w.shape[0]):
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match {(flat.shape[0], w.shape[0])}")
    grad_w = grad_out.T @ flat
    grad_b = grad_out.sum(axis=0, dtype=DTYPE)
    grad_x = (grad_out @ w).reshape(x.shape) if need_input_grad else None
    return grad_x, grad_w, grad_b


def relu_forward(z) -> np.ndarray:
    return np.maximum(as_tensor(z), DTYPE(0))


def relu_backward(grad_out, z) -> np.ndarray:
    return np.where(np.asarray(z) > 0, grad_out, DTYPE(0)).astype(DTYPE)


def softmax(logits) -> np.ndarray:
    logits = as_tensor(logits)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = float(-log_p.mean())
    grad = np.exp(shifted - log_z[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(DTYPE)


def percentile(values, q: float, axis: int | None = None):
    """Linear-interpolation percentile (closest-ranks convention).

    Sorts ascending and interpolates at index ``(n - 1) * q / 100``; q=0 is
    the minimum and q=100 the maximum.  With ``axis`` the reduction runs
    along that axis and the result keeps the remaining dimensions.
    """
    if not 0 <= q <= 100:
        raise ValueError(f"percentile q must lie in [0, 100], got {q}")
    arr = np.asarray(values)
    if axis is None:
        arr = arr.reshape(-1)
        axis = 0
    if arr.shape[axis] == 0:
        raise ValueError("percentile of an empty array")
    arr = np.sort(np.moveaxis(arr, axis, -1), axis=-1)
    n = arr.shape[-1]
    pos = (n - 1) * (q / 100.0)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    lo_v = arr[..., lo]
    if frac == 0:
        result = lo_v
    else:
        result = lo_v + (arr[..., hi] - lo_v) * frac
    return result[()] if np.ndim(result) == 0 else result
