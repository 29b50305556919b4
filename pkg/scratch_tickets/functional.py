"""Neural-network primitives on top of Tensor."""
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax as _log_softmax
from scipy.special import logsumexp

from .tensor import ShapeError, Tensor, matmul, record, reshape

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial extent after a sliding window: floor((size + 2p - k) / s) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _check_window(op: str, shape: Tuple[int, ...], kernel: int, stride: int, padding: int):
    if len(shape) != 4:
        raise ShapeError(op, shape, detail="expected N x C x H x W")

    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(
            op, shape, detail=f"kernel={kernel}, stride={stride}, padding={padding}"
        )

    height, width = shape[2], shape[3]
    if (height + 2 * padding < kernel) or (width + 2 * padding < kernel):
        raise ShapeError(op, shape, detail=f"kernel {kernel} larger than padded input")


def _windows(padded: np.ndarray, kernel: Tuple[int, int], stride: int, out_hw: Tuple[int, int]):
    """N x C x OH x OW x KH x KW view of sliding windows."""
    view = sliding_window_view(padded, kernel, axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, : out_hw[0], : out_hw[1]]


def _pad(data: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return data

    return np.pad(
        data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=value,
    )


# -----------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of N x C x H x W input with F x C x KH x KW filters."""
    if weight.ndim != 4 or x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)

    kh, kw = weight.shape[2], weight.shape[3]
    if kh != kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="square kernels only")
    _check_window("conv2d", x.shape, kh, stride, padding)

    height, width = x.shape[2], x.shape[3]
    out_h = output_size(height, kh, stride, padding)
    out_w = output_size(width, kw, stride, padding)
    padded = _pad(x.data, padding)
    cols = _windows(padded, (kh, kw), stride, (out_h, out_w))

    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g: np.ndarray):
        grad_w = None
        grad_x = None
        if weight.requires_grad:
            grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))

        if x.requires_grad:
            grad_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    grad_padded[
                        :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                    ] += contrib.transpose(0, 3, 1, 2)
            grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]

        return grad_x, grad_w

    return record(out, (x, weight), backward, "conv2d")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """x @ weight.T for an out x in weight matrix."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)

    return matmul(x, transpose(weight))


def transpose(a: Tensor) -> Tensor:
    return record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    stride = kernel if stride is None else stride
    _check_window("max_pool2d", x.shape, kernel, stride, padding)
    if padding > kernel // 2:
        raise ShapeError("max_pool2d", x.shape, detail="padding exceeds half the kernel")

    height, width = x.shape[2], x.shape[3]
    out_h = output_size(height, kernel, stride, padding)
    out_w = output_size(width, kernel, stride, padding)
    padded = _pad(x.data, padding, -np.inf)
    cols = _windows(padded, (kernel, kernel), stride, (out_h, out_w))
    flat = cols.reshape(cols.shape[:4] + (kernel * kernel,))
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        grad_padded = np.zeros_like(padded)
        for i in range(kernel):
            for j in range(kernel):
                routed = g * (winner == i * kernel + j)
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += routed
        return (grad_padded[:, :, padding : padding + height, padding : padding + width],)

    return record(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts towards the window size."""
    stride = kernel if stride is None else stride
    _check_window("avg_pool2d", x.shape, kernel, stride, padding)
    if padding > kernel // 2:
        raise ShapeError("avg_pool2d", x.shape, detail="padding exceeds half the kernel")

    height, width = x.shape[2], x.shape[3]
    out_h = output_size(height, kernel, stride, padding)
    out_w = output_size(width, kernel, stride, padding)
    padded = _pad(x.data, padding)
    cols = _windows(padded, (kernel, kernel), stride, (out_h, out_w))
    area = kernel * kernel
    out = cols.sum(axis=(4, 5)) / area

    def backward(g: np.ndarray):
        grad_padded = np.zeros_like(padded)
        share = g / area
        for i in range(kernel):
            for j in range(kernel):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += share
        return (grad_padded[:, :, padding : padding + height, padding : padding + width],)

    return record(np.ascontiguousarray(out), (x,), backward, "avg_pool2d")


def batch_norm(
    x: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Non-affine batch normalization over the channel axis (axis 1).

    In training mode the current batch statistics normalize the input and,
    when `update_stats` is set, the running buffers are updated in place
    with an exponential average. In evaluation mode the running buffers are used.
    """
    if x.ndim not in (2, 4) or x.shape[1] != running_mean.shape[0]:
        raise ShapeError("batch_norm", x.shape, running_mean.shape)

    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    if not training:
        scale = 1.0 / np.sqrt(running_var + eps)
        out = (x.data - running_mean.reshape(view)) * scale.reshape(view)
        out = out.astype(x.dtype, copy=False)
        return record(out, (x,), lambda g: (g * scale.reshape(view).astype(x.dtype),), "batch_norm")

    count = x.size // x.shape[1]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x.data - mean.reshape(view)) * inv_std.reshape(view)

    if update_stats:
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    def backward(g: np.ndarray):
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * normalized).mean(axis=axes, keepdims=True)
        return ((g - g_mean - normalized * gx_mean) * inv_std.reshape(view),)

    return record(normalized, (x,), backward, "batch_norm")


# -----------------------------------------------------------------------------


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax of an N x C logit matrix."""
    if logits.ndim != 2:
        raise ShapeError("log_softmax", logits.shape, detail="expected N x C")

    out = _log_softmax(logits.data, axis=1)
    probs = np.exp(out)

    def backward(g: np.ndarray):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return record(out, (logits,), backward, "log_softmax")


def nll_loss(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the labelled classes."""
    labels = np.asarray(labels)
    if log_probs.ndim != 2 or labels.shape != (log_probs.shape[0],):
        raise ShapeError("nll_loss", log_probs.shape, labels.shape)

    batch, classes = log_probs.shape
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError("nll_loss", log_probs.shape, labels.shape, detail="label out of range")

    rows = np.arange(batch)
    out = np.asarray(-log_probs.data[rows, labels].mean())

    def backward(g: np.ndarray):
        grad = np.zeros_like(log_probs.data)
        grad[rows, labels] = -g / batch
        return (grad,)

    return record(out, (log_probs,), backward, "nll_loss")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy averaged over the batch."""
    return nll_loss(log_softmax(logits), labels)


def ensemble_log_probs(members: Sequence[Tensor]) -> Tensor:
    """Log of the arithmetic mean of the members' class probabilities.

    Every member is an N x C log-probability matrix; the result is
    log((1/n) * sum_i exp(members_i)), computed with a stable log-sum-exp.
    """
    if not members:
        raise ShapeError("ensemble_log_probs", detail="no members")

    shape = members[0].shape
    for member in members:
        if member.shape != shape:
            raise ShapeError("ensemble_log_probs", shape, member.shape)

    stacked = np.stack([m.data for m in members])
    total = logsumexp(stacked, axis=0)
    out = total - np.log(len(members))
    weights = np.exp(stacked - total[None])

    def backward(g: np.ndarray):
        return tuple(g * weights[i] for i in range(len(members)))

    return record(out.astype(stacked.dtype, copy=False), tuple(members), backward, "ensemble")
