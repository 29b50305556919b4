"""Score-driven top-k masks with straight-through gradients."""
import logging
import math
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, are_parameters_frozen, record

_LOGGER = logging.getLogger(__name__)


class MaskError(ValueError):
    pass


class Pattern(str, Enum):
    ELEMENT = "element"
    ROW = "row"
    KERNEL = "kernel"
    CHANNEL = "channel"


def group_shape(pattern: Pattern, weight_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Shape of the score tensor: one score per structural group.

    Conv filters (F x C x KH x KW): Row -> F x C x KH x 1, Kernel -> F x C x 1 x 1,
    Channel -> F x 1 x 1 x 1. Linear weights (out x in) have no kernel or
    channel structure, so every structured pattern masks whole output rows.
    """
    pattern = Pattern(pattern)
    if pattern == Pattern.ELEMENT:
        return tuple(weight_shape)

    if len(weight_shape) == 2:
        return (weight_shape[0], 1)

    if len(weight_shape) != 4:
        raise MaskError(f"Cannot group weight of shape {weight_shape}")

    out_c, in_c, kh, _kw = weight_shape
    if pattern == Pattern.ROW:
        return (out_c, in_c, kh, 1)

    if pattern == Pattern.KERNEL:
        return (out_c, in_c, 1, 1)

    return (out_c, 1, 1, 1)


def keep_count(ratio: float, groups: int) -> int:
    """k = round(ratio * groups) with halves rounded up, floored at 1."""
    if not (0.0 < ratio <= 1.0):
        raise MaskError(f"Remaining ratio must lie in (0, 1], got {ratio}")

    if groups < 1:
        raise MaskError(f"Need at least one mask group, got {groups}")

    return min(groups, max(1, int(math.floor(ratio * groups + 0.5))))


def binarize_topk(
    scores: np.ndarray,
    ratio: float,
    pattern: Pattern = Pattern.ELEMENT,
    weight_shape: Optional[Tuple[int, ...]] = None,
) -> np.ndarray:
    """Ones at the k largest scores; ties go to the lowest flat index."""
    scores = np.asarray(scores)
    if weight_shape is not None and scores.shape != group_shape(pattern, weight_shape):
        raise MaskError(
            f"{Pattern(pattern).value} scores for weight {tuple(weight_shape)} must have "
            f"shape {group_shape(pattern, weight_shape)}, got {scores.shape}"
        )

    if not np.all(np.isfinite(scores)):
        raise MaskError("Scores contain non-finite values")

    k = keep_count(ratio, scores.size)
    order = np.argsort(-scores.reshape(-1), kind="stable")
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(scores.shape)


def expand_mask(mask: np.ndarray, weight_shape: Tuple[int, ...]) -> np.ndarray:
    """Broadcast each group bit over its group."""
    return np.broadcast_to(mask, weight_shape)


def _group_sum(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def masked_weight(theta: Tensor, scores: Tensor, mask: np.ndarray) -> Tensor:
    """Effective weight m_hat * theta with a straight-through backward.

    The binarization is treated as the identity, so every score receives
    (dL/dW_eff * theta) summed over its group, including scores whose bit is
    currently zero. Theta, when trainable, receives dL/dW_eff * m_hat.
    """
    full_mask = expand_mask(mask, theta.shape).astype(theta.dtype)
    effective = theta.data * full_mask

    def backward(g: np.ndarray):
        score_grad = None
        theta_grad = None
        if scores.requires_grad:
            score_grad = _group_sum(g * theta.data, scores.shape)
        if theta.requires_grad:
            theta_grad = g * full_mask
        return theta_grad, score_grad

    return record(effective, (theta, scores), backward, "masked_weight")


class MaskedParameter:
    """Frozen weights, learnable scores and the cached top-k mask.

    The mask is recomputed from the scores on every `effective()` call unless
    it has been fixed (fine-tuning, evaluation of a stored ticket), in which
    case the scores are ignored.
    """

    def __init__(
        self,
        theta: np.ndarray,
        scores: np.ndarray,
        pattern: Pattern,
        ratio: float,
        fixed_mask: Optional[np.ndarray] = None,
    ):
        self.pattern = Pattern(pattern)
        self.ratio = float(ratio)
        self.theta = Tensor(theta)
        expected = group_shape(self.pattern, self.theta.shape)
        if scores.shape != expected:
            raise MaskError(f"Scores shape {scores.shape} != group shape {expected}")

        if len(self.theta.shape) == 2 and self.pattern in (Pattern.KERNEL, Pattern.CHANNEL):
            _LOGGER.debug("%s pattern degrades to row masking on a linear layer", self.pattern.value)

        self.scores = Tensor(np.array(scores, dtype=self.theta.dtype))
        keep_count(self.ratio, self.scores.size)
        self.fixed_mask = None if fixed_mask is None else np.asarray(fixed_mask, dtype=bool)
        if self.fixed_mask is not None and self.fixed_mask.shape != expected:
            raise ShapeError("MaskedParameter", self.fixed_mask.shape, expected)

        self.mask: np.ndarray = self.current_mask()

    @property
    def group_count(self) -> int:
        return self.scores.size

    @property
    def k(self) -> int:
        return int(self.mask.sum())

    def current_mask(self) -> np.ndarray:
        if self.fixed_mask is not None:
            return self.fixed_mask

        return binarize_topk(self.scores.data, self.ratio, self.pattern, self.theta.shape)

    def fix_mask(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.scores.shape:
            raise ShapeError("fix_mask", mask.shape, self.scores.shape)
        self.fixed_mask = mask
        self.mask = mask

    def effective(self) -> Tensor:
        if are_parameters_frozen():
            mask = self.current_mask()
            return Tensor(self.theta.data * expand_mask(mask, self.theta.shape))

        self.mask = self.current_mask()
        return masked_weight(self.theta, self.scores, self.mask)

    def effective_array(self) -> np.ndarray:
        return self.theta.data * expand_mask(self.mask, self.theta.shape)
