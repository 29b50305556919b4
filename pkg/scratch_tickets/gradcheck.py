"""Central finite-difference gradient checks."""
from typing import Callable, List, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int, step: float = 1e-4
) -> np.ndarray:
    """d fn / d inputs[index] by central differences; fn must return a scalar Tensor."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = original - step
        lower = fn(*[Tensor(a) for a in arrays]).item()
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2.0 * step)

    return grad


def analytic_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    fn(*tensors).backward()
    return [t.grad for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation relative to the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], step: float = 1e-4
) -> float:
    """Worst relative error over all inputs of fn."""
    analytic = analytic_gradients(fn, inputs)
    worst = 0.0
    for index, grad in enumerate(analytic):
        numeric = numerical_gradient(fn, inputs, index, step=step)
        worst = max(worst, relative_error(grad, numeric))

    return worst
