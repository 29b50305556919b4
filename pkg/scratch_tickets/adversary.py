"""Adversarial example generation.

FGSM, FGSM-RS and PGD are one projected sign-gradient loop differing only in
their AttackConfig (step count, step size, random start). L2-PGD takes
normalized gradient steps and projects radially onto the epsilon ball.
"""
import logging
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .config import AttackConfig, Norm
from .functional import cross_entropy, ensemble_log_probs, log_softmax, nll_loss
from .nets import Classifier
from .prng import Prng
from .tensor import Tensor, no_grad
from .util import per_sample_norm

_LOGGER = logging.getLogger(__name__)

GradientFn = Callable[[np.ndarray], np.ndarray]

_BOUNDS_TOLERANCE = 1e-9


class AttackError(ValueError):
    pass


def _check_labels(logits: Tensor, y: np.ndarray) -> None:
    classes = logits.shape[1]
    if len(y) and (y.min() < 0 or y.max() >= classes):
        raise AttackError(f"Labels must lie in [0, {classes}), got range [{y.min()}, {y.max()}]")


def input_gradient(model: Classifier, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d CE(model(x), y) / dx."""
    inputs = Tensor(x, requires_grad=True)
    logits = model(inputs)
    _check_labels(logits, y)
    cross_entropy(logits, y).backward()
    return inputs.grad


def expected_input_gradient(tickets: Sequence[Classifier], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean over tickets of each ticket's input gradient."""
    grads = [input_gradient(ticket, x, y) for ticket in tickets]
    return np.mean(np.stack(grads), axis=0)


def ensemble_input_gradient(tickets: Sequence[Classifier], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Input gradient of the CE of the tickets' averaged class probabilities."""
    inputs = Tensor(x, requires_grad=True)
    members = []
    for ticket in tickets:
        logits = ticket(inputs)
        _check_labels(logits, y)
        members.append(log_softmax(logits))

    nll_loss(ensemble_log_probs(members), y).backward()
    return inputs.grad


def ensemble_probabilities(tickets: Sequence[Classifier], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the tickets' softmax outputs."""
    if not tickets:
        raise AttackError("Ensemble needs at least one ticket")

    with no_grad():
        probs = [softmax(ticket(Tensor(x)).data, axis=1) for ticket in tickets]
    return np.mean(np.stack(probs), axis=0)


# -----------------------------------------------------------------------------


def random_start(
    x: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng],
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Initial perturbation: zero, or uniform in the epsilon ball.

    With `indices`, sample i draws from prng.split(indices[i]) so the start
    does not depend on how inputs are batched.
    """
    if not cfg.random_start:
        return np.zeros_like(x)

    if prng is None:
        raise AttackError(f"{cfg.label} uses a random start and needs a Prng")

    if indices is None:
        noise = _start_noise(cfg, prng, x.shape)
    else:
        noise = np.stack([_start_noise(cfg, prng.split(int(i)), x.shape[1:]) for i in indices])

    delta = noise.astype(x.dtype, copy=False)
    return np.clip(x + delta, *cfg.bounds) - x


def _start_noise(cfg: AttackConfig, prng: Prng, shape) -> np.ndarray:
    if cfg.norm == Norm.LINF:
        return prng.uniform(-cfg.epsilon, cfg.epsilon, shape)

    direction = prng.normal(1.0, shape)
    length = np.sqrt((direction * direction).sum())
    radius = cfg.epsilon * prng.uniform(0.0, 1.0, ())
    return direction * (radius / length) if length > 0 else np.zeros(shape)


def project(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Map delta back into the epsilon ball of cfg.norm."""
    if cfg.norm == Norm.LINF:
        return np.clip(delta, -cfg.epsilon, cfg.epsilon)

    norms = per_sample_norm(delta)
    factor = np.minimum(1.0, np.divide(cfg.epsilon, norms, out=np.ones_like(norms), where=norms > 0))
    return delta * factor


def step(delta: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """One ascent step; sign(0) = 0 and zero gradients leave delta unchanged."""
    if cfg.norm == Norm.LINF:
        return delta + cfg.alpha * np.sign(grad)

    norms = per_sample_norm(grad)
    direction = np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
    return delta + cfg.alpha * direction


def _run(
    gradient_fn: GradientFn,
    x: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng],
    indices: Optional[Sequence[int]],
) -> np.ndarray:
    x = np.asarray(x)
    lo, hi = cfg.bounds
    if x.size and (x.min() < lo - _BOUNDS_TOLERANCE or x.max() > hi + _BOUNDS_TOLERANCE):
        raise AttackError(f"Inputs outside bounds [{lo}, {hi}]: [{x.min()}, {x.max()}]")

    delta = random_start(x, cfg, prng, indices)
    for _ in range(cfg.steps):
        grad = gradient_fn(x + delta)
        delta = project(step(delta, grad, cfg), cfg)
        delta = np.clip(x + delta, lo, hi) - x

    return np.clip(x + delta, lo, hi)


def perturb(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng] = None,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Adversarial version of x against one model."""
    y = np.asarray(y)
    return _run(lambda inputs: input_gradient(model, inputs, y), x, cfg, prng, indices)


def eot_perturb(
    tickets: Sequence[Classifier],
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng] = None,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Every step follows the expectation of the tickets' input gradients."""
    if not tickets:
        raise AttackError("EOT attack needs at least one ticket")

    y = np.asarray(y)
    return _run(lambda inputs: expected_input_gradient(tickets, inputs, y), x, cfg, prng, indices)


def ensemble_perturb(
    tickets: Sequence[Classifier],
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng] = None,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Attack the composite model whose prediction averages the tickets' probabilities."""
    if not tickets:
        raise AttackError("Ensemble attack needs at least one ticket")

    y = np.asarray(y)
    return _run(lambda inputs: ensemble_input_gradient(tickets, inputs, y), x, cfg, prng, indices)


def adversarial_loss(
    model: Classifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    prng: Optional[Prng] = None,
) -> float:
    """Mean cross-entropy of model on its own adversarial examples."""
    x_adv = perturb(model, x, y, cfg, prng)
    with no_grad():
        return cross_entropy(model(Tensor(x_adv)), np.asarray(y)).item()
