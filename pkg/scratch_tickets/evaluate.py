"""Natural/robust accuracy, transferability matrices and the feature-distance probe."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adversary import perturb
from .config import AttackConfig
from .datasets import Split
from .nets import Network
from .prng import Prng
from .tensor import no_grad
from .util import batch_slices

_LOGGER = logging.getLogger(__name__)

FEATURE_EPS = 1e-12


@dataclass
class EvalReport:
    model: str
    natural_acc: float
    robust_acc: Optional[float]
    """None when no attack was run"""

    samples: int
    attack: Optional[AttackConfig] = None
    attack_source: str = ""
    """Model (or ticket set) the adversarial examples were generated against"""

    def __post_init__(self):
        for value in (self.natural_acc, self.robust_acc):
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"Accuracy outside [0, 1]: {value}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "natural_acc": self.natural_acc,
            "robust_acc": self.robust_acc,
            "samples": self.samples,
            "attack": None if self.attack is None else self.attack.to_dict(),
            "attack_source": self.attack_source,
        }


def _check_split(split: Split) -> None:
    if len(split) == 0:
        raise ValueError("Cannot evaluate on an empty split")


def _predict(network: Network, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return network.forward(x, train=False).data.argmax(axis=1)


def _count_correct(
    network: Network,
    split: Split,
    attack_cfg: Optional[AttackConfig],
    prng: Optional[Prng],
    batch_size: int,
    start: int,
    stop: int,
) -> Tuple[int, int]:
    natural = robust = 0
    classifier = network.classifier()
    for batch_start, batch_stop in batch_slices(stop - start, batch_size):
        lo, hi = start + batch_start, start + batch_stop
        x, y = split.x[lo:hi], split.y[lo:hi]
        natural += int((_predict(network, x) == y).sum())
        if attack_cfg is not None:
            x_adv = perturb(classifier, x, y, attack_cfg, prng, indices=range(lo, hi))
            robust += int((_predict(network, x_adv) == y).sum())

    return natural, robust


def evaluate(
    model: Network,
    split: Split,
    attack_cfg: Optional[AttackConfig] = None,
    prng: Optional[Prng] = None,
    batch_size: int = 256,
    jobs: int = 1,
    name: str = "",
) -> EvalReport:
    """Top-1 accuracy on clean inputs and on perturb(model, .) outputs.

    Random starts draw from prng.split(input index), and shards split at
    batch boundaries, so any `jobs` value gives the same numbers.
    """
    _check_split(split)
    total = len(split)
    batches = list(batch_slices(total, batch_size))
    shard_count = max(1, min(jobs, len(batches)))
    bounds = [batches[i][0] for i in np.linspace(0, len(batches), shard_count + 1, dtype=int)[:-1]]
    shards = list(zip(bounds, bounds[1:] + [total]))

    def run(shard: Tuple[int, int]) -> Tuple[int, int]:
        return _count_correct(model, split, attack_cfg, prng, batch_size, *shard)

    if shard_count == 1:
        counts = [run(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=shard_count) as executor:
            counts = list(executor.map(run, shards))

    natural = sum(count[0] for count in counts)
    robust = sum(count[1] for count in counts)
    report = EvalReport(
        name,
        natural / total,
        None if attack_cfg is None else robust / total,
        total,
        attack_cfg,
        name,
    )
    _LOGGER.info(
        "%s natural=%.4f robust=%s (%s, n=%s)",
        name or "model",
        report.natural_acc,
        "-" if report.robust_acc is None else f"{report.robust_acc:.4f}",
        "clean" if attack_cfg is None else attack_cfg.label,
        total,
    )
    return report


def adversarial_examples(
    model: Network,
    split: Split,
    attack_cfg: AttackConfig,
    prng: Optional[Prng] = None,
    batch_size: int = 256,
) -> np.ndarray:
    classifier = model.classifier()
    batches = [
        perturb(classifier, split.x[start:stop], split.y[start:stop], attack_cfg, prng, indices=range(start, stop))
        for start, stop in batch_slices(len(split), batch_size)
    ]
    return np.concatenate(batches)


def correct_mask(model: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-input correctness of `model` on `x`."""
    return model.predict(x, batch_size) == y


def transfer_matrix(
    tickets: Sequence[Network],
    split: Split,
    attack_cfg: AttackConfig,
    prng: Optional[Prng] = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Entry (i, j): accuracy of ticket j on examples crafted against ticket i."""
    if len(tickets) < 2:
        raise ValueError(f"Transfer matrix needs at least 2 tickets, got {len(tickets)}")
    _check_split(split)

    matrix = np.zeros((len(tickets), len(tickets)))
    for i, source in enumerate(tickets):
        x_adv = adversarial_examples(source, split, attack_cfg, prng, batch_size)
        for j, target in enumerate(tickets):
            matrix[i, j] = correct_mask(target, x_adv, split.y, batch_size).mean()

    _LOGGER.info("Transfer matrix (%s):\n%s", attack_cfg.label, np.array2string(matrix, precision=4))
    return matrix


# -----------------------------------------------------------------------------


def _features(model: Network, x: np.ndarray) -> np.ndarray:
    with no_grad():
        model.forward(x, train=False, keep_features=True)

    if model.features is None:
        raise ValueError(f"{model.spec.arch} has no convolutional feature map to probe")
    return model.features.data.reshape(len(x), -1)


def feature_distance(
    model: Network,
    split: Split,
    epsilon: float,
    prng: Prng,
    batch_size: int = 256,
    bounds: Tuple[float, float] = (0.0, 1.0),
) -> float:
    """Mean of ||F(x + eta) - F(x)|| / (||F(x)|| + 1e-12), eta ~ U[-eps, eps].

    F is the flattened activation after the last convolution; noisy inputs
    are clipped into `bounds`.
    """
    _check_split(split)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")

    distances: List[np.ndarray] = []
    for start, stop in batch_slices(len(split), batch_size):
        x = split.x[start:stop]
        noise = np.stack([prng.split(index).uniform(-epsilon, epsilon, x.shape[1:]) for index in range(start, stop)])
        noisy = np.clip(x + noise.astype(x.dtype), *bounds)

        clean_features = _features(model, x)
        noisy_features = _features(model, noisy)
        gap = np.linalg.norm(noisy_features - clean_features, axis=1)
        distances.append(gap / (np.linalg.norm(clean_features, axis=1) + FEATURE_EPS))

    distance = float(np.mean(np.concatenate(distances)))
    _LOGGER.info("Feature distance at eps=%s: %.6f", epsilon, distance)
    return distance
