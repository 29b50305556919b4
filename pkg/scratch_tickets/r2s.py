"""Random ticket switch: per-input sampling of one ticket from a candidate set.

All candidates share one frozen weight tensor (an InitSpec, or the dense
payload of an RTT source) and differ only in their masks.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .adversary import ensemble_perturb, eot_perturb, perturb
from .checkpoint import TicketCheckpoint
from .config import AttackConfig
from .datasets import Split
from .evaluate import EvalReport, adversarial_examples, correct_mask, transfer_matrix
from .file_hash import get_array_hash
from .nets import Network
from .prng import Prng
from .tensor import get_default_dtype
from .util import batch_slices

_LOGGER = logging.getLogger(__name__)

ADAPTIVE = ("none", "eot", "ensemble")

_SUM_TOLERANCE = 1e-9


class PolicyError(ValueError):
    pass


@dataclass
class R2SPolicy:
    candidates: List[TicketCheckpoint]
    probs: Optional[np.ndarray] = None
    """Sampling distribution over candidates; uniform when omitted"""

    per_batch: bool = False
    dtype: type = field(default_factory=get_default_dtype)

    def __post_init__(self):
        if not self.candidates:
            raise PolicyError("R2S needs at least one candidate ticket")

        count = len(self.candidates)
        if self.probs is None:
            self.probs = np.full(count, 1.0 / count)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (count,):
            raise PolicyError(f"{count} candidates but {self.probs.size} probabilities")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > _SUM_TOLERANCE:
            raise PolicyError(f"Probabilities must be non-negative and sum to 1, got {self.probs.tolist()}")

        first = self.candidates[0]
        for ticket in self.candidates[1:]:
            if ticket.spec_id != first.spec_id:
                raise PolicyError(f"Candidates mix networks {first.spec_id} and {ticket.spec_id}")
            if (ticket.weights is None) != (first.weights is None):
                raise PolicyError("Candidates mix InitSpec and weight-payload tickets")
            if first.weights is None and ticket.init != first.init:
                raise PolicyError(f"Candidates mix frozen weights {first.init} and {ticket.init}")

        if first.weights is not None:
            digests = {get_array_hash(ticket.weights) for ticket in self.candidates}
            if len(digests) != 1:
                raise PolicyError("Candidates do not share one weight payload")

        self._networks: Optional[List[Network]] = None

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def label(self) -> str:
        ratios = ",".join(f"{ticket.ratio:g}" for ticket in self.candidates)
        return f"r2s[{ratios}]"

    def networks(self) -> List[Network]:
        """One fixed-mask network per candidate over a single shared weight dict."""
        if self._networks is None:
            shared = self.candidates[0].frozen_weights(self.dtype)
            self._networks = [ticket.to_network(self.dtype, weights=shared) for ticket in self.candidates]
        return self._networks


def sample_tickets(policy: R2SPolicy, prng: Prng, indices: Sequence[int]) -> np.ndarray:
    """Candidate index per input; input i draws from prng.split(i).

    With per-batch switching the whole batch shares the first input's draw.
    """
    indices = list(indices)
    if not indices:
        return np.zeros(0, dtype=np.int64)

    if policy.per_batch:
        choice = prng.split(int(indices[0])).choice(len(policy), policy.probs)
        return np.full(len(indices), choice, dtype=np.int64)

    return np.array([prng.split(int(i)).choice(len(policy), policy.probs) for i in indices], dtype=np.int64)


def _route(choices: np.ndarray, count: int) -> Dict[int, np.ndarray]:
    return {ticket: np.flatnonzero(choices == ticket) for ticket in range(count) if np.any(choices == ticket)}


def r2s_predict(
    policy: R2SPolicy,
    x: np.ndarray,
    prng: Prng,
    indices: Optional[Sequence[int]] = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Each input is classified by one sampled candidate."""
    indices = list(range(len(x)) if indices is None else indices)

    networks = policy.networks()
    predictions = np.zeros(len(x), dtype=np.int64)
    for start, stop in batch_slices(len(x), batch_size):
        choices = sample_tickets(policy, prng, indices[start:stop])
        for ticket, rows in _route(choices, len(policy)).items():
            predictions[start + rows] = networks[ticket].predict(x[start + rows], batch_size)

    return predictions


def _attack_sampled(
    policy: R2SPolicy,
    split: Split,
    attack_cfg: AttackConfig,
    prng: Prng,
    batch_size: int,
) -> np.ndarray:
    """Adversarial inputs, each crafted against an independently sampled ticket."""
    networks = policy.networks()
    classifiers = [network.classifier() for network in networks]
    x_adv = np.array(split.x)
    for start, stop in batch_slices(len(split), batch_size):
        choices = sample_tickets(policy, prng.split("attacker"), range(start, stop))
        for ticket, rows in _route(choices, len(policy)).items():
            positions = start + rows
            x_adv[positions] = perturb(
                classifiers[ticket],
                split.x[positions],
                split.y[positions],
                attack_cfg,
                prng.split("start"),
                indices=positions,
            )
    return x_adv


def _attack_adaptive(
    policy: R2SPolicy,
    split: Split,
    attack_cfg: AttackConfig,
    adaptive: str,
    prng: Prng,
    batch_size: int,
) -> np.ndarray:
    classifiers = [network.classifier() for network in policy.networks()]
    attack = eot_perturb if adaptive == "eot" else ensemble_perturb
    batches = [
        attack(
            classifiers,
            split.x[start:stop],
            split.y[start:stop],
            attack_cfg,
            prng.split("start"),
            indices=range(start, stop),
        )
        for start, stop in batch_slices(len(split), batch_size)
    ]
    return np.concatenate(batches)


def _expected_accuracy(policy: R2SPolicy, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    """Accuracy averaged over the defender's distribution."""
    per_ticket = [correct_mask(network, x, y, batch_size).mean() for network in policy.networks()]
    return float(np.dot(policy.probs, per_ticket))


def r2s_evaluate(
    policy: R2SPolicy,
    split: Split,
    attack_cfg: AttackConfig,
    adaptive: str = "none",
    prng: Optional[Prng] = None,
    mode: str = "sampled",
    batch_size: int = 256,
) -> EvalReport:
    """Robust accuracy of the switch.

    adaptive=none: the attacker targets an independently sampled ticket per
    input. eot/ensemble: the attacker uses the whole candidate set. mode
    "sampled" draws the defender's ticket per input; "exact" replaces every
    draw by its expectation under the policy distribution.
    """
    if adaptive not in ADAPTIVE:
        raise PolicyError(f"Unknown adaptive attack '{adaptive}'. Choices: {list(ADAPTIVE)}")
    if mode not in ("sampled", "exact"):
        raise PolicyError(f"Unknown R2S mode '{mode}'")
    if len(split) == 0:
        raise ValueError("Cannot evaluate on an empty split")

    prng = prng or Prng(0)
    if mode == "exact":
        natural = _expected_accuracy(policy, split.x, split.y, batch_size)
        if adaptive == "none":
            matrix = _matched_grid(policy, split, attack_cfg, prng.split("start"), batch_size)
            robust = float(policy.probs @ matrix @ policy.probs)
        else:
            x_adv = _attack_adaptive(policy, split, attack_cfg, adaptive, prng, batch_size)
            robust = _expected_accuracy(policy, x_adv, split.y, batch_size)
    else:
        defender = prng.split("defender")
        natural = float(np.mean(r2s_predict(policy, split.x, defender, batch_size=batch_size) == split.y))
        if adaptive == "none":
            x_adv = _attack_sampled(policy, split, attack_cfg, prng, batch_size)
        else:
            x_adv = _attack_adaptive(policy, split, attack_cfg, adaptive, prng, batch_size)
        robust = float(np.mean(r2s_predict(policy, x_adv, defender.split("adv"), batch_size=batch_size) == split.y))

    report = EvalReport(policy.label, natural, robust, len(split), attack_cfg, f"{adaptive}/{mode}")
    _LOGGER.info(
        "%s %s %s natural=%.4f robust=%.4f", policy.label, attack_cfg.label, report.attack_source, natural, robust
    )
    return report


def _matched_grid(
    policy: R2SPolicy, split: Split, attack_cfg: AttackConfig, prng: Prng, batch_size: int
) -> np.ndarray:
    networks = policy.networks()
    if len(networks) == 1:
        x_adv = adversarial_examples(networks[0], split, attack_cfg, prng, batch_size)
        return np.array([[correct_mask(networks[0], x_adv, split.y, batch_size).mean()]])
    return transfer_matrix(networks, split, attack_cfg, prng, batch_size)


def r2s_overhead(policy: R2SPolicy) -> Dict[str, float]:
    """Mask storage of the candidate set against the dense weights it rides on."""
    weights = policy.candidates[0].frozen_weights(policy.dtype)
    dense_bytes = sum(array.nbytes for array in weights.values())
    per_ticket = [
        sum((mask.size + 7) // 8 for mask in ticket.masks.values()) for ticket in policy.candidates
    ]
    bitset_bytes = sum(per_ticket)
    return {
        "tickets": len(policy),
        "bitset_bytes": bitset_bytes,
        "dense_bytes": dense_bytes,
        "ratio": bitset_bytes / dense_bytes,
        "max_ticket_ratio": max(per_ticket) / dense_bytes,
    }
