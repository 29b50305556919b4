"""The four frozen-weight initializers and score initialization."""
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from cachetools import LRUCache, cached
from cachetools.keys import hashkey

from .masking import Pattern, group_shape
from .nets import NetworkSpec, fans
from .prng import Prng

_LOGGER = logging.getLogger(__name__)

Weights = Dict[str, np.ndarray]


class InitError(ValueError):
    pass


class InitMethod(str, Enum):
    SIGNED_KAIMING_CONSTANT = "signed_kaiming_constant"
    KAIMING_NORMAL = "kaiming_normal"
    KAIMING_UNIFORM = "kaiming_uniform"
    XAVIER_NORMAL = "xavier_normal"


@dataclass(frozen=True)
class InitSpec:
    method: InitMethod
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "method", InitMethod(self.method))
        if not (0 <= int(self.seed) < (1 << 64)):
            raise InitError(f"Seed must fit in 64 bits: {self.seed}")

    @staticmethod
    def from_dict(config: Dict) -> "InitSpec":
        return InitSpec(method=InitMethod(config["method"]), seed=int(config.get("seed", 0)))


def draw_weight(method: InitMethod, shape: Tuple[int, ...], prng: Prng) -> np.ndarray:
    """One float64 weight tensor drawn with `method`."""
    fan_in, fan_out = fans(shape)
    if fan_in <= 0:
        raise InitError(f"Zero fan-in for weight of shape {shape}")

    method = InitMethod(method)
    if method == InitMethod.SIGNED_KAIMING_CONSTANT:
        return prng.signs(shape) * np.sqrt(2.0 / fan_in)

    if method == InitMethod.KAIMING_NORMAL:
        return prng.normal(np.sqrt(2.0 / fan_in), shape)

    if method == InitMethod.KAIMING_UNIFORM:
        bound = np.sqrt(6.0 / fan_in)
        return prng.uniform(-bound, bound, shape)

    return prng.normal(np.sqrt(2.0 / (fan_in + fan_out)), shape)


def initialize(
    spec: NetworkSpec, init: InitSpec, prng: Optional[Prng] = None, dtype=np.float64
) -> Weights:
    """Frozen weights for every maskable layer.

    Each layer draws from its own child stream, so the same InitSpec always
    yields bit-identical weights.
    """
    if prng is None:
        prng = Prng(init.seed).split("weights")

    weights: Weights = {}
    for name, shape in spec.weight_shapes().items():
        weights[name] = draw_weight(init.method, shape, prng.split(name)).astype(dtype)

    _LOGGER.debug("Initialized %s with %s (seed=%s)", spec.spec_id, init.method.value, init.seed)
    return weights


_FROZEN_CACHE: LRUCache = LRUCache(maxsize=8)
_FROZEN_LOCK = threading.Lock()


@cached(
    _FROZEN_CACHE,
    key=lambda spec, init, dtype=np.float64: hashkey(spec, init.method, init.seed, np.dtype(dtype).str),
    lock=_FROZEN_LOCK,
)
def frozen_weights(spec: NetworkSpec, init: InitSpec, dtype=np.float64) -> Weights:
    """Read-only weights shared by every ticket drawn from one initialization."""
    weights = initialize(spec, init, dtype=dtype)
    for array in weights.values():
        array.flags.writeable = False
    return weights


def initial_scores(
    spec: NetworkSpec, pattern: Pattern, prng: Prng, dtype=np.float64
) -> Weights:
    """Kaiming-uniform scores, one per mask group, bounded by the layer fan-in."""
    scores: Weights = {}
    for name, shape in spec.weight_shapes().items():
        fan_in, _fan_out = fans(shape)
        bound = np.sqrt(6.0 / fan_in)
        scores[name] = prng.split(name).uniform(-bound, bound, group_shape(pattern, shape)).astype(dtype)

    return scores
