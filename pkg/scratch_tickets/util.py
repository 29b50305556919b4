"""Utilities"""
from typing import Iterator, Tuple

import numpy as np


def batch_slices(count: int, batch_size: int) -> Iterator[Tuple[int, int]]:
    """(start, stop) pairs covering range(count) in order."""
    for start in range(0, count, batch_size):
        yield start, min(start + batch_size, count)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def per_sample_norm(values: np.ndarray) -> np.ndarray:
    """L2 norm of every sample, broadcastable against `values`."""
    flat = values.reshape(len(values), -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    return norms.reshape((len(values),) + (1,) * (values.ndim - 1))
