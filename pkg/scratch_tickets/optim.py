"""SGD with momentum over Tensor parameters."""
from typing import Dict, List, Sequence

import numpy as np

from .config import SearchSchedule
from .tensor import Tensor


class SGD:
    """Heavy-ball SGD: buf = momentum * buf + (grad + wd * p); p -= lr * buf."""

    def __init__(self, params: Sequence[Tensor], schedule: SearchSchedule):
        self.params: List[Tensor] = list(params)
        self.schedule = schedule
        self.lr = schedule.lr
        self._buffers: Dict[int, np.ndarray] = {}

    def set_epoch(self, epoch: int) -> float:
        self.lr = self.schedule.lr_at(epoch)
        return self.lr

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def step(self) -> None:
        momentum = self.schedule.momentum
        decay = self.schedule.weight_decay
        for index, param in enumerate(self.params):
            if param.grad is None:
                continue

            grad = param.grad
            if decay:
                grad = grad + decay * param.data

            buffer = self._buffers.get(index)
            if buffer is None:
                buffer = np.array(grad)
            else:
                buffer = momentum * buffer + grad
            self._buffers[index] = buffer

            param.data -= (self.lr * buffer).astype(param.dtype, copy=False)
