from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class SGD:
    """SGD with heavy-ball momentum and decoupled L2 weight decay.

    The update is ``v = momentum * v + g`` then ``p -= lr * (v + weight_decay * p)``,
    so the decay never accumulates in the velocity.

    ``weight_decay`` plays the role of the ``(1 - p) / (2N)`` coefficient on the
    squared norm of the variational parameters in the dropout objective; since
    N is the dataset size it is exposed directly rather than derived.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, allow_missing: bool = False) -> None:
        """Apply one update then zero every gradient.

        Raises ValueError if a parameter has no gradient, unless
        ``allow_missing`` in which case it is treated as zero.
        """
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if g is None:
                if not allow_missing:
                    raise ValueError(f"parameter of shape {p.shape} has no gradient")
                g = 0.0
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * (v + self.weight_decay * p.data)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], state: SGD) -> None:
    """Functional spelling of ``state.step()`` over ``params`` (must be the state's own)."""
    if list(params) != state.params:
        raise ValueError("params do not match the optimizer state")
    state.step()
