"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between analytic and numeric gradients.

    ``f(*inputs)`` must return a scalar tensor. Error per entry is
    ``|analytic - numeric| / max(1, |analytic|)``. Inputs should be float64.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    analytic = backward(f(*inputs))
    worst = 0.0
    for t in inputs:
        a = analytic.get(t)
        a = np.zeros_like(t.data) if a is None else a
        flat = t.data.reshape(-1)
        num = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(f(*inputs).data)
            flat[k] = orig - eps
            fm = float(f(*inputs).data)
            flat[k] = orig
            num[k] = (fp - fm) / (2 * eps)
        err = np.abs(a.reshape(-1) - num) / np.maximum(1.0, np.abs(a.reshape(-1)))
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
