"""Adam optimizer over Parameter lists."""

from __future__ import annotations

import numpy as np

from .errors import OptimizerError
from .tensor import Parameter


def adam_step(
    params: list[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; zeroes gradients afterwards."""
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise OptimizerError(f"parameter {p.name!r} has no gradient; run backward first")
        p.step_count += 1
        p.moment1 *= beta1
        p.moment1 += (1.0 - beta1) * g
        p.moment2 *= beta2
        p.moment2 += (1.0 - beta2) * g * g
        m_hat = p.moment1 / (1.0 - beta1**p.step_count)
        v_hat = p.moment2 / (1.0 - beta2**p.step_count)
        p.tensor.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.tensor.data.dtype)
        p.tensor.grad = None


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None
