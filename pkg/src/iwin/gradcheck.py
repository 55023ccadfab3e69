"""Finite-difference verification oracle for every differentiable op."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import ContractError, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of a scalar function against central differences.

    Returns the max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")

    x0 = np.array(x.data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check target must return a scalar tensor")
    out.backward()
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - eps
        f_minus = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
