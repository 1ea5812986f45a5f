"""Finite-difference oracle for the backward pass."""

from __future__ import annotations

from typing import Callable

import numpy as np

from karma.errors import KarmaError
from karma.diffcore.tensor import Tape, Tensor


class GradCheckError(KarmaError):
    """grad_check preconditions violated (wrong dtype, non-deterministic f)."""


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``x`` (other inputs
    closed over). Evaluated in 64-bit only. Relative error per coordinate is
    |analytic - cd| / (|analytic| + |cd| + 1e-12).
    """
    if x.data.dtype != np.float64:
        raise GradCheckError("grad_check requires float64 inputs")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y1 = f(x)
    y2 = f(x)  # outside any tape: plain forward
    if y1.data.tobytes() != y2.data.tobytes():
        raise GradCheckError("f is not deterministic: two forward passes differ")
    tape.backward(y1)
    if x.grad is None:
        raise GradCheckError("f does not depend on x")
    analytic = x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    cd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        cd[i] = (hi - lo) / (2.0 * eps)
    cd = cd.reshape(x.data.shape)
    rel = np.abs(analytic - cd) / (np.abs(analytic) + np.abs(cd) + 1e-12)
    return float(rel.max())
