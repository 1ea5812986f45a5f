"""Decoupled-weight-decay Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from karma.errors import NumericError
from karma.diffcore.tensor import ShapeError, Tensor


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: OptimizerState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray]) -> None:
    """One AdamW update in place: bias-corrected Adam + decoupled decay.

    Parameters without an entry in ``grads`` are untouched (no decay either),
    so stage-1 training leaves unused parameter groups bitwise unchanged.
    """
    if state.lr <= 0:
        raise ValueError("lr must be positive")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in grads:
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.data.shape} ({name})")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}' at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - state.lr * update


class AdamW:
    """Owns the optimizer state for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1],
                                    eps=eps, weight_decay=weight_decay)

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adamw_step(self.state, self.params, grads)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment blobs keyed by name, for checkpointing."""
        out = {}
        for n in sorted(self.state.m):
            out[f"m.{n}"] = self.state.m[n]
            out[f"v.{n}"] = self.state.v[n]
        return out

    def load_state_arrays(self, blobs: dict[str, np.ndarray], step_count: int) -> None:
        self.state.step_count = step_count
        self.state.m = {n[2:]: b.copy() for n, b in blobs.items() if n.startswith("m.")}
        self.state.v = {n[2:]: b.copy() for n, b in blobs.items() if n.startswith("v.")}
