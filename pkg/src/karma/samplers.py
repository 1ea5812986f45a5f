"""Fixed-step deterministic samplers for the three denoising heads.

Used only by the generator-comparison protocol: one sample per target from an
explicitly seeded stream, so reports are reproducible. Heads run as plain
forward passes (no tape), taking (x, cond, tau) and returning the model's
prediction under each method's parameterization.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from karma.diffcore import Tensor
from karma.objectives import EDM_SIGMA_DATA, DiffusionSchedule

HeadFn = Callable[[Tensor, Tensor, np.ndarray], Tensor]


def ddpm_sample(head: HeadFn, cond: Tensor, schedule: DiffusionSchedule,
                steps: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling over an evenly strided subsequence of the training
    steps (noise-prediction parameterization)."""
    b = cond.shape[0]
    dim = head.out_dim if hasattr(head, "out_dim") else cond.shape[1]
    ts = np.unique(np.linspace(1, schedule.num_steps, steps).astype(int))[::-1]
    abar = schedule.alpha_bars
    x = rng.normal(size=(b, dim))
    x0_hat = x
    for i, t in enumerate(ts):
        at = abar[t - 1]
        eps_hat = head(Tensor(x), cond, np.full(b, t / schedule.num_steps)).data
        x0_hat = (x - np.sqrt(1.0 - at) * eps_hat) / np.sqrt(at)
        if i + 1 < len(ts):
            s = ts[i + 1]
            a_s = abar[s - 1]
            var = (1.0 - a_s) / (1.0 - at) * (1.0 - at / a_s)
            var = max(float(var), 0.0)
            coef = np.sqrt(max(1.0 - a_s - var, 0.0))
            x = np.sqrt(a_s) * x0_hat + coef * eps_hat + np.sqrt(var) * rng.normal(size=x.shape)
    return x0_hat


def karras_sigmas(steps: int, sigma_min: float = 0.002, sigma_max: float = 80.0,
                  rho: float = 7.0) -> np.ndarray:
    i = np.arange(steps)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sig = (hi + i / (steps - 1) * (lo - hi)) ** rho
    return np.append(sig, 0.0)


def _edm_denoise(head: HeadFn, x: np.ndarray, cond: Tensor, sigma: float,
                 sigma_data: float) -> np.ndarray:
    b = x.shape[0]
    sd2 = sigma_data ** 2
    c_skip = sd2 / (sigma ** 2 + sd2)
    c_out = sigma * sigma_data / np.sqrt(sigma ** 2 + sd2)
    c_in = 1.0 / np.sqrt(sigma ** 2 + sd2)
    c_noise = np.log(sigma) / 4.0
    f = head(Tensor(c_in * x), cond, np.full(b, c_noise)).data
    return c_skip * x + c_out * f


def edm_sample_heun(head: HeadFn, cond: Tensor, steps: int,
                    rng: np.random.Generator,
                    sigma_data: float = EDM_SIGMA_DATA) -> np.ndarray:
    """Deterministic Heun integration down the Karras sigma ladder."""
    b = cond.shape[0]
    dim = head.out_dim if hasattr(head, "out_dim") else cond.shape[1]
    sigmas = karras_sigmas(steps)
    x = rng.normal(size=(b, dim)) * sigmas[0]
    for i in range(steps):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = (x - _edm_denoise(head, x, cond, s, sigma_data)) / s
        x_eul = x + (s_next - s) * d
        if s_next > 0:
            d2 = (x_eul - _edm_denoise(head, x_eul, cond, s_next, sigma_data)) / s_next
            x = x + (s_next - s) * 0.5 * (d + d2)
        else:
            x = x_eul
    return x


def fm_sample_euler(head: HeadFn, cond: Tensor, steps: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Euler integration of the learned velocity field from noise (t=0) to
    data (t=1)."""
    b = cond.shape[0]
    dim = head.out_dim if hasattr(head, "out_dim") else cond.shape[1]
    x = rng.normal(size=(b, dim))
    dt = 1.0 / steps
    for k in range(steps):
        t = np.full(b, k * dt)
        x = x + dt * head(Tensor(x), cond, t).data
    return x
