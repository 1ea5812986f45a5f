"""Loss functions.

Action alignment is a pairwise cross-entropy over (clicked, negative) score
margins. The two decodability regularizers are mean per-token cross-entropy
of the target item's text, conditioned on history states or on the interest
embedding alone. Visual reconstruction supports three standard denoising
objectives (ddpm / edm / flow matching) over the frozen visual feature, and
an AR+MSE regression baseline exists for the embedding-generator comparison.

Sums in the definitions are normalized to means (per pair / per token /
per dimension) so the mixing weights are scale-stable across batch shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from karma.diffcore import (
    Tensor, cross_entropy, mul, neg, reshape, softplus, tmean, tsum,
)
from karma.diffcore.tensor import ShapeError
from karma.errors import ConfigError
from karma.model import KarmaModel


def _as_tensor2d(x, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if t.ndim == 1:
        t = reshape(t, (1, t.shape[0]))
    if t.ndim != 2:
        raise ShapeError(f"{name} must be a vector or (B, D) batch")
    return t


# ---------------------------------------------------------------------------
# action alignment

def pairwise_ce_batch(h: Tensor, e_pos: Tensor, e_neg: Tensor,
                      valid: Optional[np.ndarray] = None) -> tuple[Tensor, int]:
    """Mean over pairs of -log sigmoid(h.e_pos - h.e_neg).

    h, e_pos: (B, d); e_neg: (B, N, d); valid: (B, N) bool for padded
    negative slots. Returns (loss, pair count).
    """
    b, d = h.shape
    pos = tsum(mul(h, e_pos), axis=-1)                      # (B,)
    neg_scores = reshape(e_neg @ reshape(h, (b, d, 1)), e_neg.shape[:2])  # (B, N)
    margins = reshape(pos, (b, 1)) + neg(neg_scores)
    losses = softplus(neg(margins))
    if valid is None:
        count = int(np.prod(losses.shape))
        return tmean(losses), count
    mask = np.asarray(valid, dtype=h.data.dtype)
    count = int(mask.sum())
    if count == 0:
        raise ShapeError("no valid negative pairs")
    return tsum(mul(losses, Tensor(mask))) * (1.0 / count), count


def pairwise_ce_loss(h_t, e_pos, negatives) -> Tensor:
    """Single-target form; ``negatives`` is a list of vectors or an (N, d) batch."""
    h = _as_tensor2d(h_t, "h_t")
    ep = _as_tensor2d(e_pos, "e_pos")
    if isinstance(negatives, (list, tuple)):
        if len(negatives) == 0:
            raise ShapeError("empty negative set")
        rows = [n if isinstance(n, Tensor) else Tensor(np.asarray(n)) for n in negatives]
        from karma.diffcore import concat
        en = concat([reshape(r, (1, r.shape[-1])) for r in rows], axis=0)
    else:
        en = negatives if isinstance(negatives, Tensor) else Tensor(np.asarray(negatives))
        if en.ndim == 1:
            en = reshape(en, (1, en.shape[0]))
    if en.shape[0] == 0:
        raise ShapeError("empty negative set")
    en3 = reshape(en, (1, en.shape[0], en.shape[1]))
    loss, _ = pairwise_ce_batch(h, ep, en3)
    return loss


def info_nce_loss(h: Tensor, e_pos: Tensor, e_neg: Tensor,
                  temperature: float = 0.07,
                  valid: Optional[np.ndarray] = None) -> tuple[Tensor, int]:
    """Temperature-scaled softmax alternative; ablation flag only."""
    b, d = h.shape
    pos = reshape(tsum(mul(h, e_pos), axis=-1), (b, 1))
    negs = reshape(e_neg @ reshape(h, (b, d, 1)), e_neg.shape[:2])
    if valid is not None:
        # padded slots get a large negative score so they never win
        penalty = np.where(np.asarray(valid), 0.0, -1e9).astype(h.data.dtype)
        negs = negs + Tensor(penalty)
    from karma.diffcore import concat, log_softmax
    logits = mul(concat([pos, negs], axis=1), 1.0 / temperature)
    logp = log_softmax(logits, axis=-1)
    loss = neg(tmean(logp[:, 0]))
    return loss, b


# ---------------------------------------------------------------------------
# text decodability

def gen_loss(model: KarmaModel, history_states: Tensor, target_tokens) -> Tensor:
    """Mean per-token CE of the target text decoded from history states."""
    target = np.asarray(target_tokens, dtype=np.int64)
    if target.size == 0:
        raise ShapeError("empty target")
    logits = model.lm_logits_history(history_states, target)
    return cross_entropy(logits, target)


def recon_loss(model: KarmaModel, h_t: Tensor, target_tokens) -> Tensor:
    """Mean per-token CE of the target text decoded from the bottleneck only."""
    target = np.asarray(target_tokens, dtype=np.int64)
    if target.size == 0:
        raise ShapeError("empty target")
    logits = model.lm_logits_embedding(h_t, target)
    return cross_entropy(logits, target)


def lm_ce_batch(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, int]:
    """(B, L, V) logits + (B, L) targets -> scalar mean CE and token count."""
    b, l, v = logits.shape
    flat = reshape(logits, (b * l, v))
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    return cross_entropy(flat, t), b * l


# ---------------------------------------------------------------------------
# visual / embedding reconstruction heads

HeadFn = Callable[[Tensor, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta schedule. Defaults keep T desk-scale while driving the
    terminal signal level near zero (alpha_bar[T-1] < 0.05), which a
    (1e-4, 0.02) range cannot do in 100 steps."""

    num_steps: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.num_steps)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)


DEFAULT_SCHEDULE = DiffusionSchedule()
EDM_P_MEAN = -1.2
EDM_P_STD = 1.2
EDM_SIGMA_DATA = 0.5


def _prep_vc(v_target, condition) -> tuple[Tensor, Tensor, int, int]:
    v = _as_tensor2d(v_target, "v_target")
    c = _as_tensor2d(condition, "condition")
    if v.shape[0] != c.shape[0]:
        raise ShapeError("v_target and condition batch sizes differ")
    return v, c, v.shape[0], v.shape[1]


def ddpm_loss(head: HeadFn, v_target, condition, rng: Optional[np.random.Generator] = None,
              *, schedule: DiffusionSchedule = DEFAULT_SCHEDULE,
              t: Optional[np.ndarray] = None, eps: Optional[np.ndarray] = None) -> Tensor:
    """Noise-prediction objective: E ||eps - head(x_t, c, t/T)||^2 / D.

    t (1-based step) and eps may be fixed for deterministic gradient checks;
    otherwise they are drawn from ``rng``.
    """
    v, c, b, dim = _prep_vc(v_target, condition)
    if t is None:
        t = rng.integers(1, schedule.num_steps + 1, size=b)
    t = np.asarray(t, dtype=np.int64)
    if eps is None:
        eps = rng.normal(size=(b, dim))
    dtype = v.data.dtype
    abar = schedule.alpha_bars[t - 1].astype(dtype)[:, None]
    eps_t = Tensor(eps.astype(dtype))
    xt = mul(v, np.sqrt(abar)) + mul(eps_t, np.sqrt(1.0 - abar))
    pred = head(xt, c, (t / schedule.num_steps).astype(np.float64))
    diff = pred + neg(eps_t)
    return tmean(mul(diff, diff))


def edm_loss(head: HeadFn, v_target, condition, rng: Optional[np.random.Generator] = None,
             *, sigma: Optional[np.ndarray] = None, eps: Optional[np.ndarray] = None,
             sigma_data: float = EDM_SIGMA_DATA) -> Tensor:
    """Preconditioned denoising objective with log-normal noise levels.

    D(x; sigma) = c_skip*x + c_out*head(c_in*x, c, ln(sigma)/4); the loss is
    lambda(sigma) * mean((D - v)^2) with lambda = (sigma^2 + sd^2)/(sigma*sd)^2.
    """
    v, c, b, dim = _prep_vc(v_target, condition)
    if sigma is None:
        sigma = np.exp(EDM_P_MEAN + EDM_P_STD * rng.normal(size=b))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma <= 0):
        raise ConfigError("sigma must be positive")
    if eps is None:
        eps = rng.normal(size=(b, dim))
    dtype = v.data.dtype
    s = sigma.astype(dtype)[:, None]
    sd2 = sigma_data ** 2
    c_skip = (sd2 / (s ** 2 + sd2)).astype(dtype)
    c_out = (s * sigma_data / np.sqrt(s ** 2 + sd2)).astype(dtype)
    c_in = (1.0 / np.sqrt(s ** 2 + sd2)).astype(dtype)
    c_noise = (np.log(sigma) / 4.0)
    lam = ((s ** 2 + sd2) / (s * sigma_data) ** 2).astype(dtype)

    x = v + mul(Tensor(eps.astype(dtype)), s)
    denoised = mul(x, c_skip) + mul(head(mul(x, c_in), c, c_noise), c_out)
    diff = denoised + neg(v)
    return tmean(mul(mul(diff, diff), lam))


def flow_matching_loss(head: HeadFn, v_target, condition,
                       rng: Optional[np.random.Generator] = None,
                       *, t: Optional[np.ndarray] = None,
                       x0: Optional[np.ndarray] = None) -> Tensor:
    """Straight-path velocity regression: ||head(x_t, c, t) - (v - x0)||^2 / D
    with x_t = (1 - t) x0 + t v, x0 ~ N(0, I), t ~ U(0, 1)."""
    v, c, b, dim = _prep_vc(v_target, condition)
    if t is None:
        t = rng.random(size=b)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0 is None:
        x0 = rng.normal(size=(b, dim))
    dtype = v.data.dtype
    tt = t.astype(dtype)[:, None]
    x0_t = Tensor(x0.astype(dtype))
    xt = mul(x0_t, 1.0 - tt) + mul(v, tt)
    target_vel = v + neg(x0_t)
    diff = head(xt, c, t) + neg(target_vel)
    return tmean(mul(diff, diff))


def ar_mse_loss(h_t, e_target) -> Tensor:
    """Mean squared error to the (detached) target embedding."""
    h = h_t if isinstance(h_t, Tensor) else Tensor(np.asarray(h_t))
    e = e_target.detach() if isinstance(e_target, Tensor) else Tensor(np.asarray(e_target))
    if h.shape != e.shape:
        raise ShapeError(f"shape mismatch {h.shape} vs {e.shape}")
    diff = h + neg(e)
    return tmean(mul(diff, diff))


# ---------------------------------------------------------------------------
# composition

@dataclass
class LossWeights:
    lambda_dec: float = 1.0
    lambda_img: float = 0.5

    def validate(self) -> None:
        if self.lambda_dec < 0 or self.lambda_img < 0:
            raise ConfigError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    act: float = 0.0
    gen: float = 0.0
    recon: float = 0.0
    img: float = 0.0
    total: float = 0.0
    pair_count: int = 0
    token_count: int = 0
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def recompute_total(self, weights: LossWeights) -> float:
        return self.act + weights.lambda_dec * (
            self.gen + self.recon + weights.lambda_img * self.img)

    CSV_COLUMNS = ("step", "act", "gen", "recon", "img", "total")

    def csv_row(self, step: int) -> str:
        return f"{step},{self.act!r},{self.gen!r},{self.recon!r},{self.img!r},{self.total!r}"


def karma_loss(act: Tensor, gen: Optional[Tensor] = None,
               recon: Optional[Tensor] = None, img: Optional[Tensor] = None,
               weights: LossWeights = LossWeights(),
               pair_count: int = 0, token_count: int = 0) -> LossBreakdown:
    """Weighted composition: act + lambda_dec * (gen + recon + lambda_img*img).

    With lambda_dec == 0 the returned loss node IS the action loss, so an
    action-only run and a zero-weight run are trajectory-identical.
    """
    weights.validate()
    total = act
    dec: Optional[Tensor] = None
    for part in (gen, recon):
        if part is not None:
            dec = part if dec is None else dec + part
    if img is not None and weights.lambda_img > 0:
        term = mul(img, weights.lambda_img)
        dec = term if dec is None else dec + term
    if dec is not None and weights.lambda_dec > 0:
        total = act + mul(dec, weights.lambda_dec)
    bd = LossBreakdown(
        act=float(act.data),
        gen=float(gen.data) if gen is not None else 0.0,
        recon=float(recon.data) if recon is not None else 0.0,
        img=float(img.data) if img is not None else 0.0,
        total=float(total.data),
        pair_count=pair_count, token_count=token_count, loss=total)
    return bd
