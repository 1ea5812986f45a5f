"""Two-stage training.

Stage 1 (semantic warm-up) teaches the text head to reconstruct an item's
tokens from its own embedding, aligning the continuous-token interface with
the LM before any behavioral signal. Stage 2 trains on behavioral sequences:
action alignment against hard + in-batch negatives, plus whichever
decodability terms the variant enables.

All randomness is drawn from streams derived per (seed, stage, step, role),
so runs are bit-reproducible, resumable mid-stream, and variants that share a
component consume identical draws for it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from karma.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from karma.diffcore import AdamW, Tape, Tensor, concat, gather_rows, mul
from karma.errors import ConfigError, NumericError
from karma.model import KarmaModel, ModelConfig
from karma.objectives import (
    DEFAULT_SCHEDULE, LossBreakdown, LossWeights, ddpm_loss, edm_loss,
    flow_matching_loss, info_nce_loss, karma_loss, lm_ce_batch, pairwise_ce_batch,
)
from karma.rngs import derive_rng
from karma.synthdata import Dataset

log = logging.getLogger(__name__)

VARIANTS = {
    "action-only": (False, False, False),
    "task1": (True, False, False),
    "task2": (False, True, False),
    "karma": (True, True, False),
    "karma-mm": (True, True, True),
}
GENERATOR_VARIANTS = ("generator:mse", "generator:ddpm", "generator:edm", "generator:fm")


@dataclass
class TrainConfig:
    stage1_steps: int = 1000
    stage2_steps: int = 4000
    batch_size: int = 32
    hard_negatives: int = 4
    inbatch_negatives: int = 8  # additionally capped at batch_size - 1
    lambda_dec: float = 1.0
    lambda_img: float = 0.5
    gen_weight: float = 1.0     # inner weights inside the decodability term;
    recon_weight: float = 1.0   # 0 reduces karma to the single-task variants
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    variant: str = "karma"
    cold_start: bool = False
    freeze_encoder_stage2: bool = False
    action_loss: str = "pairwise_ce"  # "infonce" kept only as an ablation flag
    infonce_temperature: float = 0.07
    visual_loss: str = "ddpm"         # reconstruction objective for karma-mm
    warmup_jitter: float = 0.1        # stage-1 conditioning noise
    warmup_token_dropout: float = 0.3 # stage-1 word dropout on teacher inputs:
                                      # blocks prefix-lookup memorization so
                                      # unseen items stay decodable
    warmup_holdout_frac: float = 0.1
    eval_every: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        for name in ("stage1_steps", "stage2_steps", "batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.hard_negatives < 0 or self.inbatch_negatives < 0:
            raise ConfigError("negative counts must be >= 0")
        if self.variant not in VARIANTS and self.variant not in GENERATOR_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"expected one of {sorted(VARIANTS) + list(GENERATOR_VARIANTS)}")
        if self.action_loss not in ("pairwise_ce", "infonce"):
            raise ConfigError("action_loss must be 'pairwise_ce' or 'infonce'")
        if self.visual_loss not in ("ddpm", "edm", "fm"):
            raise ConfigError("visual_loss must be one of ddpm|edm|fm")
        if self.lambda_dec < 0 or self.lambda_img < 0:
            raise ConfigError("loss weights must be nonnegative")

    def weights(self) -> LossWeights:
        return LossWeights(lambda_dec=self.lambda_dec, lambda_img=self.lambda_img)

    def component_gates(self) -> tuple[bool, bool, bool]:
        """Effective (gen, recon, img) gates: a component runs only when the
        variant enables it and every weight on its path is positive."""
        use_gen, use_recon, use_img = VARIANTS[self.variant]
        dec_on = self.lambda_dec > 0
        return (use_gen and dec_on and self.gen_weight > 0,
                use_recon and dec_on and self.recon_weight > 0,
                use_img and dec_on and self.lambda_img > 0)


# ---------------------------------------------------------------------------
# examples & negatives

@dataclass
class Example:
    session_idx: int
    step_idx: int
    history_ids: list[int]
    query_id: int
    target_id: int
    exposed_ids: list[int]


@dataclass
class NegativeSet:
    target_id: int
    ids: list[int]
    sources: list[str]  # "hard" | "in-batch", aligned with ids


def build_example(dataset: Dataset, session_idx: int, step_idx: int,
                  max_history: int) -> Example:
    sess = dataset.sessions[session_idx]
    step = sess.steps[step_idx]
    hist = [s.clicked_item_id for s in sess.steps[:step_idx]][-max_history:]
    return Example(session_idx=session_idx, step_idx=step_idx, history_ids=hist,
                   query_id=step.query_id, target_id=step.clicked_item_id,
                   exposed_ids=list(step.exposed_unclicked_item_ids))


def sample_negatives(step: int, batch: list[Example], cfg: TrainConfig,
                     rng: np.random.Generator) -> list[Optional[NegativeSet]]:
    """Hard negatives from each target's exposure list plus in-batch negatives.

    Hard negatives are drawn without replacement (all of them when the list
    is shorter than requested). In-batch negatives are other targets in the
    batch with a different item id. A target left with zero negatives is
    dropped (None) with a logged warning.
    """
    out: list[Optional[NegativeSet]] = []
    n_inbatch = min(cfg.inbatch_negatives, cfg.batch_size - 1)
    all_targets = [ex.target_id for ex in batch]
    for i, ex in enumerate(batch):
        pool = [t for t in ex.exposed_ids if t != ex.target_id]
        n_hard = min(cfg.hard_negatives, len(pool))
        hard = [int(pool[j]) for j in rng.permutation(len(pool))[:n_hard]]
        others = sorted({t for j, t in enumerate(all_targets)
                         if j != i and t != ex.target_id} - set(hard))
        k = min(n_inbatch, len(others))
        inbatch = [int(others[j]) for j in rng.permutation(len(others))[:k]]
        ids = hard + inbatch
        if not ids:
            log.warning("step %d: target %d has no available negatives; dropped",
                        step, ex.target_id)
            out.append(None)
            continue
        out.append(NegativeSet(target_id=ex.target_id, ids=ids,
                               sources=["hard"] * len(hard) + ["in-batch"] * len(inbatch)))
    return out


# ---------------------------------------------------------------------------
# stage 1: semantic warm-up

def warmup_holdout_ids(catalog_size: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = derive_rng(cfg.seed, "warmup-holdout")
    perm = rng.permutation(catalog_size)
    n_held = int(round(cfg.warmup_holdout_frac * catalog_size))
    return np.sort(perm[n_held:]), np.sort(perm[:n_held])


def item_recon_ce(model: KarmaModel, tokens: np.ndarray) -> float:
    """Held-out reconstruction CE from isolated item embeddings (no grads)."""
    e = model.encode_items_batch(tokens)
    logits = model.lm_logits_embedding_batch(Tensor(e.data), tokens)
    loss, _ = lm_ce_batch(logits, tokens)
    return loss.item()


def warmup_stage(dataset: Dataset, model: KarmaModel, cfg: TrainConfig,
                 optimizer: Optional[AdamW] = None, start_step: int = 0,
                 on_step: Optional[Callable] = None) -> list[LossBreakdown]:
    """Train encoder + text head to reconstruct item tokens from e_i."""
    cfg.validate()
    opt = optimizer or AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    train_ids, _ = warmup_holdout_ids(len(dataset.catalog), cfg)
    tok_all = dataset.catalog.token_matrix
    history = []
    for step in range(start_step, cfg.stage1_steps):
        rng = derive_rng(cfg.seed, "warmup", step)
        ids = train_ids[rng.integers(0, len(train_ids), size=cfg.batch_size)]
        tokens = tok_all[ids]
        try:
            with Tape() as tape:
                e = model.encode_items_batch(tokens)
                if cfg.warmup_jitter > 0:
                    noise = rng.normal(size=e.shape) * cfg.warmup_jitter
                    e = e + Tensor(noise.astype(e.data.dtype))
                teacher = None
                if cfg.warmup_token_dropout > 0:
                    drop = rng.random(tokens.shape) < cfg.warmup_token_dropout
                    teacher = np.where(
                        drop, rng.integers(0, model.cfg.vocab_size, size=tokens.shape),
                        tokens)
                logits = model.lm_logits_embedding_batch(e, tokens, teacher_tokens=teacher)
                loss, n_tok = lm_ce_batch(logits, tokens)
                bd = LossBreakdown(recon=loss.item(), total=loss.item(),
                                   token_count=n_tok, loss=loss)
                tape.backward(loss)
            opt.step()
        except NumericError as e:
            raise NumericError(f"warmup step {step}: {e}") from e
        opt.zero_grad()
        bd.loss = None
        history.append(bd)
        if on_step:
            on_step("warmup", step, bd, opt, model)
    return history


# ---------------------------------------------------------------------------
# stage 2: joint behavioral training

def joint_step(dataset: Dataset, model: KarmaModel, cfg: TrainConfig,
               opt: AdamW, examples_pool: list[tuple[int, int]],
               step: int) -> LossBreakdown:
    use_gen, use_recon, use_img = cfg.component_gates()
    rng_batch = derive_rng(cfg.seed, "joint-batch", step)
    rng_neg = derive_rng(cfg.seed, "joint-neg", step)

    picks = rng_batch.integers(0, len(examples_pool), size=cfg.batch_size)
    batch = [build_example(dataset, *examples_pool[i], model.cfg.max_seq)
             for i in picks]
    negsets = sample_negatives(step, batch, cfg, rng_neg)
    kept = [(ex, ns) for ex, ns in zip(batch, negsets) if ns is not None]
    if not kept:
        log.warning("step %d: whole batch dropped, skipping", step)
        return LossBreakdown()
    batch = [ex for ex, _ in kept]
    negsets = [ns for _, ns in kept]
    b = len(batch)

    ids_needed = sorted({i for ex in batch for i in ex.history_ids}
                        | {ex.target_id for ex in batch}
                        | {i for ns in negsets for i in ns.ids})
    row_of = {item_id: r for r, item_id in enumerate(ids_needed)}
    tok = dataset.catalog.token_matrix[ids_needed]

    t_max = max(len(ex.history_ids) for ex in batch)
    n_max = max(len(ns.ids) for ns in negsets)
    pad_row = len(ids_needed)
    hist_idx = np.full((b, t_max), pad_row, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    pos_idx = np.zeros(b, dtype=np.int64)
    neg_idx = np.zeros((b, n_max), dtype=np.int64)
    neg_valid = np.zeros((b, n_max), dtype=bool)
    query_ids = np.array([ex.query_id for ex in batch], dtype=np.int64)
    targets_tok = dataset.catalog.token_matrix[[ex.target_id for ex in batch]]
    for i, (ex, ns) in enumerate(zip(batch, negsets)):
        lengths[i] = len(ex.history_ids)
        hist_idx[i, :lengths[i]] = [row_of[h] for h in ex.history_ids]
        pos_idx[i] = row_of[ex.target_id]
        neg_idx[i, :len(ns.ids)] = [row_of[j] for j in ns.ids]
        neg_valid[i, :len(ns.ids)] = True

    freeze_enc = cfg.freeze_encoder_stage2
    with Tape() as tape:
        if freeze_enc:
            e_unique = Tensor(model.encode_catalog(tok, chunk=512))
        else:
            e_unique = model.encode_items_batch(tok)
        zero_row = Tensor(np.zeros((1, model.cfg.d), dtype=e_unique.data.dtype))
        e_padded = concat([e_unique, zero_row], axis=0)
        hist_emb = gather_rows(e_padded, hist_idx)
        h, states, valid = model.history_forward(hist_emb, lengths, query_ids)

        e_pos = gather_rows(e_unique, pos_idx)
        e_neg = gather_rows(e_padded, neg_idx)
        if cfg.action_loss == "pairwise_ce":
            act, pairs = pairwise_ce_batch(h, e_pos, e_neg, neg_valid)
        else:
            act, pairs = info_nce_loss(h, e_pos, e_neg, cfg.infonce_temperature, neg_valid)

        gen = recon = img = None
        n_tok = 0
        if use_gen:
            logits = model.lm_logits_history_batch(states, valid, targets_tok)
            gen, tk = lm_ce_batch(logits, targets_tok)
            n_tok += tk
        if use_recon:
            logits = model.lm_logits_embedding_batch(h, targets_tok)
            recon, tk = lm_ce_batch(logits, targets_tok)
            n_tok += tk
        if use_img:
            rng_diff = derive_rng(cfg.seed, "joint-diff", step)
            v_tgt = dataset.catalog.visual_matrix[[ex.target_id for ex in batch]]
            head = model.visual_head_forward
            if cfg.visual_loss == "ddpm":
                img = ddpm_loss(head, v_tgt, h, rng_diff, schedule=DEFAULT_SCHEDULE)
            elif cfg.visual_loss == "edm":
                img = edm_loss(head, v_tgt, h, rng_diff)
            else:
                img = flow_matching_loss(head, v_tgt, h, rng_diff)

        if gen is not None and cfg.gen_weight != 1.0:
            gen = mul(gen, cfg.gen_weight)
        if recon is not None and cfg.recon_weight != 1.0:
            recon = mul(recon, cfg.recon_weight)
        bd = karma_loss(act, gen, recon, img, cfg.weights(),
                        pair_count=pairs, token_count=n_tok)
        tape.backward(bd.loss)

    # frozen-encoder runs computed the embeddings outside the tape, so enc.*
    # params carry no grads and the plain step leaves them untouched
    opt.step()
    opt.zero_grad()
    bd.loss = None
    return bd


def joint_stage(dataset: Dataset, model: KarmaModel, cfg: TrainConfig,
                optimizer: Optional[AdamW] = None, start_step: int = 0,
                on_step: Optional[Callable] = None,
                eval_hook: Optional[Callable] = None) -> list[LossBreakdown]:
    cfg.validate()
    if cfg.variant in GENERATOR_VARIANTS:
        raise ConfigError("generator variants train through the generator "
                          "comparison protocol, not joint_stage")
    opt = optimizer or AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                             eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    pool = dataset.split.train_examples(dataset.sessions)
    if not pool:
        raise ConfigError("no training examples in the dataset split")
    history = []
    for step in range(start_step, cfg.stage2_steps):
        try:
            bd = joint_step(dataset, model, cfg, opt, pool, step)
        except NumericError as e:
            raise NumericError(f"joint step {step}: {e}") from e
        history.append(bd)
        if on_step:
            on_step("joint", step, bd, opt, model)
        if eval_hook and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            eval_hook(step + 1, model)
    return history


# ---------------------------------------------------------------------------
# orchestration

@dataclass
class TrainResult:
    model: KarmaModel
    optimizer: AdamW
    warmup_log: list[LossBreakdown] = field(default_factory=list)
    joint_log: list[LossBreakdown] = field(default_factory=list)


def run_training(dataset: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                 resume: Optional[Checkpoint] = None,
                 on_step: Optional[Callable] = None,
                 eval_hook: Optional[Callable] = None) -> TrainResult:
    """Warm-up (unless cold-start) then joint training, optionally resumed.

    A fresh optimizer starts each stage; per-step random streams depend only
    on (seed, stage, step), so resuming from a checkpoint at step k replays
    the uninterrupted run exactly.
    """
    cfg.validate()
    model_cfg.validate()
    if resume is not None:
        model = resume.build_model()
        stage = resume.rng_state.get("stage", "joint")
        next_step = int(resume.rng_state.get("next_step", 0))
        opt = AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                    eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        opt.load_state_arrays(resume.optimizer, resume.optimizer_step)
        result = TrainResult(model=model, optimizer=opt)
        if stage == "warmup":
            result.warmup_log = warmup_stage(dataset, model, cfg, optimizer=opt,
                                             start_step=next_step, on_step=on_step)
            opt = AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                        eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
            result.optimizer = opt
            result.joint_log = joint_stage(dataset, model, cfg, optimizer=opt,
                                           on_step=on_step, eval_hook=eval_hook)
        else:
            result.joint_log = joint_stage(dataset, model, cfg, optimizer=opt,
                                           start_step=next_step, on_step=on_step,
                                           eval_hook=eval_hook)
        return result

    model = KarmaModel(model_cfg, seed=cfg.seed)
    result = TrainResult(model=model, optimizer=AdamW(model.params, lr=cfg.lr,
                                                      betas=(cfg.beta1, cfg.beta2),
                                                      eps=cfg.adam_eps,
                                                      weight_decay=cfg.weight_decay))
    if not cfg.cold_start and cfg.stage1_steps > 0:
        result.warmup_log = warmup_stage(dataset, model, cfg,
                                         optimizer=result.optimizer, on_step=on_step)
        result.optimizer = AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                                 eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
    result.joint_log = joint_stage(dataset, model, cfg, optimizer=result.optimizer,
                                   on_step=on_step, eval_hook=eval_hook)
    return result


def save_training_checkpoint(path: Path, model: KarmaModel, opt: AdamW,
                             cfg: TrainConfig, stage: str, next_step: int) -> None:
    save_checkpoint(path, model, optimizer=opt,
                    step=next_step,
                    rng_state={"seed": cfg.seed, "stage": stage, "next_step": next_step},
                    train_config=asdict(cfg))


def load_training_checkpoint(path: Path) -> Checkpoint:
    return load_checkpoint(path)
