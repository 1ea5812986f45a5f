"""Metrics, brute-force retrieval, attention-sink diagnostics, and the
embedding-generator comparison protocol.

Every metric has a deliberately dumb independent oracle in the test suite;
the implementations here are the fast paths. Evaluation is read-only over a
frozen model and certifies the train-only contract: the text and visual
decoding heads are never invoked on the serving path.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from karma.diffcore import Tape, Tensor
from karma.errors import ConfigError, KarmaError
from karma.model import AttentionRecord, KarmaModel, MlpHead
from karma.objectives import (
    DEFAULT_SCHEDULE, ar_mse_loss, ddpm_loss, edm_loss, flow_matching_loss,
)
from karma.rngs import derive_rng
from karma.samplers import ddpm_sample, edm_sample_heun, fm_sample_euler
from karma.synthdata import Dataset
from karma.trainer import TrainConfig, build_example

log = logging.getLogger(__name__)

JS_DEFINITION = "per_item_mean_jaccard"  # vs union-of-terms; recorded in reports


class ContractViolation(KarmaError):
    """A decoding head was invoked on the serving path."""


# ---------------------------------------------------------------------------
# retrieval + metrics

def retrieve_topk(h: np.ndarray, item_embeddings: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k item ids by dot product; ties break toward the lower id."""
    n = len(item_embeddings)
    if n == 0:
        raise ConfigError("empty catalog")
    if k > n:
        raise ConfigError(f"K={k} exceeds catalog size {n}")
    scores = item_embeddings @ np.asarray(h)
    if k < n:
        # every candidate at or above the k-th best score, so boundary ties
        # resolve by the documented ascending-id rule
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order][:k]


def batch_retrieve(H: np.ndarray, item_embeddings: np.ndarray, k: int) -> np.ndarray:
    return np.stack([retrieve_topk(h, item_embeddings, k) for h in H])


@dataclass
class RetrievalRun:
    target_id: int
    ranked_ids: np.ndarray
    scores: np.ndarray


def hr_at_k(runs: Sequence[RetrievalRun], k: int) -> float:
    """Fraction of targets whose true item appears in the top-k."""
    if not runs:
        raise ConfigError("no retrieval runs")
    hits = 0
    for run in runs:
        if k > len(run.ranked_ids):
            raise ConfigError(f"K={k} exceeds ranking length {len(run.ranked_ids)}")
        hits += run.target_id in run.ranked_ids[:k]
    return hits / len(runs)


def gauc(sessions: Sequence[tuple[np.ndarray, np.ndarray]]) -> Optional[float]:
    """Per-session AUC (ties 0.5), weighted by the session's pos*neg pair count.

    Sessions missing either class are skipped; returns None when no session
    qualifies (explicitly undefined, never 0).
    """
    num = 0.0
    den = 0.0
    for pos, neg in sessions:
        pos = np.asarray(pos, dtype=np.float64)
        neg = np.asarray(neg, dtype=np.float64)
        if len(pos) == 0 or len(neg) == 0:
            continue
        pairs = len(pos) * len(neg)
        allv = np.concatenate([pos, neg])
        order = np.argsort(allv, kind="mergesort")
        ranks = np.empty(len(allv))
        sorted_vals = allv[order]
        # average ranks for ties
        i = 0
        while i < len(allv):
            j = i
            while j + 1 < len(allv) and sorted_vals[j + 1] == sorted_vals[i]:
                j += 1
            ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        r_pos = ranks[:len(pos)].sum()
        auc = (r_pos - len(pos) * (len(pos) + 1) / 2.0) / pairs
        num += auc * pairs
        den += pairs
    return None if den == 0 else num / den


def js_at_k(runs: Sequence[RetrievalRun], k: int,
            terms: Sequence[frozenset]) -> float:
    """Mean over targets of the mean Jaccard(target terms, retrieved terms)
    across the top-k retrieved items."""
    if k < 1:
        raise ConfigError("K must be >= 1")
    vals = []
    for run in runs:
        t = terms[run.target_id]
        tops = run.ranked_ids[:k]
        j = 0.0
        for rid in tops:
            r = terms[rid]
            inter = len(t & r)
            j += inter / (len(t) + len(r) - inter)
        vals.append(j / len(tops))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# attention-sink diagnostics

@dataclass
class SinkEntry:
    layer: int
    head: int
    source: str
    mean_max_row_mass: float
    mean_row_entropy: float
    column_mass_gini: float
    num_records: int


@dataclass
class SinkProfile:
    entries: list[SinkEntry]

    def summary(self) -> dict[str, float]:
        if not self.entries:
            return {"mean_max_row_mass": float("nan"),
                    "mean_row_entropy": float("nan"),
                    "column_mass_gini": float("nan")}
        return {
            "mean_max_row_mass": float(np.mean([e.mean_max_row_mass for e in self.entries])),
            "mean_row_entropy": float(np.mean([e.mean_row_entropy for e in self.entries])),
            "column_mass_gini": float(np.mean([e.column_mass_gini for e in self.entries])),
        }

    def to_json(self) -> dict:
        return {"js_definition": JS_DEFINITION, "entries": [asdict(e) for e in self.entries],
                "summary": self.summary()}


def _gini(x: np.ndarray) -> float:
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    total = x.sum()
    if total <= 0:
        return 0.0
    cum = np.cumsum(x)
    # G = 1 - 2 * sum((cum - x/2)) / (n * total), stable closed form
    return float((n + 1 - 2.0 * (cum.sum() / total)) / n)


def _row_entropy(w: np.ndarray) -> float:
    p = np.clip(w, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.where(p > 0, np.log(p), 0.0)
    return float(-(p * lg).sum(axis=-1).mean())


def sink_profile(records: Sequence[AttentionRecord], atol: float = 1e-6) -> SinkProfile:
    """Aggregate per (layer, head): mean max row mass, mean row entropy, and
    the Gini of per-key received mass."""
    groups: dict[tuple[int, int, str], list[np.ndarray]] = {}
    for r in records:
        rows = r.weights.sum(axis=-1)
        if not np.allclose(rows, 1.0, atol=atol):
            raise ConfigError(f"attention rows not stochastic (layer {r.layer} head {r.head})")
        groups.setdefault((r.layer, r.head, r.source), []).append(r.weights)
    entries = []
    for (layer, head, source) in sorted(groups):
        ws = groups[(layer, head, source)]
        max_mass = float(np.mean([w.max(axis=-1).mean() for w in ws]))
        entropy = float(np.mean([_row_entropy(w) for w in ws]))
        gini = float(np.mean([_gini(w.sum(axis=0)) for w in ws]))
        entries.append(SinkEntry(layer=layer, head=head, source=source,
                                 mean_max_row_mass=max_mass, mean_row_entropy=entropy,
                                 column_mass_gini=gini, num_records=len(ws)))
    return SinkProfile(entries=entries)


# ---------------------------------------------------------------------------
# whole-model evaluation

@dataclass
class EvalConfig:
    ks: tuple[int, ...] = (10, 50, 200)
    js_ks: tuple[int, ...] = (10, 50)
    max_eval_targets: int = 2000
    sink_items: int = 32
    seed: int = 0

    def clamp_ks(self, catalog_size: int) -> "EvalConfig":
        def cl(values):
            out = []
            for k in values:
                if k > catalog_size:
                    log.warning("K=%d exceeds catalog size %d; clamped", k, catalog_size)
                    k = catalog_size
                if k not in out:
                    out.append(k)
            return tuple(out)
        return EvalConfig(ks=cl(self.ks), js_ks=cl(self.js_ks),
                          max_eval_targets=self.max_eval_targets,
                          sink_items=self.sink_items, seed=self.seed)


@dataclass
class MetricsReport:
    variant: str
    seed: int
    step: int
    hr: dict[str, float]
    gauc: Optional[float]
    js: dict[str, float]
    sink_summary: dict[str, float]
    num_targets: int
    head_calls_during_eval: dict[str, int]
    js_definition: str = JS_DEFINITION
    sink_entries: list = field(default_factory=list)

    def __post_init__(self):
        for v in self.hr.values():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"HR out of [0,1]: {v}")
        for v in self.js.values():
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"JS out of [0,1]: {v}")
        if self.gauc is not None and not 0.0 <= self.gauc <= 1.0:
            raise ConfigError(f"gAUC out of [0,1]: {self.gauc}")

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    CSV_FIELDS = ("variant", "seed", "step", "hr@10", "hr@50", "hr@200",
                  "gauc", "js@10", "js@50", "sink_mean_max_row_mass",
                  "sink_mean_row_entropy", "sink_column_mass_gini", "num_targets")

    def csv_row(self) -> str:
        cells = [self.variant, str(self.seed), str(self.step)]
        for k in (10, 50, 200):
            cells.append(repr(self.hr[f"hr@{k}"]) if f"hr@{k}" in self.hr else "")
        cells.append("" if self.gauc is None else repr(self.gauc))
        for k in (10, 50):
            cells.append(repr(self.js[f"js@{k}"]) if f"js@{k}" in self.js else "")
        s = self.sink_summary
        cells += [repr(s.get("mean_max_row_mass", float("nan"))),
                  repr(s.get("mean_row_entropy", float("nan"))),
                  repr(s.get("column_mass_gini", float("nan"))),
                  str(self.num_targets)]
        return ",".join(cells)


def _eval_targets_capped(dataset: Dataset, cfg: EvalConfig) -> list[tuple[int, int]]:
    targets = dataset.split.eval_targets(dataset.sessions)
    if cfg.max_eval_targets and len(targets) > cfg.max_eval_targets:
        rng = derive_rng(cfg.seed, "eval-target-cap")
        picks = np.sort(rng.permutation(len(targets))[:cfg.max_eval_targets])
        targets = [targets[i] for i in picks]
    return targets


def compute_interest_embeddings(model: KarmaModel, dataset: Dataset,
                                targets: list[tuple[int, int]],
                                item_embeddings: np.ndarray,
                                batch: int = 256) -> np.ndarray:
    """h_t for each (session, step) target via embedding lookup + decoder."""
    out = np.zeros((len(targets), model.cfg.d), dtype=item_embeddings.dtype)
    max_seq = model.cfg.max_seq
    for lo in range(0, len(targets), batch):
        chunk = targets[lo:lo + batch]
        exs = [build_example(dataset, si, ti, max_seq) for si, ti in chunk]
        t_max = max(len(ex.history_ids) for ex in exs)
        hist = np.zeros((len(exs), t_max, model.cfg.d), dtype=item_embeddings.dtype)
        lengths = np.zeros(len(exs), dtype=np.int64)
        qids = np.zeros(len(exs), dtype=np.int64)
        for i, ex in enumerate(exs):
            lengths[i] = len(ex.history_ids)
            hist[i, :lengths[i]] = item_embeddings[ex.history_ids]
            qids[i] = ex.query_id
        h, _, _ = model.history_forward(Tensor(hist), lengths, qids)
        out[lo:lo + len(exs)] = h.data
    return out


def evaluate_model(model: KarmaModel, dataset: Dataset, cfg: EvalConfig,
                   *, variant: str = "", seed: int = 0, step: int = 0,
                   interest_override: Optional[Callable] = None) -> MetricsReport:
    """Retrieval metrics + sink diagnostics over the held-out targets.

    ``interest_override(h_base) -> ndarray`` substitutes generated embeddings
    for the decoder's own (the generator-comparison hook). Hard gate: the
    text/visual head call counters must not move during evaluation.
    """
    cfg = cfg.clamp_ks(len(dataset.catalog))
    before = dict(model.counters)

    E = model.encode_catalog(dataset.catalog.token_matrix)
    targets = _eval_targets_capped(dataset, cfg)
    if not targets:
        raise ConfigError("no eval targets in split")
    H = compute_interest_embeddings(model, dataset, targets, E)
    if interest_override is not None:
        H = interest_override(H)

    k_max = max(max(cfg.ks), max(cfg.js_ks))
    scores_full = H @ E.T
    runs = []
    for i, (si, ti) in enumerate(targets):
        ranked = retrieve_topk(H[i], E, k_max)
        runs.append(RetrievalRun(
            target_id=dataset.sessions[si].steps[ti].clicked_item_id,
            ranked_ids=ranked, scores=scores_full[i, ranked]))

    hr = {f"hr@{k}": hr_at_k(runs, k) for k in cfg.ks}
    terms = [dataset.catalog.terms(i) for i in range(len(dataset.catalog))]
    js = {f"js@{k}": js_at_k(runs, k, terms) for k in cfg.js_ks}

    by_session: dict[int, tuple[list, list]] = {}
    for i, (si, ti) in enumerate(targets):
        step_rec = dataset.sessions[si].steps[ti]
        pos, negs = by_session.setdefault(si, ([], []))
        pos.append(scores_full[i, step_rec.clicked_item_id])
        negs.extend(scores_full[i, j] for j in step_rec.exposed_unclicked_item_ids)
    g = gauc([(np.array(p), np.array(n)) for p, n in by_session.values()])

    rng = derive_rng(cfg.seed, "eval-sink-items")
    n_sink = min(cfg.sink_items, len(dataset.catalog))
    sink_ids = np.sort(rng.permutation(len(dataset.catalog))[:n_sink])
    records = model.capture_attention(item_tokens=dataset.catalog.token_matrix[sink_ids])
    profile = sink_profile(records)

    delta = {k: model.counters[k] - before[k] for k in ("text_head", "visual_head")}
    if any(delta.values()):
        raise ContractViolation(f"decoding heads invoked during eval: {delta}")

    return MetricsReport(variant=variant, seed=seed, step=step, hr=hr, gauc=g,
                         js=js, sink_summary=profile.summary(),
                         num_targets=len(targets),
                         head_calls_during_eval=delta,
                         sink_entries=[asdict(e) for e in profile.entries])


def write_report(report: MetricsReport, out_dir: Path, stem: str = "metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.json", "w") as f:
        json.dump(report.to_json(), f, sort_keys=True, indent=1)
        f.write("\n")
    with open(out_dir / f"{stem}.csv", "w") as f:
        f.write(",".join(MetricsReport.CSV_FIELDS) + "\n")
        f.write(report.csv_row() + "\n")


# ---------------------------------------------------------------------------
# embedding-generator comparison

@dataclass
class GeneratorCompareConfig:
    gen_steps: int = 1200
    batch_size: int = 64
    lr: float = 1e-3
    width: int = 256
    sampler_steps: int = 20
    max_train_examples: int = 20000
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)


GENERATORS = ("mse", "ddpm", "edm", "fm")


def _precompute_pairs(model: KarmaModel, dataset: Dataset, cfg: GeneratorCompareConfig):
    """(h_t, e_target) arrays over the train split under the frozen base."""
    E = model.encode_catalog(dataset.catalog.token_matrix)
    pool = dataset.split.train_examples(dataset.sessions)
    if len(pool) > cfg.max_train_examples:
        rng = derive_rng(cfg.seed, "gen-train-cap")
        picks = np.sort(rng.permutation(len(pool))[:cfg.max_train_examples])
        pool = [pool[i] for i in picks]
    H = compute_interest_embeddings(model, dataset, pool, E)
    tgt_ids = np.array([dataset.sessions[si].steps[ti].clicked_item_id
                        for si, ti in pool])
    return E, H, E[tgt_ids]


def train_generator_head(kind: str, H: np.ndarray, E_tgt: np.ndarray,
                         cfg: GeneratorCompareConfig) -> MlpHead:
    """Equal-budget supervised training of one generator head on fixed pairs."""
    if kind not in GENERATORS:
        raise ConfigError(f"unknown generator {kind!r}")
    from karma.diffcore import AdamW
    d = H.shape[1]
    if kind == "mse":
        head = MlpHead(0, d, d, width=cfg.width, time_emb_dim=0,
                       seed=cfg.seed)
    else:
        head = MlpHead(d, d, d, width=cfg.width, time_emb_dim=32, seed=cfg.seed)
    opt = AdamW(head.params, lr=cfg.lr, weight_decay=0.0)
    n = len(H)
    for step in range(cfg.gen_steps):
        rng = derive_rng(cfg.seed, f"gen-{kind}", step)
        idx = rng.integers(0, n, size=cfg.batch_size)
        h = Tensor(H[idx])
        v = Tensor(E_tgt[idx])
        with Tape() as tape:
            if kind == "mse":
                loss = ar_mse_loss(head(cond=h), v)
            elif kind == "ddpm":
                loss = ddpm_loss(head, v, h, rng, schedule=DEFAULT_SCHEDULE)
            elif kind == "edm":
                loss = edm_loss(head, v, h, rng)
            else:
                loss = flow_matching_loss(head, v, h, rng)
            tape.backward(loss)
        opt.step()
        opt.zero_grad()
    return head


def generate_embeddings(kind: str, head: MlpHead, H: np.ndarray,
                        cfg: GeneratorCompareConfig) -> np.ndarray:
    """One generated retrieval embedding per target, fixed rng per run."""
    rng = derive_rng(cfg.seed, f"gen-sample-{kind}")
    cond = Tensor(H)
    if kind == "mse":
        return head(cond=cond).data.copy()
    if kind == "ddpm":
        return ddpm_sample(head, cond, DEFAULT_SCHEDULE, cfg.sampler_steps, rng)
    if kind == "edm":
        return edm_sample_heun(head, cond, cfg.sampler_steps, rng)
    return fm_sample_euler(head, cond, cfg.sampler_steps, rng)


def compare_generators(dataset: Dataset, base_model: KarmaModel,
                       cfg: GeneratorCompareConfig, *, variant_prefix: str = "generator",
                       seed: int = 0, step: int = 0) -> dict[str, MetricsReport]:
    """Table of HR/JS metrics per generator under the identical retrieval
    protocol; the base model stays frozen throughout."""
    E, H_train, E_tgt = _precompute_pairs(base_model, dataset, cfg)
    reports = {}
    for kind in GENERATORS:
        head = train_generator_head(kind, H_train, E_tgt, cfg)
        override = lambda h_base, _k=kind, _head=head: generate_embeddings(_k, _head, h_base, cfg)
        reports[kind] = evaluate_model(base_model, dataset, cfg.eval,
                                       variant=f"{variant_prefix}:{kind}",
                                       seed=seed, step=step,
                                       interest_override=override)
    return reports
