"""Synthetic multimodal catalog and user sessions with known latent topics.

Items carry a text token sequence (mostly drawn from a topic-specific
vocabulary), a unit-norm visual feature near the topic centroid, and the
latent topic id itself, which exists only so semantic-fidelity metrics and
retrieval quality have a ground-truth oracle. Users follow a latent intent
topic with Markov drift; every step records the clicked item and the
exposed-but-unclicked impressions used downstream as hard negatives.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from karma.errors import ConfigError
from karma.rngs import derive_rng

SCHEMA_VERSION = 1


@dataclass
class GeneratorConfig:
    num_topics: int = 8
    catalog_size: int = 2000
    vocab_size: int = 512
    item_len: int = 12
    d_v: int = 32
    num_users: int = 500
    session_len_min: int = 8
    session_len_max: int = 20
    drift_prob: float = 0.15
    noise_rate: float = 0.3
    exposed_per_step: int = 4
    queries_per_topic: int = 4
    shared_vocab_frac: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        positive = ["num_topics", "catalog_size", "vocab_size", "item_len", "d_v",
                    "num_users", "session_len_min", "session_len_max",
                    "exposed_per_step", "queries_per_topic"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.drift_prob <= 1.0:
            raise ConfigError("drift_prob must be in [0, 1]")
        if not 0.0 <= self.noise_rate <= 0.4:
            raise ConfigError("noise_rate must be in [0, 0.4] so topic tokens stay >= 60%")
        if self.session_len_min < 2 or self.session_len_max < self.session_len_min:
            raise ConfigError("need 2 <= session_len_min <= session_len_max")
        if self.topic_vocab_size < 4:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_topics} topics"
            )
        if self.catalog_size < self.num_topics * 2:
            raise ConfigError("catalog_size must allow >= 2 items per topic")

    @property
    def shared_vocab_size(self) -> int:
        return int(self.vocab_size * self.shared_vocab_frac)

    @property
    def topic_vocab_size(self) -> int:
        return (self.vocab_size - self.shared_vocab_size) // self.num_topics

    @property
    def num_query_ids(self) -> int:
        return self.num_topics * self.queries_per_topic


@dataclass
class Item:
    item_id: int
    text_tokens: list[int]
    visual_feature: np.ndarray
    topic_id: int


@dataclass
class SessionStep:
    query_id: int
    clicked_item_id: int
    exposed_unclicked_item_ids: list[int]


@dataclass
class Session:
    user_id: int
    steps: list[SessionStep]


@dataclass
class Catalog:
    items: list[Item]
    config: GeneratorConfig
    topic_centroids: np.ndarray  # (num_topics, d_v), unit rows

    def __post_init__(self):
        self._by_topic: dict[int, list[int]] = {}
        for it in self.items:
            self._by_topic.setdefault(it.topic_id, []).append(it.item_id)
        self._token_matrix = np.array([it.text_tokens for it in self.items], dtype=np.int64)
        self._visual_matrix = np.stack([it.visual_feature for it in self.items])
        self._terms = [frozenset(it.text_tokens) for it in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def items_of_topic(self, topic: int) -> list[int]:
        return self._by_topic[topic]

    @property
    def token_matrix(self) -> np.ndarray:
        return self._token_matrix

    @property
    def visual_matrix(self) -> np.ndarray:
        return self._visual_matrix

    def terms(self, item_id: int) -> frozenset:
        return self._terms[item_id]

    def topic_of(self, item_id: int) -> int:
        return self.items[item_id].topic_id


def item_terms(item: Item) -> frozenset:
    """Unique token ids of the item text; the unit of Jaccard overlap."""
    return frozenset(item.text_tokens)


def gen_catalog(cfg: GeneratorConfig) -> Catalog:
    """Deterministic catalog for (config, seed).

    Per item, exactly round((1 - noise_rate) * item_len) tokens come from the
    topic vocabulary and the rest from the shared pool, then the order is
    shuffled, so the >= 60% topic-token guarantee holds item by item.
    """
    cfg.validate()
    rng = derive_rng(cfg.seed, "catalog")
    centroids = rng.normal(size=(cfg.num_topics, cfg.d_v))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    tvs = cfg.topic_vocab_size
    shared_start = cfg.num_topics * tvs
    shared_size = cfg.vocab_size - shared_start
    n_topic_tokens = int(round((1.0 - cfg.noise_rate) * cfg.item_len))

    items = []
    for item_id in range(cfg.catalog_size):
        topic = item_id % cfg.num_topics
        topic_tokens = rng.integers(topic * tvs, (topic + 1) * tvs, size=n_topic_tokens)
        other = rng.integers(shared_start, shared_start + shared_size,
                             size=cfg.item_len - n_topic_tokens)
        tokens = np.concatenate([topic_tokens, other])
        rng.shuffle(tokens)
        vis = centroids[topic] + rng.normal(size=cfg.d_v) * cfg.noise_rate
        vis = vis / np.linalg.norm(vis)
        items.append(Item(item_id=item_id, text_tokens=[int(t) for t in tokens],
                          visual_feature=vis.astype(np.float64), topic_id=topic))
    return Catalog(items=items, config=cfg, topic_centroids=centroids)


def _sample_query(topic: int, cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    if rng.random() < cfg.noise_rate:
        return int(rng.integers(0, cfg.num_query_ids))
    return topic * cfg.queries_per_topic + int(rng.integers(0, cfg.queries_per_topic))


def _sample_exposed(catalog: Catalog, topic: int, clicked: int,
                    cfg: GeneratorConfig, rng: np.random.Generator) -> list[int]:
    chosen: list[int] = []
    near = [(topic - 1) % cfg.num_topics, (topic + 1) % cfg.num_topics]
    while len(chosen) < cfg.exposed_per_step:
        u = rng.random()
        if u < 0.5:
            pool = catalog.items_of_topic(topic)
        elif u < 0.75:
            pool = catalog.items_of_topic(near[int(rng.integers(0, 2))])
        else:
            pool = None
        cand = int(rng.integers(0, len(catalog))) if pool is None else pool[int(rng.integers(0, len(pool)))]
        if cand != clicked and cand not in chosen:
            chosen.append(cand)
    return chosen


def gen_sessions(catalog: Catalog, cfg: GeneratorConfig) -> list[Session]:
    """User sessions: latent intent topic with Markov drift.

    Clicks come from the current intent topic; exposed-unclicked impressions
    are mostly same-topic (hard) or ring-adjacent, plus a uniform easy tail.
    """
    cfg.validate()
    sessions = []
    for user_id in range(cfg.num_users):
        rng = derive_rng(cfg.seed, "session", user_id)
        n_steps = int(rng.integers(cfg.session_len_min, cfg.session_len_max + 1))
        topic = int(rng.integers(0, cfg.num_topics))
        steps = []
        for _ in range(n_steps):
            if rng.random() < cfg.drift_prob and cfg.num_topics > 1:
                shift = int(rng.integers(1, cfg.num_topics))
                topic = (topic + shift) % cfg.num_topics
            pool = catalog.items_of_topic(topic)
            clicked = pool[int(rng.integers(0, len(pool)))]
            steps.append(SessionStep(
                query_id=_sample_query(topic, cfg, rng),
                clicked_item_id=clicked,
                exposed_unclicked_item_ids=_sample_exposed(catalog, topic, clicked, cfg, rng),
            ))
        sessions.append(Session(user_id=user_id, steps=steps))
    return sessions


# ---------------------------------------------------------------------------
# chronological split

@dataclass
class SplitEntry:
    user_id: int
    num_steps: int
    eval_start: int  # step indices >= eval_start are eval targets


@dataclass
class Split:
    holdout_fraction: float
    entries: list[SplitEntry]

    def eval_targets(self, sessions: list[Session]) -> list[tuple[int, int]]:
        """(session index, step index) pairs for held-out predictions."""
        out = []
        for si, entry in enumerate(self.entries):
            for t in range(entry.eval_start, entry.num_steps):
                out.append((si, t))
        return out

    def train_examples(self, sessions: list[Session]) -> list[tuple[int, int]]:
        """(session index, step index) pairs usable as training targets.

        Every step t >= 1 whose full prefix lies in the train region.
        """
        out = []
        for si, entry in enumerate(self.entries):
            for t in range(1, entry.eval_start):
                out.append((si, t))
        return out


def split_chronological(sessions: list[Session], holdout_fraction: float) -> Split:
    """Last ceil(fraction * steps) steps of each session become eval targets.

    Eval histories may include earlier (train-region) steps. At least one
    step always remains as history.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must be in (0, 1)")
    entries = []
    for s in sessions:
        n = len(s.steps)
        if n < 2:
            raise ConfigError(f"session for user {s.user_id} has fewer than 2 steps")
        n_eval = min(math.ceil(holdout_fraction * n), n - 1)
        entries.append(SplitEntry(user_id=s.user_id, num_steps=n, eval_start=n - n_eval))
    return Split(holdout_fraction=holdout_fraction, entries=entries)


# ---------------------------------------------------------------------------
# serialization (JSONL, one record per line; manifest carries schema version)

def save_dataset(out_dir: Path, catalog: Catalog, sessions: list[Session],
                 split: Split) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "catalog.jsonl", "w") as f:
        for it in catalog.items:
            f.write(json.dumps({
                "item_id": it.item_id,
                "text_tokens": it.text_tokens,
                "visual_feature": [float(x) for x in it.visual_feature],
                "topic_id": it.topic_id,
            }, sort_keys=True) + "\n")
    with open(out_dir / "sessions.jsonl", "w") as f:
        for s in sessions:
            f.write(json.dumps({
                "user_id": s.user_id,
                "steps": [{
                    "query_id": st.query_id,
                    "clicked_item_id": st.clicked_item_id,
                    "exposed_unclicked_item_ids": st.exposed_unclicked_item_ids,
                } for st in s.steps],
            }, sort_keys=True) + "\n")
    with open(out_dir / "split_manifest.json", "w") as f:
        json.dump({
            "schema_version": SCHEMA_VERSION,
            "holdout_fraction": split.holdout_fraction,
            "entries": [asdict(e) for e in split.entries],
        }, f, sort_keys=True, indent=1)
        f.write("\n")
    with open(out_dir / "dataset_manifest.json", "w") as f:
        json.dump({
            "schema_version": SCHEMA_VERSION,
            "generator_config": asdict(catalog.config),
            "num_items": len(catalog),
            "num_sessions": len(sessions),
            "num_steps": sum(len(s.steps) for s in sessions),
            "num_query_ids": catalog.config.num_query_ids,
        }, f, sort_keys=True, indent=1)
        f.write("\n")


@dataclass
class Dataset:
    catalog: Catalog
    sessions: list[Session]
    split: Split
    manifest: dict = field(default_factory=dict)


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    with open(data_dir / "dataset_manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"dataset schema version {manifest.get('schema_version')} "
                          f"!= expected {SCHEMA_VERSION}")
    cfg = GeneratorConfig(**manifest["generator_config"])
    items = []
    with open(data_dir / "catalog.jsonl") as f:
        for line in f:
            d = json.loads(line)
            items.append(Item(item_id=d["item_id"], text_tokens=d["text_tokens"],
                              visual_feature=np.array(d["visual_feature"]),
                              topic_id=d["topic_id"]))
    rng = derive_rng(cfg.seed, "catalog")
    centroids = rng.normal(size=(cfg.num_topics, cfg.d_v))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    catalog = Catalog(items=items, config=cfg, topic_centroids=centroids)
    sessions = []
    with open(data_dir / "sessions.jsonl") as f:
        for line in f:
            d = json.loads(line)
            sessions.append(Session(user_id=d["user_id"], steps=[
                SessionStep(query_id=st["query_id"],
                            clicked_item_id=st["clicked_item_id"],
                            exposed_unclicked_item_ids=st["exposed_unclicked_item_ids"])
                for st in d["steps"]]))
    with open(data_dir / "split_manifest.json") as f:
        sp = json.load(f)
    split = Split(holdout_fraction=sp["holdout_fraction"],
                  entries=[SplitEntry(**e) for e in sp["entries"]])
    return Dataset(catalog=catalog, sessions=sessions, split=split, manifest=manifest)


# JSON schemas for the documented JSONL record shapes (used by tests/tools).
CATALOG_RECORD_SCHEMA = {
    "type": "object",
    "required": ["item_id", "text_tokens", "visual_feature", "topic_id"],
    "additionalProperties": False,
    "properties": {
        "item_id": {"type": "integer", "minimum": 0},
        "text_tokens": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "visual_feature": {"type": "array", "items": {"type": "number"}},
        "topic_id": {"type": "integer", "minimum": 0},
    },
}

SESSION_RECORD_SCHEMA = {
    "type": "object",
    "required": ["user_id", "steps"],
    "additionalProperties": False,
    "properties": {
        "user_id": {"type": "integer", "minimum": 0},
        "steps": {
            "type": "array",
            "minItems": 2,
            "items": {
                "type": "object",
                "required": ["query_id", "clicked_item_id", "exposed_unclicked_item_ids"],
                "additionalProperties": False,
                "properties": {
                    "query_id": {"type": "integer", "minimum": 0},
                    "clicked_item_id": {"type": "integer", "minimum": 0},
                    "exposed_unclicked_item_ids": {
                        "type": "array", "minItems": 1,
                        "items": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}
