"""Shared fixtures and the acceptance-line reporter."""

import numpy as np
import pytest

from karma.model import ModelConfig
from karma.synthdata import (
    Dataset, GeneratorConfig, gen_catalog, gen_sessions, split_chronological,
)

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_tiny_dataset(seed=0, **kw) -> Dataset:
    base = dict(num_topics=4, catalog_size=64, vocab_size=96, item_len=8,
                d_v=8, num_users=16, session_len_min=5, session_len_max=9,
                drift_prob=0.2, noise_rate=0.25, exposed_per_step=3,
                queries_per_topic=2, seed=seed)
    base.update(kw)
    cfg = GeneratorConfig(**base)
    cat = gen_catalog(cfg)
    sessions = gen_sessions(cat, cfg)
    return Dataset(catalog=cat, sessions=sessions,
                   split=split_chronological(sessions, 0.25))


def tiny_model_cfg(ds: Dataset, **kw) -> ModelConfig:
    g = ds.catalog.config
    base = dict(vocab_size=g.vocab_size, d=16, d_m=32, n_heads=2, n_enc_blocks=2,
                n_dec_blocks=2, n_text_blocks=1, max_seq=8, item_len=g.item_len,
                d_v=g.d_v, num_query_ids=g.num_query_ids, visual_width=32,
                time_emb_dim=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset() -> Dataset:
    return make_tiny_dataset()
