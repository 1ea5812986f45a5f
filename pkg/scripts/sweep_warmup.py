"""Held-out reconstruction CE vs warm-up budget and conditioning jitter."""
import sys
import time

import numpy as np

from karma.model import KarmaModel, ModelConfig
from karma.synthdata import Dataset, GeneratorConfig, gen_catalog, gen_sessions, split_chronological
from karma.trainer import TrainConfig, warmup_stage, warmup_holdout_ids, item_recon_ce

jitters = [float(x) for x in sys.argv[1].split(",")] if len(sys.argv) > 1 else [0.1]
dropouts = [float(x) for x in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0.0]

g = GeneratorConfig()
cat = gen_catalog(g)
sessions = gen_sessions(cat, g)
ds = Dataset(catalog=cat, sessions=sessions, split=split_chronological(sessions, 0.2))
mcfg = ModelConfig(num_query_ids=g.num_query_ids)

for jit in jitters:
  for drop in dropouts:
    cfg = TrainConfig(stage1_steps=1000, seed=0, warmup_jitter=jit,
                      warmup_token_dropout=drop)
    model = KarmaModel(mcfg, seed=0)
    _, held = warmup_holdout_ids(len(cat), cfg)
    held_tok = cat.token_matrix[held]
    base = item_recon_ce(model, held_tok)
    t0 = time.perf_counter()
    marks = {}

    def on_step(stage, step, bd, opt, m):
        if (step + 1) % 250 == 0:
            marks[step + 1] = (item_recon_ce(m, held_tok), bd.recon)

    warmup_stage(ds, model, cfg, on_step=on_step)
    print(f"jitter={jit} dropout={drop}: untrained={base:.3f}", flush=True)
    for step, (ce, tr) in sorted(marks.items()):
        print(f"  step {step}: heldout={ce:.3f} (ratio {ce/base:.3f}) train={tr:.3f}",
              flush=True)
