"""Directional-ordering sweep: variants x seeds on the acceptance-scale setup."""
import json
import sys
import time

import numpy as np

from karma.evalkit import EvalConfig, evaluate_model
from karma.model import ModelConfig
from karma.synthdata import Dataset, GeneratorConfig, gen_catalog, gen_sessions, split_chronological
from karma.trainer import TrainConfig, run_training

STAGE1 = int(sys.argv[1]) if len(sys.argv) > 1 else 300
STAGE2 = int(sys.argv[2]) if len(sys.argv) > 2 else 500
SEEDS = [0, 1, 2]
VARIANTS = ["action-only", "task1", "task2", "karma"]

gcfg = GeneratorConfig(catalog_size=1000, num_users=240, session_len_min=8,
                       session_len_max=16, seed=11)
cat = gen_catalog(gcfg)
sessions = gen_sessions(cat, gcfg)
ds = Dataset(catalog=cat, sessions=sessions, split=split_chronological(sessions, 0.2))
mcfg = ModelConfig(d=32, d_m=64, n_heads=4, n_enc_blocks=2, n_dec_blocks=2,
                   n_text_blocks=2, num_query_ids=gcfg.num_query_ids)
ecfg = EvalConfig(ks=(10, 50, 200), js_ks=(10, 50), max_eval_targets=700, sink_items=24)

results = {}
t00 = time.perf_counter()
for variant in VARIANTS:
    for seed in SEEDS:
        t0 = time.perf_counter()
        tcfg = TrainConfig(stage1_steps=STAGE1, stage2_steps=STAGE2, seed=seed,
                           variant=variant)
        res = run_training(ds, mcfg, tcfg)
        rep = evaluate_model(res.model, ds, ecfg, variant=variant, seed=seed,
                             step=STAGE2)
        results[(variant, seed)] = rep
        print(f"{variant} seed{seed}: hr@200={rep.hr['hr@200']:.4f} "
              f"hr@50={rep.hr['hr@50']:.4f} js@50={rep.js['js@50']:.4f} "
              f"gauc={rep.gauc:.4f} sink={rep.sink_summary['mean_max_row_mass']:.4f} "
              f"({time.perf_counter()-t0:.0f}s)", flush=True)

print(f"\ntotal {(time.perf_counter()-t00)/60:.1f} min; medians over seeds:")
meds = {}
for variant in VARIANTS:
    reps = [results[(variant, s)] for s in SEEDS]
    meds[variant] = {
        "hr@200": float(np.median([r.hr["hr@200"] for r in reps])),
        "hr@50": float(np.median([r.hr["hr@50"] for r in reps])),
        "js@50": float(np.median([r.js["js@50"] for r in reps])),
        "sink": float(np.median([r.sink_summary["mean_max_row_mass"] for r in reps])),
    }
    print(variant, json.dumps(meds[variant]), flush=True)

print("\nchecks:")
print("karma > action-only hr@200:", meds["karma"]["hr@200"] > meds["action-only"]["hr@200"])
print("karma > action-only js@50:", meds["karma"]["js@50"] > meds["action-only"]["js@50"])
print("task2 > task1 hr@200:", meds["task2"]["hr@200"] > meds["task1"]["hr@200"])
print("sink action-only >= karma:", meds["action-only"]["sink"] >= meds["karma"]["sink"])
