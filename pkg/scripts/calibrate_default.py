"""Calibration: default dataset + default budget karma run, eval snapshots."""
import json
import sys
import time

import numpy as np

from karma.evalkit import EvalConfig, evaluate_model
from karma.model import ModelConfig
from karma.synthdata import Dataset, GeneratorConfig, gen_catalog, gen_sessions, split_chronological
from karma.trainer import TrainConfig, run_training

t_start = time.perf_counter()
gcfg = GeneratorConfig()
cat = gen_catalog(gcfg)
sessions = gen_sessions(cat, gcfg)
ds = Dataset(catalog=cat, sessions=sessions, split=split_chronological(sessions, 0.2))
print(f"[{time.perf_counter()-t_start:7.1f}s] dataset ready", flush=True)

mcfg = ModelConfig(num_query_ids=gcfg.num_query_ids)
tcfg = TrainConfig(stage1_steps=1000, stage2_steps=2500, seed=0, variant="karma",
                   eval_every=500)
ecfg = EvalConfig(max_eval_targets=1000)

random_hr50 = 50 / len(cat)

def hook(step, model):
    rep = evaluate_model(model, ds, ecfg, variant="karma", seed=0, step=step)
    print(f"[{time.perf_counter()-t_start:7.1f}s] step {step}: "
          f"hr@50={rep.hr['hr@50']:.4f} ({rep.hr['hr@50']/random_hr50:.1f}x random) "
          f"hr@200={rep.hr['hr@200']:.4f} js@50={rep.js['js@50']:.4f} "
          f"gauc={rep.gauc:.4f} sinkmax={rep.sink_summary['mean_max_row_mass']:.4f}",
          flush=True)

losses = []
def on_step(stage, step, bd, opt, model):
    losses.append((stage, step, bd.total))
    if step % 250 == 0:
        print(f"[{time.perf_counter()-t_start:7.1f}s] {stage} {step}: total={bd.total:.4f} "
              f"act={bd.act:.4f} gen={bd.gen:.4f} recon={bd.recon:.4f}", flush=True)

res = run_training(ds, mcfg, tcfg, on_step=on_step, eval_hook=hook)
print(f"[{time.perf_counter()-t_start:7.1f}s] training done", flush=True)
rep = evaluate_model(res.model, ds, ecfg, variant="karma", seed=0, step=tcfg.stage2_steps)
print(json.dumps({"hr": rep.hr, "js": rep.js, "gauc": rep.gauc,
                  "sink": rep.sink_summary, "minutes": (time.perf_counter()-t_start)/60},
                 indent=1), flush=True)
