"""CLI: reproducible artifacts, exit codes, library equivalence."""

import json
import re

import numpy as np
import pytest

from karma.cli import EXIT_CONFIG, EXIT_OK, main
from karma.checkpoint import load_checkpoint
from karma.evalkit import EvalConfig, evaluate_model, sink_profile
from karma.model import AttentionRecord
from karma.synthdata import load_dataset

TINY = {
    "data": {"num_topics": 4, "catalog_size": 64, "vocab_size": 96, "item_len": 8,
             "d_v": 8, "num_users": 16, "session_len_min": 5, "session_len_max": 9,
             "exposed_per_step": 3, "queries_per_topic": 2, "seed": 0},
    "model": {"d": 16, "d_m": 32, "n_heads": 2, "n_enc_blocks": 2, "n_dec_blocks": 2,
              "n_text_blocks": 1, "max_seq": 8, "visual_width": 32, "time_emb_dim": 8},
    "train": {"stage1_steps": 15, "stage2_steps": 20, "batch_size": 8, "seed": 0},
    "eval": {"ks": [5, 10], "js_ks": [5], "max_eval_targets": 25, "sink_items": 4},
}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    data_dir = root / "data"
    rc = main(["gen-data", "--config", str(cfg_path), "--out", str(data_dir)])
    assert rc == EXIT_OK
    return {"root": root, "cfg": str(cfg_path), "data": str(data_dir)}


def test_gen_data_idempotent_and_stats(ws, capsys, tmp_path):
    out2 = tmp_path / "data2"
    rc = main(["gen-data", "--config", ws["cfg"], "--out", str(out2)])
    assert rc == EXIT_OK
    stats = capsys.readouterr().out
    assert "items=64" in stats
    for name in ("catalog.jsonl", "sessions.jsonl", "split_manifest.json",
                 "dataset_manifest.json"):
        a = (out2 / name).read_bytes()
        b = (ws["root"] / "data" / name).read_bytes()
        assert a == b, name


def test_gen_data_invalid_config_exit2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"noise_rate": 0.9}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_gen_data_unknown_field_exit2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": {"nope": 1}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def trained(ws, tmp_path_factory):
    out = tmp_path_factory.mktemp("train-karma")
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(out), "--variant", "karma"])
    assert rc == EXIT_OK
    return out


def test_train_writes_logs_and_checkpoint(trained):
    lines = (trained / "train_log.csv").read_text().strip().splitlines()
    assert lines[0] == "step,act,gen,recon,img,total"
    assert len(lines) == 1 + TINY["train"]["stage2_steps"]  # one row per step
    steps = [int(l.split(",")[0]) for l in lines[1:]]
    assert steps == list(range(TINY["train"]["stage2_steps"]))
    warm = (trained / "warmup_log.csv").read_text().strip().splitlines()
    assert len(warm) == 1 + TINY["train"]["stage1_steps"]
    assert (trained / "checkpoint_final.karma").exists()
    echoed = json.loads((trained / "config.json").read_text())
    assert echoed["train"]["variant"] == "karma"


def _param_hash_from(out_capture: str) -> str:
    m = re.search(r"param_hash=([0-9a-f]{64})", out_capture)
    assert m, out_capture
    return m.group(1)


def test_action_only_equals_zero_lambda_karma(ws, tmp_path, capsys):
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "a"), "--variant", "action-only"])
    assert rc == EXIT_OK
    h1 = _param_hash_from(capsys.readouterr().out)
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "b"), "--variant", "karma",
               "--lambda-dec", "0"])
    assert rc == EXIT_OK
    h2 = _param_hash_from(capsys.readouterr().out)
    assert h1 == h2


def test_train_resume_matches_straight(ws, tmp_path, capsys):
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "full"), "--variant", "task2"])
    assert rc == EXIT_OK
    full_hash = _param_hash_from(capsys.readouterr().out)

    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "half"), "--variant", "task2",
               "--stage2-steps", "10", "--checkpoint-every", "10"])
    assert rc == EXIT_OK
    capsys.readouterr()
    mid = tmp_path / "half" / "checkpoints" / "joint_000010.karma"
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "resumed"), "--variant", "task2",
               "--resume", str(mid)])
    assert rc == EXIT_OK
    assert _param_hash_from(capsys.readouterr().out) == full_hash


def test_train_rejects_bad_variant(ws, tmp_path, capsys):
    rc = main(["train", "--data", ws["data"], "--config", ws["cfg"],
               "--out", str(tmp_path / "x"), "--variant", "karma",
               "--lambda-dec", "-1"])
    assert rc == EXIT_CONFIG


def test_eval_matches_library_and_prints_contract(ws, trained, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["eval", "--ckpt", str(trained / "checkpoint_final.karma"),
               "--data", ws["data"], "--config", ws["cfg"], "--out", str(out)])
    assert rc == EXIT_OK
    printed = capsys.readouterr().out
    assert "text_head_calls=0" in printed and "visual_head_calls=0" in printed

    report = json.loads((out / "metrics.json").read_text())
    ck = load_checkpoint(trained / "checkpoint_final.karma")
    dataset = load_dataset(ws["data"])
    lib = evaluate_model(ck.build_model(), dataset,
                         EvalConfig(ks=(5, 10), js_ks=(5,), max_eval_targets=25,
                                    sink_items=4),
                         variant="karma", seed=0, step=ck.step)
    assert report["hr"] == lib.hr
    assert report["js"] == lib.js
    assert report["gauc"] == lib.gauc


def test_eval_idempotent(ws, trained, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        rc = main(["eval", "--ckpt", str(trained / "checkpoint_final.karma"),
                   "--data", ws["data"], "--config", ws["cfg"], "--out", str(out)])
        assert rc == EXIT_OK
        outs.append((out / "metrics.json").read_bytes())
    assert outs[0] == outs[1]


def test_eval_wrong_shape_checkpoint_exit2(ws, trained, tmp_path):
    ck = load_checkpoint(trained / "checkpoint_final.karma")
    ck_path = trained / "checkpoint_final.karma"
    raw = bytearray(ck_path.read_bytes())
    # tamper a blob shape in the header
    hdr_len = int.from_bytes(raw[12:16], "little")
    hdr = raw[16:16 + hdr_len].decode()
    hdr2 = hdr.replace('"shape":[16,32]', '"shape":[16,31]', 1)
    if hdr == hdr2:
        pytest.skip("no matching shape token")
    bad = tmp_path / "bad.karma"
    bad.write_bytes(raw[:12] + len(hdr2).to_bytes(4, "little") + hdr2.encode()
                    + raw[16 + hdr_len:])
    rc = main(["eval", "--ckpt", str(bad), "--data", ws["data"],
               "--config", ws["cfg"], "--out", str(tmp_path / "o")])
    assert rc == EXIT_CONFIG


def test_diagnose_attention_outputs(ws, trained, tmp_path):
    out = tmp_path / "diag"
    rc = main(["diagnose-attention", "--ckpt", str(trained / "checkpoint_final.karma"),
               "--data", ws["data"], "--config", ws["cfg"], "--out", str(out),
               "--items", "3"])
    assert rc == EXIT_OK
    profile = json.loads((out / "sink_profile.json").read_text())
    # one entry per (layer, head) of the item encoder
    pairs = {(e["layer"], e["head"]) for e in profile["entries"]}
    assert pairs == {(l, h) for l in range(2) for h in range(2)}

    # PGM dims equal the item sequence length
    pgms = sorted((out / "pgm").glob("*.pgm"))
    assert pgms
    head = pgms[0].read_text().splitlines()
    assert head[0] == "P2" and head[1] == "8 8"

    # profile equals recomputation on the dumped raw records
    records = [AttentionRecord.from_json(d)
               for d in json.loads((out / "records.json").read_text())]
    again = sink_profile(records)
    for e_file, e_re in zip(profile["entries"], [vars(e) for e in again.entries]):
        for key in ("mean_max_row_mass", "mean_row_entropy", "column_mass_gini"):
            assert e_file[key] == pytest.approx(e_re[key], abs=1e-12)


def test_ablation_table1_structure_and_self_delta(ws, tmp_path, capsys):
    out = tmp_path / "abl"
    rc = main(["ablation", "--preset", "table1", "--data", ws["data"],
               "--config", ws["cfg"], "--out", str(out), "--seeds", "0,1,2",
               "--stage1-steps", "6", "--stage2-steps", "8"])
    assert rc == EXIT_OK
    report = json.loads((out / "ablation_report.json").read_text())
    assert set(report["medians_and_deltas"]) == {
        "action-only", "task1", "task2", "karma", "karma-mm"}
    base = report["medians_and_deltas"]["action-only"]
    for key, val in base.items():
        if key.startswith("delta_"):
            assert val == 0.0
    assert report["sink_direction"] is not None
    assert (out / "ablation_table.csv").exists()


def test_ablation_requires_three_seeds(ws, tmp_path):
    rc = main(["ablation", "--preset", "table1", "--data", ws["data"],
               "--config", ws["cfg"], "--out", str(tmp_path / "x"),
               "--seeds", "0,1"])
    assert rc == EXIT_CONFIG


def test_train_numeric_failure_exit3(ws, tmp_path):
    from karma.cli import EXIT_NUMERIC
    cfg = dict(TINY)
    cfg["train"] = dict(TINY["train"], lr=1e12, stage1_steps=0, stage2_steps=4)
    cfg_path = tmp_path / "blowup.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["train", "--data", ws["data"], "--config", str(cfg_path),
               "--out", str(tmp_path / "x"), "--variant", "karma"])
    assert rc == EXIT_NUMERIC


def test_ablation_partial_failure_exit4(ws, tmp_path, monkeypatch):
    from karma.cli import EXIT_PARTIAL
    import karma.cli as cli_mod
    real = cli_mod.evaluate_model
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            from karma.errors import NumericError
            raise NumericError("injected cell failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(cli_mod, "evaluate_model", flaky)
    out = tmp_path / "abl-partial"
    rc = main(["ablation", "--preset", "table1", "--data", ws["data"],
               "--config", ws["cfg"], "--out", str(out), "--seeds", "0,1,2",
               "--stage1-steps", "3", "--stage2-steps", "4"])
    assert rc == EXIT_PARTIAL
    report = json.loads((out / "ablation_report.json").read_text())
    assert report["failed_cells"]


def test_ablation_table3_structure(ws, tmp_path):
    out = tmp_path / "abl3"
    rc = main(["ablation", "--preset", "table3", "--data", ws["data"],
               "--config", ws["cfg"], "--out", str(out), "--seeds", "0,1,2",
               "--stage1-steps", "5", "--stage2-steps", "6"])
    assert rc == EXIT_OK
    report = json.loads((out / "ablation_report.json").read_text())
    assert set(report["medians_and_deltas"]) == {
        "karma-base", "generator:mse", "generator:ddpm", "generator:edm",
        "generator:fm"}
    base = report["medians_and_deltas"]["karma-base"]
    assert all(v == 0.0 for k, v in base.items() if k.startswith("delta_"))
