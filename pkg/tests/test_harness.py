import json

import numpy as np
import pytest

from surginstruct.cli import main
from surginstruct.config import DESK, load_config, full_config, resolve
from surginstruct.experiment import REGIMES, StageError, run_experiment, write_report
from surginstruct.io import load_checkpoint, read_jsonl
from surginstruct.metrics import CiderD
from surginstruct.pipeline import build_model, synthetic_corpus

from helpers import tiny_run_config


class TestConfig:
    def test_every_scaled_value_annotated(self):
        for section in ("transformer", "train"):
            for key in ("d_model", "n_heads", "n_enc_blocks", "n_dec_blocks", "d_ff") if section == "transformer" \
                    else ("epochs_xe", "epochs_scst", "batch_size", "peak_lr_xe", "warmup_steps", "lr_scst"):
                assert "paper_value" in DESK[section][key]

    def test_full_scale_values(self):
        p = resolve(full_config())
        assert p["transformer"]["d_model"] == 512 and p["transformer"]["n_heads"] == 8
        assert p["transformer"]["n_enc_blocks"] == p["transformer"]["n_dec_blocks"] == 6
        assert p["train"]["batch_size"] == 5 and p["train"]["warmup_steps"] == 20000
        assert p["train"]["peak_lr_xe"] == 3e-4 and p["train"]["lr_scst"] == 1e-5
        assert p["train"]["epochs_xe"] == p["train"]["epochs_scst"] == 30
        assert (p["data"]["n_regions"], p["data"]["feature_dim"]) == (196, 2048)
        assert p["lstm"]["hidden"] == 512

    def test_override_and_unknown_section(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"train": {"epochs_xe": 3}}))
        c = load_config(f)
        assert c["train"]["epochs_xe"] == 3 and c["train"]["batch_size"] == 5
        f.write_text(json.dumps({"trian": {}}))
        with pytest.raises(ValueError, match="unknown"):
            load_config(f)

    def test_shipped_config_files_match(self):
        from pathlib import Path
        root = Path(__file__).resolve().parents[1] / "configs"
        assert load_config(root / "desk.json") == load_config()
        assert load_config(root / "full.json") == resolve(full_config())


class TestExperiment:
    def test_regime_list(self):
        assert REGIMES == ("LSTM", "LSTM+rl", "LSTM+attn", "LSTM+attn+rl", "Transformer", "Transformer+rl")

    def test_rows_deterministic_and_shaped(self, tmp_path):
        cfg = tiny_run_config(n=50)
        a = run_experiment(cfg, 0, ("Transformer", "Transformer+rl", "LSTM"))
        b = run_experiment(cfg, 0, ("Transformer", "Transformer+rl", "LSTM"))
        assert list(a.results) == ["LSTM", "Transformer", "Transformer+rl"]
        for r in a.results:
            assert a.row(r) == b.row(r)
            assert a.results[r].test.to_dict() == b.results[r].test.to_dict()
            assert a.row(r)["S"] is None
            assert all(isinstance(a.row(r)[c], float) for c in ("B1", "B2", "B3", "B4", "C", "M", "R"))
        paths = write_report(a, tmp_path)
        lines = (tmp_path / "table.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["regime", "B1", "B2", "B3", "B4", "C", "M", "R", "S", "val_C"]
        assert all(l.split("\t")[8] == "null" for l in lines[1:])
        for f in paths["figures"]:
            assert open(f, "rb").read(8) == b"\x89PNG\r\n\x1a\n"

    def test_unknown_regime(self):
        with pytest.raises(ValueError, match="unknown regime"):
            run_experiment(tiny_run_config(n=20), 0, ("GRU",))

    def test_stage_failure_names_stage(self):
        cfg = tiny_run_config(n=30)
        cfg["transformer"]["n_heads"] = 3
        with pytest.raises(StageError, match="Transformer/build"):
            run_experiment(cfg, 0, ("Transformer",))


def test_reward_and_evaluation_share_one_scorer():
    cfg = tiny_run_config(n=40)
    corpus = synthetic_corpus(cfg["data"], 0)
    scorer = CiderD(corpus.train.refs)
    from surginstruct.training import cider_reward, evaluate_model
    m = build_model("transformer", cfg, len(corpus.vocab), 0)
    rep, hyps = evaluate_model(m, corpus.val, corpus.vocab, scorer)
    reward = cider_reward(scorer)
    for h, r, row in zip(hyps, corpus.val.refs, rep.per_sentence):
        assert reward(h, r) == row["cider"]


class TestCli:
    def test_full_chain(self, tmp_path, capsys):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({
            "data": {"n": 40, "n_regions": 4, "feature_dim": 14, "min_count": 1},
            "transformer": {"d_model": 8, "n_heads": 2, "n_enc_blocks": 1, "n_dec_blocks": 1, "d_ff": 16},
            "train": {"epochs_xe": 1, "epochs_scst": 1}}))
        c = ["--config", str(cfgp), "--seed", "3"]
        syn, pre, voc, xe, sc, gen, ev = (tmp_path / x for x in ("syn", "pre", "voc", "xe", "sc", "gen", "ev"))
        assert main(["synth", *c, "--out", str(syn)]) == 0
        assert len(read_jsonl(syn / "captions.jsonl")) == 40
        assert main(["preprocess", *c, "--out", str(pre), "--captions", str(syn / "captions.jsonl")]) == 0
        counts = json.loads((pre / "counts.json").read_text())
        assert counts["train"] + counts["val"] + counts["test"] == 40
        assert main(["build-vocab", *c, "--out", str(voc), "--train", str(pre / "train.jsonl")]) == 0
        v = ["--data", str(pre), "--vocab", str(voc / "vocab.txt")]
        assert main(["train-xe", *c, "--out", str(xe), *v]) == 0
        assert main(["train-scst", *c, "--out", str(sc), *v, "--checkpoint", str(xe / "xe_last.ckpt")]) == 0
        assert load_checkpoint(sc / "scst_last.ckpt")[3]["phase"] == "scst"
        assert main(["generate", *c, "--out", str(gen), "--checkpoint", str(sc / "scst_last.ckpt"),
                     "--data", str(pre)]) == 0
        rows = read_jsonl(gen / "captions.jsonl")
        assert set(rows[0]) == {"id", "caption", "score"}
        capsys.readouterr()
        assert main(["evaluate", *c, "--out", str(ev), "--hyps", str(gen / "captions.jsonl"),
                     "--refs", str(pre / "test.jsonl")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].split("\t") == ["B1", "B2", "B3", "B4", "C", "M", "R", "S"]
        assert out[1].split("\t")[-1] == "null"
        rep = json.loads((ev / "report.json").read_text())
        assert rep["spice"] is None and len(rep["per_sentence"]) == counts["test"]
        for d in (syn, pre, voc, xe, sc, gen, ev):
            man = json.loads((d / "manifest.json").read_text())
            assert man["seed"] == 3 and man["outputs"]

    def test_same_seed_same_outputs(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"data": {"n": 12, "n_regions": 4, "feature_dim": 14}}))
        for d in ("a", "b"):
            assert main(["synth", "--config", str(cfgp), "--seed", "5", "--out", str(tmp_path / d)]) == 0
        ma = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
        mb = json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]
        assert ma == mb

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({
            "data": {"n": 30, "n_regions": 4, "feature_dim": 14, "min_count": 1},
            "transformer": {"d_model": 8, "n_heads": 2, "n_enc_blocks": 1, "n_dec_blocks": 1, "d_ff": 16},
            "train": {"epochs_xe": 2}}))
        c = ["--config", str(cfgp), "--seed", "1"]
        main(["synth", *c, "--out", str(tmp_path / "s")])
        main(["preprocess", *c, "--out", str(tmp_path / "p"), "--captions", str(tmp_path / "s" / "captions.jsonl")])
        main(["build-vocab", *c, "--out", str(tmp_path / "p"), "--train", str(tmp_path / "p" / "train.jsonl")])
        d = ["--data", str(tmp_path / "p")]
        assert main(["train-xe", *c, *d, "--out", str(tmp_path / "full")]) == 0
        assert main(["train-xe", *c, *d, "--out", str(tmp_path / "half"), "--epochs", "1"]) == 0
        assert main(["train-xe", *c, *d, "--out", str(tmp_path / "rest"),
                     "--resume", str(tmp_path / "half" / "xe_epoch001.ckpt")]) == 0
        full = (tmp_path / "full" / "xe_epoch002.ckpt").read_bytes()
        rest = (tmp_path / "rest" / "xe_epoch002.ckpt").read_bytes()
        assert full == rest

    def test_bad_feature_file_reports_error(self, tmp_path, capsys):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps({"data": {"n": 5, "n_regions": 4, "feature_dim": 14, "min_count": 1,
                                             "split": [0.6, 0.2, 0.2]}}))
        c = ["--config", str(cfgp)]
        main(["synth", *c, "--out", str(tmp_path / "s")])
        f = sorted((tmp_path / "s" / "features").iterdir())[0]
        f.write_bytes(f.read_bytes()[:-8])
        main(["preprocess", *c, "--out", str(tmp_path / "p"), "--captions", str(tmp_path / "s" / "captions.jsonl")])
        main(["build-vocab", *c, "--out", str(tmp_path / "p"), "--train", str(tmp_path / "p" / "train.jsonl")])
        code = main(["train-xe", *c, "--data", str(tmp_path / "p"), "--out", str(tmp_path / "x")])
        assert code == 1
        assert "expected" in capsys.readouterr().err

    def test_gradcheck_command(self, tmp_path, capsys):
        assert main(["gradcheck", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "gradcheck.json").read_text())
        assert all(r["passed"] for r in res.values())
        assert {"transformer_end_to_end", "lstm_soft_attn_end_to_end", "scst_surrogate", "layer_norm"} <= set(res)
