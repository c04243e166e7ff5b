import json
import re

import pytest

from lwfs import cli, regimes

TINY = {
    "name": "tiny",
    "seed": 3,
    "generator": {"vocab_a": 3, "vocab_b": 2, "shared": 1, "switch_prob": 0.4,
                  "utt_len": [2, 4], "frames_per_symbol": [2, 3],
                  "noise_sigma": 0.05, "feature_dim": 4, "seed": 2,
                  "confusable_dist": None, "cs_a_coverage": 1.0},
    "corpora": {
        "mono_a": {"mode": "monolingual-A", "train": 12, "test": 6},
        "cs": {"mode": "code-switched", "train": 10, "test": 6},
    },
    "model": {"conv_layers": 1, "conv_channels": 4,
              "recurrent_layers": 1, "hidden_dim": 4},
    "train": {"lr": 0.3, "epochs": 2, "batch_size": 8},
    "regimes": [
        {"id": "Exp1", "kind": "Exp1", "train_corpus": "mono_a"},
        {"id": "Exp4", "kind": "Exp4", "train_corpus": "cs", "base": "Exp1"},
        {"id": "LWF", "kind": "LWF", "train_corpus": "cs", "base": "Exp1",
         "train": {"lwf_warmup_epochs": 1}},
    ],
    "test_sets": ["mono_a", "cs"],
}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _stderr_error(capsys):
    captured = capsys.readouterr()
    return json.loads(captured.err)["error"], captured.out


def test_generate_writes_corpora(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["generate", "-c", cfg_file, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "cmi_pooled" in stdout
    for fname in ("mono_a_train.jsonl", "mono_a_test.jsonl",
                  "cs_train.jsonl", "cs_test.jsonl"):
        assert (out / "corpora" / fname).exists()
    assert (out / "config.resolved.json").exists()

    # an independent run dir produces byte-identical corpora
    out2 = tmp_path / "run2"
    assert cli.main(["generate", "-c", cfg_file, "--out", str(out2)]) == 0
    for fname in ("mono_a_train.jsonl", "cs_test.jsonl"):
        assert (out / "corpora" / fname).read_bytes() == \
            (out2 / "corpora" / fname).read_bytes()


def test_out_root_env(cfg_file, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.ENV_OUT_ROOT, str(tmp_path / "root"))
    assert cli.main(["generate", "-c", cfg_file]) == 0
    capsys.readouterr()
    assert (tmp_path / "root" / "tiny" / "corpora" / "cs_train.jsonl").exists()


def test_config_value_error_has_field_path(cfg_file, capsys):
    rc = cli.main(["generate", "-c", cfg_file, "--set", "generator.switch_prob=1.5"])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert err["kind"] == "config"
    assert err["field"] == "generator"
    assert "switch_prob" in err["message"]


def test_unknown_field_rejected(tmp_path, capsys):
    bad = dict(TINY, typo_field=1)
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["generate", "-c", str(path), "--out", str(tmp_path / "r")]) == 2
    err, _ = _stderr_error(capsys)
    assert err["field"] == "typo_field"


def test_wrong_type_rejected(cfg_file, capsys, tmp_path):
    rc = cli.main(["generate", "-c", cfg_file, "--set", "model.hidden_dim=tiny",
                   "--out", str(tmp_path / "r")])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert err["field"] == "model.hidden_dim"


def test_set_expression_validation(cfg_file, capsys):
    assert cli.main(["generate", "-c", cfg_file, "--set", "no-equals"]) == 2
    err, _ = _stderr_error(capsys)
    assert "dotted.path=value" in err["message"]
    assert cli.main(["generate", "-c", cfg_file,
                     "--set", 'corpora={"x": 1}']) == 2
    err, _ = _stderr_error(capsys)
    assert "scalar" in err["message"]
    assert cli.main(["generate", "-c", cfg_file, "--set", "name.sub=1"]) == 2


def test_missing_config_file(capsys):
    assert cli.main(["generate", "-c", "/nonexistent.json"]) == 2
    err, _ = _stderr_error(capsys)
    assert "not found" in err["message"]


def test_regime_validation_happens_before_any_work(tmp_path, capsys):
    bad = dict(TINY)
    bad["regimes"] = [{"id": "ft", "kind": "Exp4", "train_corpus": "cs"}]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    out = tmp_path / "r"
    assert cli.main(["suite", "-c", str(path), "--out", str(out)]) == 2
    err, _ = _stderr_error(capsys)
    assert err["field"] == "regimes[0]"
    assert "base" in err["message"]
    assert not out.exists()


def test_unknown_corpus_in_regime(tmp_path, capsys):
    bad = dict(TINY)
    bad["regimes"] = [{"id": "x", "kind": "Exp1", "train_corpus": "nope"}]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["generate", "-c", str(path)]) == 2
    err, _ = _stderr_error(capsys)
    assert err["field"].startswith("regimes[0]")


def test_train_writes_artifacts(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "checksum" in stdout
    rdir = out / "regimes" / "Exp1"
    assert (rdir / "model.lwfs").exists()
    assert (rdir / "history.json").exists()
    assert (rdir / "train.log").exists()


def test_train_unknown_regime(cfg_file, tmp_path, capsys):
    rc = cli.main(["train", "Exp9", "-c", cfg_file, "--out", str(tmp_path / "r")])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "Exp9" in err["message"]


def test_train_requires_base_checkpoint(cfg_file, tmp_path, capsys):
    rc = cli.main(["train", "Exp4", "-c", cfg_file, "--out", str(tmp_path / "r")])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "train it first" in err["message"]
    assert err["field"] == "regimes.Exp4.base"


def test_set_override_applies(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out),
                     "--set", "train.epochs=1"]) == 0
    capsys.readouterr()
    hist = regimes.TrainHistory.load(out / "regimes" / "Exp1" / "history.json")
    assert len(hist.epochs) == 1


def test_frozen_core_rejects_drift(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["generate", "-c", cfg_file, "--out", str(out)]) == 0
    capsys.readouterr()
    rc = cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out),
                   "--set", "train.lr=0.9"])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert err["field"] == "train"
    assert "different" in err["message"]
    # non-core fields may drift freely
    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out),
                     "--set", "name=renamed"]) == 0


def test_evaluate_flow(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out)]) == 0
    assert cli.main(["evaluate", "--regime", "Exp1", "--test", "mono_a",
                     "-c", cfg_file, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "wer" in stdout
    rpath = out / "reports" / "eval_Exp1_mono_a.json"
    assert rpath.exists()
    doc = json.loads(rpath.read_text())
    assert doc["head_id"] == "mono"
    assert doc["decode"]["mode"] == "greedy"


def test_evaluate_validation(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    rc = cli.main(["evaluate", "--regime", "Exp1", "--test", "mono_a",
                   "-c", cfg_file, "--out", str(out)])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "checkpoint not found" in err["message"]

    rc = cli.main(["evaluate", "--regime", "Exp1", "--checkpoint", "x.lwfs",
                   "--test", "mono_a", "-c", cfg_file, "--out", str(out)])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "exactly one" in err["message"]

    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out)]) == 0
    rc = cli.main(["evaluate", "--regime", "Exp1", "--test", "mono_a",
                   "--head", "nope", "-c", cfg_file, "--out", str(out)])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "heads" in err["message"]


def test_lm_train_and_fused_evaluation(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "Exp1", "-c", cfg_file, "--out", str(out)]) == 0
    assert cli.main(["lm-train", "--corpus", "mono_a", "-c", cfg_file,
                     "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "3-gram LM" in stdout
    assert (out / "lm" / "mono_a_lm.json").exists()

    assert cli.main(["evaluate", "--regime", "Exp1", "--test", "mono_a",
                     "--lm", "mono_a_lm", "-c", cfg_file, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "mono_a_lm" in stdout
    doc = json.loads((out / "reports" / "eval_Exp1_mono_a.json").read_text())
    assert doc["decode"]["mode"] == "beam"
    assert doc["decode"]["lm"] == "mono_a_lm"


def test_suite_report_and_resume(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["suite", "-c", cfg_file, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "trend verdicts" in stdout
    assert "forgetting reproduced:" in stdout
    assert "subsampling mitigation: n/a" in stdout
    assert (out / "suite.json").exists()
    assert (out / "summary.txt").exists()
    assert (out / "plots" / "loss_curves.png").exists()
    assert (out / "plots" / "wer_bars.png").exists()
    doc = json.loads((out / "suite.json").read_text())
    assert set(doc["matrix"]) == {"Exp1", "Exp4", "LWF"}
    assert doc["failures"] == {}
    assert set(doc["verdicts"]) == {"forgetting_reproduced", "lwf_mitigation",
                                    "subsampling_mitigation"}
    # LWF evaluates its cs head on the code-switched test set
    assert doc["reports"]["LWF"]["cs"]["head"] == "cs"
    assert doc["reports"]["LWF"]["mono_a"]["head"] == "mono"

    # a second suite run reuses every artifact
    ckpt = out / "regimes" / "Exp1" / "model.lwfs"
    stamp = ckpt.stat().st_mtime_ns
    assert cli.main(["suite", "-c", cfg_file, "--out", str(out)]) == 0
    capsys.readouterr()
    assert ckpt.stat().st_mtime_ns == stamp

    # report re-renders from disk alone
    assert cli.main(["report", "-c", cfg_file, "--out", str(out)]) == 0
    assert "trend verdicts" in capsys.readouterr().out


def test_report_needs_artifacts(cfg_file, tmp_path, capsys):
    rc = cli.main(["report", "-c", cfg_file, "--out", str(tmp_path / "empty")])
    assert rc == 2
    err, _ = _stderr_error(capsys)
    assert "no regime artifacts" in err["message"]


def test_suite_reports_failed_cells(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["suite", "-c", cfg_file, "--out", str(out)]) == 0
    capsys.readouterr()
    # corrupt the base checkpoint and force its dependents to retrain
    (out / "regimes" / "Exp1" / "model.lwfs").write_bytes(b"JUNK")
    for rid in ("Exp4", "LWF"):
        for p in (out / "regimes" / rid).iterdir():
            p.unlink()
    rc = cli.main(["suite", "-c", cfg_file, "--out", str(out)])
    assert rc == 1
    err, stdout = _stderr_error(capsys)
    assert err["kind"] == "runtime"
    assert set(err["cells"]) == {"Exp4", "LWF"}
    assert "FAILED Exp4" in stdout


def _cs_train_cmi(stdout: str) -> float:
    row = re.search(r"^cs\s+train\s+\d+\s+\d+\s+[\d.]+\s+([\d.]+)", stdout, re.M)
    assert row, stdout
    return float(row.group(1))


def test_generate_cmi_follows_switch_prob(cfg_file, tmp_path, capsys):
    assert cli.main(["generate", "-c", cfg_file, "--out", str(tmp_path / "lo"),
                     "--set", "generator.switch_prob=0.05"]) == 0
    lo = _cs_train_cmi(capsys.readouterr().out)
    assert cli.main(["generate", "-c", cfg_file, "--out", str(tmp_path / "hi"),
                     "--set", "generator.switch_prob=0.45"]) == 0
    hi = _cs_train_cmi(capsys.readouterr().out)
    assert lo < hi
