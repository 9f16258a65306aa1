import json

import numpy as np
import pytest

from conftest import tiny_config
from emorag.checkpoint import read_checkpoint
from emorag.cli import main
from emorag.config import dump_config


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in ("EMORAG_CONFIG", "EMORAG_SEED", "EMORAG_OUT", "EMORAG_DATA", "EMORAG_WORKERS"):
        monkeypatch.delenv(name, raising=False)
    path = tmp_path / "tiny.yaml"
    dump_config(tiny_config(output_dir=str(tmp_path / "run")), path)
    return str(path)


def last_json(text):
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


def run_cli(*argv):
    return main(list(argv) + ["--no-progress"])


def test_synth_is_reproducible(config_file, tmp_path):
    assert run_cli("synth", "-c", config_file, "--out", str(tmp_path / "a")) == 0
    assert run_cli("synth", "-c", config_file, "--out", str(tmp_path / "b")) == 0
    for name in ("train.jsonl", "test.jsonl", "corpus.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["counts"] == {"train": 40, "test": 20, "corpus": 80}
    assert manifest["label_names"] == ["neutral", "happy", "sad", "angry"]


def test_train_writes_checkpoints_metrics_and_report(config_file, tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "-c", config_file, "--iterations", "2") == 0
    for name in ("checkpoint.bin", "policy.bin", "metrics.jsonl", "train_report.json"):
        assert (out / name).exists()

    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iter"] for line in lines] == [1, 2]
    report = json.loads((out / "train_report.json").read_text())
    assert report["iterations"] == 2
    assert 0.0 <= report["final_eval"]["macro_f1"] <= 1.0

    header, sections = read_checkpoint(out / "checkpoint.bin")
    assert header["mode"] == "train" and header["extra"]["iteration"] == 2
    assert "optim" in sections and "critic" in sections
    assert "critic" not in read_checkpoint(out / "policy.bin")[1]


def test_training_twice_gives_identical_checkpoints(config_file, tmp_path):
    assert run_cli("train", "-c", config_file, "--iterations", "1") == 0
    first = (tmp_path / "run" / "checkpoint.bin").read_bytes()
    assert run_cli("train", "-c", config_file, "--iterations", "1") == 0
    assert (tmp_path / "run" / "checkpoint.bin").read_bytes() == first


def test_zero_iterations_keep_the_warm_start_policy(config_file, tmp_path):
    assert run_cli("train", "-c", config_file, "--iterations", "0") == 0
    header, sections = read_checkpoint(tmp_path / "run" / "checkpoint.bin")
    assert header["extra"]["iteration"] == 0
    actor = list(sections["trunk"].values()) + list(sections["heads"].values())
    for a, b in zip(actor, sections["sft"].values()):
        assert np.array_equal(a, b)


def test_eval_reports_deltas_against_the_full_pipeline(config_file, tmp_path):
    assert run_cli("train", "-c", config_file, "--iterations", "1") == 0
    policy = str(tmp_path / "run" / "policy.bin")

    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "full")) == 0
    full = json.loads((tmp_path / "full" / "eval_report.json").read_text())
    assert full["delta_macro_f1"] == 0.0
    assert full["n"] == 20
    assert "counterfactual" in full
    assert sum(c["n"] for c in full["retrieval_conditions"].values()) == 20

    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "drop"), "--drop-modality", "t") == 0
    dropped = json.loads((tmp_path / "drop" / "eval_report.json").read_text())
    assert dropped["condition"] == {"drop_modality": "t"}
    assert dropped["full_macro_f1"] == full["macro_f1"]
    assert dropped["delta_macro_f1"] == pytest.approx(dropped["macro_f1"] - full["macro_f1"])


def test_eval_on_synthesized_files_matches_in_memory_data(config_file, tmp_path):
    assert run_cli("synth", "-c", config_file, "--out", str(tmp_path / "data")) == 0
    assert run_cli("train", "-c", config_file, "--iterations", "0") == 0
    policy = str(tmp_path / "run" / "policy.bin")

    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "mem")) == 0
    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "disk"), "--data", str(tmp_path / "data")) == 0
    mem = json.loads((tmp_path / "mem" / "eval_report.json").read_text())
    disk = json.loads((tmp_path / "disk" / "eval_report.json").read_text())
    assert mem["macro_f1"] == disk["macro_f1"]


def test_invalid_config_exits_with_usage_error(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "bad.yaml").write_text("train:\n  gamma: 2.0\n")
    assert run_cli("train", "-c", str(tmp_path / "bad.yaml")) == 2
    error = last_json(capsys.readouterr().err)
    assert error["error"] == "invalid_config"
    assert error["type"] == "ConfigError"


def test_missing_checkpoint_exits_with_runtime_error(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_cli("eval", "--checkpoint", str(tmp_path / "nope.bin")) == 1
    assert last_json(capsys.readouterr().err)["error"] == "checkpoint"


def test_suite_without_a_policy_is_a_usage_error(config_file, capsys):
    assert run_cli("suite", "-c", config_file) == 2
    error = last_json(capsys.readouterr().err)
    assert error["error"] == "invalid_config"
    assert error["config_hash"] is not None


def test_suite_with_auto_train(config_file, tmp_path):
    assert run_cli("suite", "-c", config_file, "--auto-train") == 0
    report = json.loads((tmp_path / "run" / "suite_report.json").read_text())
    rows = report["rows"]
    for name in ("zero_shot", "sft_only", "naive_rag", "full", "no_planner", "no_filter",
                 "no_planner_no_filter", "no_confuse_counter", "no_counter", "full_agents",
                 "drop_t", "drop_v_no_substitution", "direct_perceptual"):
        assert name in rows
    assert rows["full"]["delta_macro_f1"] == 0.0
    assert rows["full_agents"]["macro_f1"] == rows["full"]["macro_f1"]
    assert (tmp_path / "run" / "seed_7" / "checkpoint.bin").exists()


def test_eval_reports_are_byte_identical(config_file, tmp_path):
    assert run_cli("train", "-c", config_file, "--iterations", "1") == 0
    policy = str(tmp_path / "run" / "policy.bin")
    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "a"), "--no-retrieval") == 0
    assert run_cli("eval", "--checkpoint", policy, "--out", str(tmp_path / "b"), "--no-retrieval") == 0
    first = (tmp_path / "a" / "eval_report.json").read_bytes()
    assert (tmp_path / "b" / "eval_report.json").read_bytes() == first
    assert json.loads(first)["no_evidence"] == {"v": 20, "a": 20}


def test_resumed_training_matches_an_uninterrupted_run(config_file, tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "-c", config_file, "--iterations", "2") == 0
    straight = (out / "checkpoint.bin").read_bytes()
    policy = (out / "policy.bin").read_bytes()

    assert run_cli("train", "-c", config_file, "--iterations", "1") == 0
    assert run_cli("train", "-c", config_file, "--iterations", "2", "--resume", str(out / "checkpoint.bin")) == 0
    assert (out / "checkpoint.bin").read_bytes() == straight
    assert (out / "policy.bin").read_bytes() == policy
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iter"] for line in lines] == [1, 2]


def test_resuming_from_a_policy_file_is_refused(config_file, tmp_path, capsys):
    assert run_cli("train", "-c", config_file, "--iterations", "0") == 0
    policy = str(tmp_path / "run" / "policy.bin")
    assert run_cli("train", "-c", config_file, "--iterations", "1", "--resume", policy) == 1
    assert last_json(capsys.readouterr().err)["error"] == "checkpoint"
