import json

import pytest

from headatlas.cli import PipelineError, RunConfig, main

TINY = {"model": {"n_layers": 2, "n_heads": 2, "model_dim": 16, "mlp_dim": 32},
        "corpus": {"n_entities": 40},
        "train": {"steps": 2, "batch_closed": 4, "batch_open": 4, "batch_bio": 2,
                  "probe_size": 0},
        "eval": {"n_examples": 4},
        "atlas": {"K_ctx": 1, "K_param": 1, "K_task": 1, "K_ret": 1}}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"version": 1, **TINY}))
    return p


def test_unknown_keys_and_version_rejected():
    with pytest.raises(PipelineError, match="unknown config key 'model.depth'"):
        RunConfig({"model": {"depth": 3}})
    with pytest.raises(PipelineError):
        RunConfig({"version": 2})
    with pytest.raises(PipelineError):
        RunConfig({"atlas": {"K_ctx": 65}})
    with pytest.raises(PipelineError):
        RunConfig({"interventions": {"alpha": 0}})


def test_hash_ignores_out_but_not_seed():
    a = RunConfig({"out": "x"})
    assert a.hash == RunConfig({"out": "y"}).hash
    assert a.hash != RunConfig({"seed": 1}).hash
    assert RunConfig({"seed": 4}).seed("probe") == 4 + a["seeds"]["probe"]


def test_report_without_prior_runs_lists_artifacts(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    for name in ("head_scores.csv", "specialization.json", "localization.json"):
        assert name in err
    assert "localize-heads" in err


def test_env_var_sets_output_root(tmp_path, monkeypatch, cfg_path):
    monkeypatch.setenv("HEADATLAS_OUT", str(tmp_path / "envout"))
    assert main(["gen-data", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "envout" / "corpus.jsonl").exists()


def test_gen_data_and_train_are_byte_identical(tmp_path, cfg_path):
    for d in ("a", "b"):
        for cmd in ("gen-data", "train"):
            assert main([cmd, "--config", str(cfg_path), "--out", str(tmp_path / d)]) == 0
    for name in ("corpus.jsonl", "split.json", "qa_eval.jsonl", "model.hatl", "train_log.csv",
                 "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_lineage_mismatch_refused(tmp_path, cfg_path, capsys):
    out = str(tmp_path / "o")
    assert main(["gen-data", "--config", str(cfg_path), "--out", out]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", out, "--seed", "5"]) == 2
    assert "rerun `gen-data`" in capsys.readouterr().err


def test_missing_prerequisite_names_producer(tmp_path, cfg_path, capsys):
    assert main(["eval-qa", "--config", str(cfg_path), "--out", str(tmp_path / "o")]) == 2
    assert "produced by `gen-data`" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    assert main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 2
