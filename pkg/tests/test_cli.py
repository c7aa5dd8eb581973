# tests/test_cli.py

import orjson
import pytest
from click.testing import CliRunner

from agrg.config import load_run_config
from agrg.core.pipeline import load_split
from agrg.ingestion.dataset_io import write_jsonl
from agrg.main_cli import cli

from conftest import tiny_config_dict


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_bytes(orjson.dumps(tiny_config_dict(tmp_path)))
    return path


def invoke(config_file, *args):
    return CliRunner().invoke(cli, ["--log-level", "WARNING", "--config", str(config_file), *args])


def test_synth_writes_splits(config_file, tmp_path):
    result = invoke(config_file, "synth")
    assert result.exit_code == 0, result.output
    assert "train=24, val=12, test=8" in result.output
    assert (tmp_path / "data" / "manifest.json").exists()


def test_synth_out_dir_override(config_file, tmp_path):
    result = invoke(config_file, "synth", "--out-dir", str(tmp_path / "elsewhere"))
    assert result.exit_code == 0, result.output
    assert (tmp_path / "elsewhere" / "test.agds").exists()


def test_missing_prerequisite_exit_code(config_file):
    result = invoke(config_file, "train", "--stage", "decoder")
    assert result.exit_code == 3


def test_invalid_config_exit_code(tmp_path):
    broken = tiny_config_dict(tmp_path)
    broken["encoder"]["patch"] = 3
    path = tmp_path / "broken.json"
    path.write_bytes(orjson.dumps(broken))
    assert invoke(path, "synth").exit_code == 2


def test_unknown_stage_is_a_usage_error(config_file):
    assert invoke(config_file, "train", "--stage", "finetune").exit_code == 2


def test_bad_seed_list(config_file):
    result = invoke(config_file, "ablate", "--seeds", "0,one")
    assert result.exit_code == 2
    assert "comma-separated integers" in result.output


def test_evaluate_prints_aggregate(config_file, tmp_path):
    assert invoke(config_file, "synth").exit_code == 0
    references = load_split(load_run_config(config_file), "test")
    generations = tmp_path / "echo.jsonl"
    write_jsonl(generations, ({"case_id": case.seed, "report": case.report} for case in references))

    result = invoke(config_file, "evaluate", "--generations", str(generations), "--out-dir", str(tmp_path / "eval"))
    assert result.exit_code == 0, result.output
    assert "ROUGE-L  1.0000 ± 0.0000" in result.output
    assert (tmp_path / "eval" / "metrics.json").exists()


def test_train_threads_reach_the_config(config_file, monkeypatch):
    seen = {}

    def fake_run_stage(stage, config, **kwargs):
        seen.update(stage=stage, threads=config.threads)
        return config.paths.out_dir / f"{stage}.agrg"

    monkeypatch.setattr("agrg.main_cli.run_stage", fake_run_stage)
    result = invoke(config_file, "train", "--stage", "pretrain", "--threads", "3")
    assert result.exit_code == 0, result.output
    assert seen == {"stage": "pretrain", "threads": 3}


def test_ablate_threads_and_encoders_reach_the_run(config_file, monkeypatch):
    seen = {}

    def fake_run_ablation(config, seeds=None, force=False, encoders=None):
        seen.update(threads=config.threads, seeds=seeds, encoders=encoders)
        config.paths.out_dir.mkdir(parents=True, exist_ok=True)
        (config.paths.out_dir / "ablation.txt").write_text("table\n", encoding="utf-8")

    monkeypatch.setattr("agrg.main_cli.run_ablation", fake_run_ablation)
    result = invoke(config_file, "ablate", "--seeds", "0,1", "--encoders", "mixer,attention", "--threads", "2")
    assert result.exit_code == 0, result.output
    assert seen == {"threads": 2, "seeds": [0, 1], "encoders": ["mixer", "attention"]}
    assert "table" in result.output


def test_thread_count_is_validated(config_file):
    assert invoke(config_file, "train", "--stage", "pretrain", "--threads", "0").exit_code == 2


def test_unknown_encoder_kind_is_a_usage_error(config_file):
    result = invoke(config_file, "ablate", "--encoders", "mixer,conv")
    assert result.exit_code == 2
    assert "kinds from mixer, attention" in result.output
