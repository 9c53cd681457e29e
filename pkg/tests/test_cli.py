import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from dllm_quant.cli import main

MICRO_MODEL = [
    "--vocab-size", "12", "--seq-len", "16", "--d-model", "8",
    "--n-layers", "1", "--n-heads", "2", "--d-ff", "16",
]
CONFIG_TOML = """
weight_method = "cgq"
iaaq = true
steps = 4
blocks = 2
gen_len = 8
calib_budget = 16
seeds = [0]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    result = runner.invoke(
        main,
        [
            "train", "--synthetic", "12", "--epochs", "1", "--batch-size", "4",
            "--save-corpus", str(root / "corpus.txt"), "-o", str(root / "toy.dlqw"),
            *MICRO_MODEL,
        ],
    )
    assert result.exit_code == 0, result.output
    (root / "w4a4.toml").write_text(CONFIG_TOML)
    return root


def _run(*args: str):
    result = CliRunner().invoke(main, list(args))
    assert result.exit_code == 0, result.output
    return result


def test_train_writes_checkpoint_and_manifest(workspace):
    assert (workspace / "toy.dlqw").stat().st_size > 0
    assert len((workspace / "corpus.txt").read_text().splitlines()) == 12
    manifest = json.loads((workspace / "toy.dlqw.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["params"]["synthetic"] == 12
    assert manifest["fingerprint"] is None
    assert len(manifest["run_id"]) == 22


def test_calibrate_quantize_evaluate(workspace):
    w = str(workspace)
    _run(
        "calibrate", "-m", f"{w}/toy.dlqw", "-p", f"{w}/corpus.txt", "--prompt-len", "4",
        "-c", f"{w}/w4a4.toml", "-o", f"{w}/toy.dlqc",
    )
    calib_manifest = json.loads((workspace / "toy.dlqc.manifest.json").read_text())
    assert calib_manifest["config"]["steps"] == 4

    _run(
        "quantize", "-m", f"{w}/toy.dlqw", "--calib", f"{w}/toy.dlqc",
        "-c", f"{w}/w4a4.toml", "-o", f"{w}/toy.dlqx",
    )
    result = _run(
        "eval-error", "-m", f"{w}/toy.dlqw", "-q", f"{w}/toy.dlqx", "-p", f"{w}/corpus.txt",
        "--prompt-len", "4", "--format", "json", "-o", f"{w}/steps.json",
    )
    assert "Step Error" in result.output
    report = json.loads((workspace / "steps.json").read_text())
    assert report["kind"] == "StepErrorRow"
    assert [row["step"] for row in report["rows"]] == [0, 1, 2, 3]
    run = json.loads((workspace / "steps.json.manifest.json").read_text())
    assert report["fingerprint"] == run["fingerprint"]

    _run("report", f"{w}/steps.json", "--csv", f"{w}/steps.csv")
    header = (workspace / "steps.csv").read_text().splitlines()[0]
    assert header == "seed,mode,step,block,mse,cumulative"


def test_calibrate_overrides(workspace):
    w = str(workspace)
    _run(
        "calibrate", "-m", f"{w}/toy.dlqw", "-p", f"{w}/corpus.txt", "--prompt-len", "4",
        "--steps", "2", "--blocks", "1", "--gen-len", "4", "--budget", "8",
        "-o", f"{w}/small.dlqc",
    )
    config = json.loads((workspace / "small.dlqc.manifest.json").read_text())["config"]
    assert (config["steps"], config["blocks"], config["gen_len"], config["calib_budget"]) == (
        2, 1, 4, 8,
    )


def test_rtn_quantize_without_calibration(workspace):
    w = str(workspace)
    (workspace / "rtn.toml").write_text('weight_method = "rtn"\n')
    _run("quantize", "-m", f"{w}/toy.dlqw", "-c", f"{w}/rtn.toml", "-o", f"{w}/rtn.dlqx")
    assert (workspace / "rtn.dlqx").exists()


def test_stats_csv(workspace):
    w = str(workspace)
    _run(
        "stats", "-m", f"{w}/toy.dlqw", "-p", f"{w}/corpus.txt", "--prompt-len", "4",
        "--steps", "4", "--blocks", "2", "--gen-len", "8", "-o", f"{w}/stats.csv",
    )
    lines = (workspace / "stats.csv").read_text().splitlines()
    assert lines[0] == "step,block,layer,tensor,min,max,mean,std"
    assert len(lines) == 1 + 4 * 2


def test_seed_environment_reaches_manifest(workspace, monkeypatch):
    monkeypatch.setenv("DLLMQ_SEED", "3,4")
    w = str(workspace)
    _run(
        "calibrate", "-m", f"{w}/toy.dlqw", "-p", f"{w}/corpus.txt", "--prompt-len", "4",
        "-c", f"{w}/w4a4.toml", "-o", f"{w}/seeded.dlqc",
    )
    manifest = json.loads((workspace / "seeded.dlqc.manifest.json").read_text())
    assert manifest["seeds"] == [3, 4]


@pytest.mark.parametrize(
    "args",
    [
        ["train", "-o", "never.dlqw"],
        ["report", __file__],
    ],
)
def test_errors_exit_with_status_one(args, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_cgq_quantize_without_calibration_fails(workspace):
    w = str(workspace)
    result = CliRunner().invoke(
        main, ["quantize", "-m", f"{w}/toy.dlqw", "-c", f"{w}/w4a4.toml", "-o", f"{w}/x.dlqx"]
    )
    assert result.exit_code == 1
    assert "calibration" in result.output


def test_bare_output_names_go_to_output_dir(workspace, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("DLLMQ_OUTPUT_DIR", "results")
    w = str(workspace)
    _run(
        "stats", "-m", f"{w}/toy.dlqw", "-p", f"{w}/corpus.txt", "--prompt-len", "4",
        "--steps", "4", "--blocks", "2", "--gen-len", "8", "--format", "json", "-o", "stats.json",
    )
    assert (tmp_path / "results" / "stats.json").exists()
    assert (tmp_path / "results" / "stats.json.manifest.json").exists()
