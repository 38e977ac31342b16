import json

import pandas as pd
import pytest

from cli import main
from storage import read_experiment_manifest

COMMON_TRAIN = ["--epochs", "1", "--batch-size", "2", "--image-size", "32", "--residual-blocks", "1", "--device", "cpu", "--no-progress"]


def _error_payload(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom-gen", "--n", "50", "--seed", "7", "--image-size", "32", "--out", str(root / "data")]) == 0
    assert main(["synth-train", "--variant", "full", "--data", str(root / "data"), "--out", str(root / "full"), "--seed", "1", *COMMON_TRAIN]) == 0
    return root


def test_phantom_gen_writes_pairs_and_manifest(workspace):
    data = workspace / "data"
    assert len(list(data.rglob("cfp.png"))) == 50
    assert len(list(data.rglob("ffa.png"))) == 50
    manifest = read_experiment_manifest(data)
    assert manifest.command == "phantom-gen"
    assert manifest.arguments["n"] == 50
    assert manifest.config["image_size"] == 32
    assert manifest.finished_at is not None


def test_phantom_gen_rejects_small_n(tmp_path, capsys):
    assert main(["phantom-gen", "--n", "0", "--out", str(tmp_path / "out")]) == 2
    assert _error_payload(capsys)["error"]["code"] == "CONFIG_ERROR"
    assert not (tmp_path / "out").exists()


def test_synth_train_full_writes_trace_and_checkpoint(workspace):
    run = workspace / "full"
    assert (run / "checkpoints" / "epoch_001.pt").is_file()
    assert (run / "controller_trace.txt").is_file()
    assert read_experiment_manifest(run).config["variant"] == "full"


def test_synth_train_baseline_has_no_trace(workspace, tmp_path):
    out = tmp_path / "baseline"
    assert main(["synth-train", "--variant", "baseline", "--data", str(workspace / "data"), "--out", str(out), *COMMON_TRAIN]) == 0
    assert (out / "checkpoints" / "epoch_001.pt").is_file()
    assert (out / "losses.csv").is_file()
    assert not (out / "controller_trace.txt").exists()


def test_synth_train_rejects_invalid_config(workspace, tmp_path, capsys):
    code = main(["synth-train", "--data", str(workspace / "data"), "--out", str(tmp_path / "bad"), "--image-size", "30"])
    assert code == 2
    assert _error_payload(capsys)["error"]["code"] == "CONFIG_ERROR"


def test_synth_train_missing_data_fails(tmp_path, capsys):
    code = main(["synth-train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "run"), *COMMON_TRAIN])
    assert code == 1
    assert _error_payload(capsys)["error"]["code"] == "DATASET_ERROR"


def test_synth_eval_and_compare(workspace, tmp_path):
    checkpoint = workspace / "full" / "checkpoints" / "epoch_001.pt"
    assert main(["synth-eval", "--checkpoint", str(checkpoint), "--data", str(workspace / "data"), "--out", str(tmp_path / "eval"), "--device", "cpu"]) == 0

    metrics = pd.read_csv(tmp_path / "eval" / "synthesis_metrics.csv")
    assert len(metrics) == 15
    assert set(metrics["metric"]) == {"FID", "KID", "LPIPS"}
    assert set(metrics["extractor"]) == {"random-projection"}
    summary = pd.read_csv(tmp_path / "eval" / "synthesis_summary.csv")
    assert set(summary["category"]) == {"all"}

    report = tmp_path / "eval" / "synthesis_metrics.csv"
    assert main(["synth-compare", "--report", f"full={report}", "--report", f"again={report}", "--out", str(tmp_path / "cmp")]) == 0
    table = pd.read_csv(tmp_path / "cmp" / "comparison.csv")
    assert list(table.columns) == ["method", "category", "FID", "KID", "LPIPS"]
    assert len(table) == 12
    assert table["method"].tolist()[:6] == ["full"] * 6
    assert table["category"].tolist()[5] == "mean"


def test_synth_eval_needs_two_samples_per_category(workspace, tmp_path, capsys):
    small = tmp_path / "small"
    assert main(["phantom-gen", "--n", "10", "--seed", "1", "--image-size", "32", "--out", str(small)]) == 0
    checkpoint = workspace / "full" / "checkpoints" / "epoch_001.pt"
    code = main([
        "synth-eval", "--checkpoint", str(checkpoint), "--data", str(small),
        "--out", str(tmp_path / "eval"), "--device", "cpu",
    ])
    assert code == 1
    error = _error_payload(capsys)["error"]
    assert error["code"] == "DATASET_ERROR"
    assert "at least 2" in error["message"]
    assert not (tmp_path / "eval" / "synthesis_metrics.csv").exists()


def test_synth_compare_rejects_bad_flags(tmp_path, capsys):
    assert main(["synth-compare", "--report", "nofile", "--out", str(tmp_path / "cmp")]) == 2
    assert _error_payload(capsys)["error"]["code"] == "CONFIG_ERROR"


def test_diag_run_synthetic_requires_checkpoint(tmp_path, capsys):
    assert main(["diag-run", "--ffa", "synthetic", "--out", str(tmp_path / "diag")]) == 2
    assert _error_payload(capsys)["error"]["code"] == "CONFIG_ERROR"


def test_diag_run_with_real_ffa(workspace, tmp_path):
    out = tmp_path / "diag"
    code = main([
        "diag-run", "--ffa", "real", "--data", str(workspace / "data"), "--out", str(out),
        "--epochs", "1", "--batch-size", "4", "--image-size", "32", "--device", "cpu", "--no-progress",
    ])
    assert code == 0
    report = pd.read_csv(out / "diagnosis_report.csv")
    assert set(report.query("category == 'all'")["metric"]) == {"ACC", "AUC", "SEN", "SPE"}
    assert read_experiment_manifest(out).config["backbone"] == "resnet10"


def test_rerun_reproduces_eval_tables(workspace, tmp_path):
    checkpoint = workspace / "full" / "checkpoints" / "epoch_001.pt"
    first = tmp_path / "eval"
    assert main(["synth-eval", "--checkpoint", str(checkpoint), "--data", str(workspace / "data"), "--out", str(first), "--device", "cpu"]) == 0
    assert main(["rerun", "--manifest", str(first), "--out", str(tmp_path / "replay")]) == 0
    for name in ("synthesis_metrics.csv", "synthesis_summary.csv"):
        assert (tmp_path / "replay" / name).read_text() == (first / name).read_text()


def test_rerun_reproduces_phantom_images(workspace, tmp_path):
    assert main(["rerun", "--manifest", str(workspace / "data" / "experiment.json"), "--out", str(tmp_path / "again")]) == 0
    for name in ("dr/dr_0001/cfp.png", "csc/csc_0049/ffa.png", "manifest.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_rerun_of_a_missing_manifest(tmp_path, capsys):
    assert main(["rerun", "--manifest", str(tmp_path / "nothing")]) == 2
    assert _error_payload(capsys)["error"]["code"] == "CONFIG_ERROR"


@pytest.mark.slow
def test_full_variant_matches_or_beats_baseline_on_most_seeds(workspace, tmp_path):
    data = str(workspace / "data")
    wins = {"FID": 0, "LPIPS": 0}
    for seed in ("1", "2", "3"):
        means = {}
        for variant in ("baseline", "full"):
            run = tmp_path / f"{variant}-{seed}"
            train = [
                "synth-train", "--variant", variant, "--data", data, "--out", str(run), "--seed", seed,
                "--epochs", "10", "--batch-size", "2", "--image-size", "32", "--residual-blocks", "2",
                "--device", "cpu", "--no-progress",
            ]
            assert main(train) == 0
            checkpoint = run / "checkpoints" / "epoch_010.pt"
            evaluate = [
                "synth-eval", "--checkpoint", str(checkpoint), "--data", data,
                "--out", str(run / "eval"), "--device", "cpu",
            ]
            assert main(evaluate) == 0
            means[variant] = pd.read_csv(run / "eval" / "synthesis_metrics.csv").groupby("metric")["value"].mean()
        for metric in wins:
            wins[metric] += means["full"][metric] <= means["baseline"][metric]
    assert wins["FID"] >= 2
    assert wins["LPIPS"] >= 2
