import json

import pytest
import torch

from errors import CheckpointError, ConfigError
from models import CheckpointHeader, TrainConfig, Variant
from storage import (
    EXPERIMENT_FILENAME,
    ArtifactStore,
    finish_run,
    load_checkpoint,
    read_experiment_manifest,
    start_run,
)


def _header(**overrides) -> CheckpointHeader:
    config = TrainConfig(variant=Variant.M1)
    values = dict(
        variant=config.variant,
        diffusion_enabled=True,
        category_enabled=False,
        schedule=config.schedule,
        epoch=3,
        train_config=config,
    )
    values.update(overrides)
    return CheckpointHeader(**values)


def test_checkpoint_round_trip(tmp_path):
    store = ArtifactStore(tmp_path).initialize()
    weights = {"weight": torch.arange(6.0).view(2, 3)}
    path = store.save_checkpoint("epoch_003.pt", _header(), {"generator": weights})

    header, blocks = load_checkpoint(path)
    assert header.variant is Variant.M1 and header.epoch == 3
    assert torch.equal(blocks["generator"]["weight"], weights["weight"])
    assert list(store.list_checkpoints()) == [path]
    assert not path.with_suffix(".pt.tmp").exists()


def test_unsupported_checkpoint_version(tmp_path):
    store = ArtifactStore(tmp_path).initialize()
    path = store.save_checkpoint("old.pt", _header(format_version=2), {})
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_or_unreadable_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    garbage = tmp_path / "garbage.pt"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)


def test_checkpoint_without_header(tmp_path):
    path = tmp_path / "bare.pt"
    torch.save({"generator": {}}, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_append_csv_writes_header_once(tmp_path):
    store = ArtifactStore(tmp_path).initialize()
    columns = ["epoch", "loss"]
    store.append_csv_row("losses.csv", {"epoch": 1, "loss": 0.5}, columns)
    store.append_csv_row("losses.csv", {"epoch": 2, "loss": 0.25}, columns)
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines == ["epoch,loss", "1,0.5", "2,0.25"]
    assert store.read_csv("losses.csv")["loss"].tolist() == [0.5, 0.25]


def test_write_json_accepts_models_and_dicts(tmp_path):
    store = ArtifactStore(tmp_path).initialize()
    store.write_json("header.json", _header())
    store.write_json("plain.json", {"b": 1, "a": 2})
    assert json.loads((tmp_path / "header.json").read_text())["variant"] == "m1"
    assert (tmp_path / "plain.json").read_text().startswith('{\n  "a": 2')


def test_run_manifest_lifecycle(tmp_path):
    store = start_run(tmp_path / "run", "synth-train", {"seed": 4, "variant": "full"}, {"epochs": 2}, seed=4)
    manifest = read_experiment_manifest(tmp_path / "run")
    assert manifest.command == "synth-train"
    assert manifest.arguments == {"seed": 4, "variant": "full"}
    assert manifest.config == {"epochs": 2}
    assert manifest.finished_at is None

    finish_run(store)
    finished = read_experiment_manifest(store.path(EXPERIMENT_FILENAME))
    assert finished.finished_at is not None
    assert finished.finished_at >= finished.created_at


def test_read_experiment_manifest_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_experiment_manifest(tmp_path / "nowhere")
    (tmp_path / EXPERIMENT_FILENAME).write_text("{not json")
    with pytest.raises(ConfigError):
        read_experiment_manifest(tmp_path)
