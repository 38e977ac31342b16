import json

import pandas as pd
import pytest
import torch
import torch.nn as nn
from pydantic import ValidationError

from dataset import load_mpos, split
from diagnosis import (
    Backbone,
    DiagnosisNet,
    FFASynthesizer,
    classify,
    extract_features,
    run_diagnosis_experiment,
    synthesize_ffa_for_diagnosis,
)
from errors import CheckpointError, ConfigError, ShapeError
from models import DiagnosisConfig, ModalityConfig, PhantomConfig, TrainConfig, Variant
from phantom import generate_phantom_dataset
from storage import ArtifactStore
from training import SynthesisTrainer, run_training, synthesize


@pytest.fixture
def diag_config():
    return DiagnosisConfig(image_size=32, epochs=1, batch_size=4, seed=2)


@pytest.fixture
def synthesis_checkpoint(tiny_config, cpu, tmp_path):
    store = ArtifactStore(tmp_path / "synth").initialize()
    trainer = SynthesisTrainer(tiny_config(), device=cpu)
    return store.save_checkpoint("epoch_001.pt", trainer.header(1), trainer.state_blocks())


def test_probabilities_sum_to_one(diag_config):
    torch.manual_seed(0)
    model = DiagnosisNet(ModalityConfig(ffa_source="real"), diag_config).eval()
    inputs = {"cfp": torch.randn(3, 3, 32, 32), "ffa": torch.randn(3, 3, 32, 32)}
    with torch.no_grad():
        probabilities = model.predict_proba(inputs)
    assert probabilities.shape == (3, 5)
    assert torch.allclose(probabilities.sum(dim=1), torch.ones(3), atol=1e-6)
    assert (probabilities >= 0).all()


def test_head_width_follows_modalities(diag_config):
    assert DiagnosisNet(ModalityConfig(), diag_config).head.in_features == 512
    assert DiagnosisNet(ModalityConfig(ffa_source="real"), diag_config).head.in_features == 1024
    ffa_only = DiagnosisNet(ModalityConfig(use_cfp=False, ffa_source="real"), diag_config)
    assert ffa_only.modalities == ["ffa"]


def test_swapping_modalities_with_a_permuted_head_is_equivalent():
    torch.manual_seed(0)
    f_cfp, f_ffa = torch.randn(2, 4), torch.randn(2, 6)
    head = nn.Linear(10, 5)
    swapped = nn.Linear(10, 5)
    with torch.no_grad():
        swapped.weight.copy_(torch.cat([head.weight[:, 4:], head.weight[:, :4]], dim=1))
        swapped.bias.copy_(head.bias)
    assert torch.allclose(classify(f_cfp, f_ffa, head), classify(f_ffa, f_cfp, swapped), atol=1e-6)


def test_classify_checks_feature_width():
    with pytest.raises(ShapeError):
        classify(torch.randn(1, 4), None, nn.Linear(8, 5))
    with pytest.raises(ShapeError):
        classify(None, None, nn.Linear(8, 5))


def test_backbone_checks_input_size():
    backbone = Backbone("resnet10", image_size=32)
    assert extract_features(torch.randn(3, 32, 32), backbone.eval()).shape == (512,)
    with pytest.raises(ShapeError):
        backbone(torch.randn(1, 3, 64, 64))


def test_unknown_or_unavailable_backbones():
    with pytest.raises(ConfigError):
        Backbone("resnet10", pretrained=True)
    with pytest.raises(ConfigError):
        Backbone("vgg16")


def test_modality_config_validation():
    assert ModalityConfig.from_flag("synthetic:ckpt.pt").checkpoint == "ckpt.pt"
    with pytest.raises(ValidationError):
        ModalityConfig.from_flag("synthetic")
    with pytest.raises(ValidationError):
        ModalityConfig(use_cfp=False, ffa_source="none")


def test_synthetic_ffa_uses_the_none_category(synthesis_checkpoint, cpu):
    cfp = torch.rand(2, 3, 32, 32) * 2 - 1
    ffa, metadata = synthesize_ffa_for_diagnosis(cfp, synthesis_checkpoint, device=cpu)
    assert metadata["category_input"] == ["none", "none"]
    assert metadata["variant"] == "full"

    synthesizer = FFASynthesizer(synthesis_checkpoint, device=cpu)
    assert torch.equal(ffa, synthesize(synthesizer.generator, cfp).clamp(-1, 1))


def test_synthetic_ffa_matches_the_input_resolution(synthesis_checkpoint, cpu):
    ffa, _ = synthesize_ffa_for_diagnosis(torch.zeros(1, 3, 64, 64), synthesis_checkpoint, device=cpu)
    assert ffa.shape == (1, 3, 64, 64)


def test_run_with_real_ffa_writes_reports(phantom_manifest, diag_config, cpu, tmp_path):
    store = ArtifactStore(tmp_path / "diag")
    report = run_diagnosis_experiment(
        phantom_manifest, ModalityConfig(ffa_source="real"), diag_config, store, device=cpu, progress=False
    )
    assert 0.0 <= report.value("all", "ACC") <= 100.0
    assert 0.0 <= report.value("all", "AUC") <= 1.0
    assert report.metadata["modalities"] == "cfp+ffa"

    written = pd.read_csv(store.path("diagnosis_report.csv"))
    assert set(written.query("category == 'all'")["metric"]) == {"ACC", "AUC", "SEN", "SPE"}
    predictions = pd.read_csv(store.path("predictions.csv"))
    assert len(predictions) == 6
    assert predictions.filter(like="p_").sum(axis=1).round(5).eq(1.0).all()
    assert len(pd.read_csv(store.path("diag_losses.csv"))) == 1


def test_run_with_synthetic_ffa_caches_images(phantom_manifest, diag_config, synthesis_checkpoint, cpu, tmp_path):
    store = ArtifactStore(tmp_path / "diag")
    modality = ModalityConfig(ffa_source="synthetic", checkpoint=str(synthesis_checkpoint))
    report = run_diagnosis_experiment(phantom_manifest, modality, diag_config, store, device=cpu, progress=False)

    cache = store.path("synthetic_ffa")
    assert len(list(cache.rglob("ffa.png"))) == 20
    assert json.loads((cache / "synthesis.json").read_text())["category_input"] == "none"
    assert report.metadata["ffa_source"] == "synthetic"


def test_synthetic_run_keeps_the_synthesis_split(
    phantom_manifest, diag_config, synthesis_checkpoint, cpu, tmp_path
):
    assert diag_config.seed != 1
    store = ArtifactStore(tmp_path / "diag")
    modality = ModalityConfig(ffa_source="synthetic", checkpoint=str(synthesis_checkpoint))
    report = run_diagnosis_experiment(phantom_manifest, modality, diag_config, store, device=cpu, progress=False)

    synthesis_val = {e.sample_id for e in split(phantom_manifest, 0.7, 1).val_entries}
    assert set(pd.read_csv(store.path("predictions.csv"))["sample_id"]) == synthesis_val
    assert report.metadata["split_seed"] == 1


def test_synthetic_run_rejects_a_checkpoint_of_another_variant(
    phantom_manifest, diag_config, synthesis_checkpoint, cpu, tmp_path
):
    modality = ModalityConfig(ffa_source="synthetic", checkpoint=str(synthesis_checkpoint), variant=Variant.M1)
    with pytest.raises(CheckpointError):
        run_diagnosis_experiment(
            phantom_manifest, modality, diag_config, ArtifactStore(tmp_path / "diag"), device=cpu, progress=False
        )
    assert ModalityConfig.from_flag("synthetic:c.pt", variant=Variant.BASELINE).variant is Variant.BASELINE


@pytest.fixture(scope="module")
def phantom_64(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom64")
    generate_phantom_dataset(50, seed=7, config=PhantomConfig(image_size=64), out_dir=root)
    return load_mpos(root)


def _accuracy(manifest, modality: ModalityConfig, config: DiagnosisConfig, out_dir, device) -> float:
    report = run_diagnosis_experiment(manifest, modality, config, ArtifactStore(out_dir), device=device, progress=False)
    return report.value("all", "ACC")


@pytest.mark.slow
def test_diagnosis_ordering_over_three_seeds(phantom_64, cpu, tmp_path):
    synthetic_not_worse = 0
    for seed in (1, 2, 3):
        config = DiagnosisConfig(image_size=64, epochs=15, batch_size=8, seed=seed)
        cfp_only = _accuracy(phantom_64, ModalityConfig(), config, tmp_path / f"cfp-{seed}", cpu)
        real = _accuracy(phantom_64, ModalityConfig(ffa_source="real"), config, tmp_path / f"real-{seed}", cpu)
        assert cfp_only < real

        synthesis = TrainConfig(
            variant=Variant.FULL, epochs=10, batch_size=4, image_size=64, n_residual_blocks=2, seed=seed
        )
        store = ArtifactStore(tmp_path / f"synth-{seed}")
        checkpoint = run_training(phantom_64, synthesis, store, device=cpu, progress=False).final_checkpoint
        modality = ModalityConfig(ffa_source="synthetic", checkpoint=str(checkpoint))
        synthetic = _accuracy(phantom_64, modality, config, tmp_path / f"synthetic-{seed}", cpu)
        synthetic_not_worse += synthetic >= cfp_only
    assert synthetic_not_worse >= 2
