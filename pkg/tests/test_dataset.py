import logging

import pandas as pd
import pytest
import torch
from PIL import Image

from dataset import (
    PairedImageDataset,
    PairedSample,
    augment,
    load_mpos,
    read_manifest_csv,
    split,
    write_manifest_csv,
)
from errors import DatasetError
from models import DISEASE_CATEGORIES, CategoryLabel, DatasetManifest, ManifestEntry
from utils import save_image


def _manifest(per_category: int) -> DatasetManifest:
    entries = [
        ManifestEntry(
            sample_id=f"{category.value}_{i:04d}",
            cfp_path=f"{category.value}/{i}/cfp.png",
            ffa_path=f"{category.value}/{i}/ffa.png",
            category=category,
        )
        for category in DISEASE_CATEGORIES
        for i in range(per_category)
    ]
    return DatasetManifest(root="/data", entries=tuple(entries))


def _write_pair(root, category: str, sample_id: str, ffa: bool = True) -> None:
    save_image(Image.new("RGB", (8, 8), (200, 90, 40)), root / category / sample_id / "cfp.png")
    if ffa:
        save_image(Image.new("RGB", (8, 8), (60, 60, 58)), root / category / sample_id / "ffa.png")


def test_split_of_600_samples():
    result = split(_manifest(120), ratio=0.7, seed=1)
    assert len(result.train_entries) == 420
    assert len(result.val_entries) == 180
    assert result.seed == 1 and result.ratio == 0.7


def test_split_is_stratified():
    result = split(_manifest(120), ratio=0.7, seed=1)
    for category in DISEASE_CATEGORIES:
        train = [e for e in result.train_entries if e.category is category]
        val = [e for e in result.val_entries if e.category is category]
        assert (len(train), len(val)) == (84, 36)


def test_split_partitions_the_manifest():
    manifest = _manifest(7)
    result = split(manifest, ratio=0.7, seed=4)
    train_ids = {e.sample_id for e in result.train_entries}
    val_ids = {e.sample_id for e in result.val_entries}
    assert not train_ids & val_ids
    assert train_ids | val_ids == {e.sample_id for e in manifest.entries}


def test_split_of_a_small_set_keeps_both_sides_per_category():
    result = split(_manifest(4), ratio=0.7, seed=0)
    assert len(result.train_entries) == 14
    for category in DISEASE_CATEGORIES:
        assert any(e.category is category for e in result.val_entries)
        assert any(e.category is category for e in result.train_entries)


def test_split_is_reproducible_under_seed():
    manifest = _manifest(20)
    first = split(manifest, 0.7, seed=9)
    second = split(manifest, 0.7, seed=9)
    other = split(manifest, 0.7, seed=10)
    assert first.entries == second.entries
    assert {e.sample_id for e in first.train_entries} != {e.sample_id for e in other.train_entries}


def test_split_does_not_depend_on_entry_order():
    manifest = _manifest(10)
    shuffled = DatasetManifest(root=manifest.root, entries=tuple(reversed(manifest.entries)))
    a = {e.sample_id for e in split(manifest, 0.7, seed=2).train_entries}
    b = {e.sample_id for e in split(shuffled, 0.7, seed=2).train_entries}
    assert a == b


def test_split_rejects_single_sample_category():
    entries = list(_manifest(3).entries)
    entries = [e for e in entries if e.category is not CategoryLabel.CSC] + [
        e for e in entries if e.category is CategoryLabel.CSC
    ][:1]
    with pytest.raises(DatasetError):
        split(DatasetManifest(root="/data", entries=tuple(entries)), 0.7, seed=0)


def test_split_rejects_bad_ratio():
    with pytest.raises(DatasetError):
        split(_manifest(3), ratio=1.0, seed=0)


def test_load_discovers_pairs_and_skips_unpaired(tmp_path, caplog):
    _write_pair(tmp_path, "normal", "n1")
    _write_pair(tmp_path, "dr", "d1")
    _write_pair(tmp_path, "dr", "d2", ffa=False)
    with caplog.at_level(logging.WARNING):
        manifest = load_mpos(tmp_path)
    assert sorted(e.sample_id for e in manifest.entries) == ["d1", "n1"]
    assert "d2" in caplog.text


def test_load_rejects_unknown_category_directory(tmp_path):
    _write_pair(tmp_path, "glaucoma", "g1")
    with pytest.raises(DatasetError):
        load_mpos(tmp_path)


def test_load_rejects_missing_or_empty_root(tmp_path):
    with pytest.raises(DatasetError):
        load_mpos(tmp_path / "missing")
    with pytest.raises(DatasetError):
        load_mpos(tmp_path)


def test_load_rejects_corrupt_image(tmp_path):
    _write_pair(tmp_path, "amd", "a1")
    (tmp_path / "amd" / "a1" / "ffa.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        load_mpos(tmp_path)


def test_manifest_rows_without_a_pair_are_skipped(tmp_path, caplog):
    for sample_id in ("d1", "d2", "d3"):
        _write_pair(tmp_path, "dr", sample_id)
    manifest = load_mpos(tmp_path)
    write_manifest_csv(manifest, tmp_path / "manifest.csv")
    (tmp_path / "dr" / "d2" / "ffa.png").unlink()
    frame = pd.read_csv(tmp_path / "manifest.csv", dtype=str, keep_default_na=False)
    frame.loc[frame["sample_id"] == "d3", "ffa_path"] = ""
    frame.to_csv(tmp_path / "manifest.csv", index=False)

    with caplog.at_level(logging.WARNING):
        loaded = load_mpos(tmp_path)
    assert [e.sample_id for e in loaded.entries] == ["d1"]
    assert "d2" in caplog.text and "d3" in caplog.text


def test_manifest_csv_keeps_split_and_relative_paths(tmp_path):
    _write_pair(tmp_path, "rvo", "r1")
    _write_pair(tmp_path, "rvo", "r2")
    manifest = split(load_mpos(tmp_path), 0.5, seed=0)
    path = write_manifest_csv(manifest, tmp_path / "manifest.csv")
    assert "rvo/r1/cfp.png" in path.read_text()

    reloaded = read_manifest_csv(path)
    assert [e.split for e in reloaded.entries] == [e.split for e in manifest.entries]
    assert reloaded.entries[0].cfp_path == str(tmp_path / "rvo" / "r1" / "cfp.png")
    # a manifest.csv at the root takes precedence over discovery
    assert load_mpos(tmp_path).entries == reloaded.entries


def test_augment_flips_both_modalities_together():
    cfp = torch.arange(12, dtype=torch.float32).view(1, 3, 4)
    sample = PairedSample(cfp=cfp, ffa=cfp + 100, category=CategoryLabel.DR, sample_id="s")
    flipped = augment(sample, torch.Generator().manual_seed(0), hflip_p=1.0, vflip_p=0.0)
    assert torch.equal(flipped.cfp, torch.flip(cfp, dims=[-1]))
    assert torch.equal(flipped.ffa, flipped.cfp + 100)

    both = augment(sample, torch.Generator().manual_seed(0), hflip_p=1.0, vflip_p=1.0)
    assert torch.equal(both.cfp, torch.flip(cfp, dims=[-1, -2]))
    assert torch.equal(both.ffa, both.cfp + 100)


def test_augment_without_flips_returns_sample():
    sample = PairedSample(cfp=torch.rand(3, 4, 4), ffa=None, category=CategoryLabel.AMD, sample_id="s")
    assert augment(sample, torch.Generator().manual_seed(0), hflip_p=0.0, vflip_p=0.0) is sample


def test_paired_dataset_items(phantom_manifest):
    dataset = PairedImageDataset(list(phantom_manifest.entries), image_size=32)
    item = dataset[0]
    entry = phantom_manifest.entries[0]
    assert item["cfp"].shape == (3, 32, 32) and item["ffa"].shape == (3, 32, 32)
    assert item["cfp"].min() >= -1 and item["cfp"].max() <= 1
    assert item["label"] == entry.category.embedding_index
    assert item["class_index"] == entry.category.class_index
    assert item["sample_id"] == entry.sample_id


def test_paired_dataset_resizes_and_can_skip_ffa(phantom_manifest):
    dataset = PairedImageDataset(list(phantom_manifest.entries), image_size=16, load_ffa=False)
    item = dataset[1]
    assert item["cfp"].shape == (3, 16, 16)
    assert "ffa" not in item
