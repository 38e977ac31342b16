"""
Paired CFP/FFA data: on-disk ingestion, stratified splitting, joint flips and
a torch ``Dataset`` over a manifest.

On-disk layout::

    <root>/<category>/<sample_id>/cfp.png
    <root>/<category>/<sample_id>/ffa.png

A ``manifest.csv`` at the root (sample_id, cfp_path, ffa_path, category,
split) overrides directory discovery; relative paths resolve against root.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from errors import DatasetError
from models import (
    DISEASE_CATEGORIES,
    CategoryLabel,
    DatasetManifest,
    ManifestEntry,
)
from utils import load_image_tensor, validate_image_file

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.csv"
CFP_FILENAME = "cfp.png"
FFA_FILENAME = "ffa.png"


@dataclass
class PairedSample:
    cfp: torch.Tensor
    ffa: Optional[torch.Tensor]
    category: CategoryLabel
    sample_id: str


def _resolve(root: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else root / path


def read_manifest_csv(path: Union[str, Path], root: Optional[Union[str, Path]] = None) -> DatasetManifest:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DatasetError(f"Unreadable manifest: {path}", details=str(e))

    entries = []
    for record in frame.to_dict("records"):
        try:
            category = CategoryLabel(record["category"])
        except ValueError:
            raise DatasetError(f"Unknown category '{record['category']}' in {path}")
        entries.append(
            ManifestEntry(
                sample_id=record["sample_id"],
                cfp_path=str(_resolve(root, record["cfp_path"])),
                ffa_path=str(_resolve(root, record["ffa_path"])) if record.get("ffa_path") else None,
                category=category,
                split=record.get("split") or None,
            )
        )
    return DatasetManifest(root=str(root), entries=tuple(entries))


def write_manifest_csv(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Write the manifest with paths relative to its root when possible."""
    path = Path(path)
    root = Path(manifest.root)
    frame = manifest.to_frame()
    for column in ("cfp_path", "ffa_path"):
        frame[column] = [
            _relative_to(Path(value), root) if value else "" for value in frame[column]
        ]
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def _relative_to(path: Path, root: Path) -> str:
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()


def load_mpos(root: Union[str, Path], verify_images: bool = True) -> DatasetManifest:
    """
    Discover every CFP/FFA pair under ``root``
    Unpaired samples are reported and skipped
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset root does not exist: {root}")

    manifest_path = root / MANIFEST_FILENAME
    if manifest_path.is_file():
        manifest = _drop_unpaired(read_manifest_csv(manifest_path, root))
        logger.info(f"Loaded {len(manifest)} pairs from {manifest_path}")
    else:
        manifest = _discover_pairs(root)

    if len(manifest) == 0:
        raise DatasetError(f"No paired samples found under {root}")
    if verify_images:
        for entry in manifest.entries:
            validate_image_file(entry.cfp_path)
            validate_image_file(entry.ffa_path)
    return manifest


def _drop_unpaired(manifest: DatasetManifest) -> DatasetManifest:
    """Manifest rows whose CFP or FFA file is absent are skipped, not fatal."""
    kept = []
    for entry in manifest.entries:
        missing = [
            name
            for name, value in ((CFP_FILENAME, entry.cfp_path), (FFA_FILENAME, entry.ffa_path))
            if not value or not Path(value).is_file()
        ]
        if missing:
            logger.warning(f"Skipping unpaired sample {entry.sample_id}: missing {', '.join(missing)}")
            continue
        kept.append(entry)
    if len(kept) == len(manifest.entries):
        return manifest
    return manifest.model_copy(update={"entries": tuple(kept)})


def _discover_pairs(root: Path) -> DatasetManifest:
    known = {category.value for category in DISEASE_CATEGORIES}
    entries: List[ManifestEntry] = []
    skipped = 0
    for category_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if category_dir.name not in known:
            raise DatasetError(
                f"Unknown category directory '{category_dir.name}'",
                details=f"expected one of {sorted(known)}",
            )
        category = CategoryLabel(category_dir.name)
        for sample_dir in sorted(p for p in category_dir.iterdir() if p.is_dir()):
            cfp = sample_dir / CFP_FILENAME
            ffa = sample_dir / FFA_FILENAME
            if not (cfp.is_file() and ffa.is_file()):
                missing = CFP_FILENAME if not cfp.is_file() else FFA_FILENAME
                logger.warning(f"Skipping unpaired sample {sample_dir}: missing {missing}")
                skipped += 1
                continue
            entries.append(
                ManifestEntry(
                    sample_id=sample_dir.name,
                    cfp_path=str(cfp),
                    ffa_path=str(ffa),
                    category=category,
                )
            )
    logger.info(f"Discovered {len(entries)} pairs under {root} ({skipped} skipped)")
    return DatasetManifest(root=str(root), entries=tuple(entries))


def _allocate_train_counts(sizes: Dict[str, int], ratio: float) -> Dict[str, int]:
    """Largest-remainder allocation so the total equals round(N * ratio)."""
    total = sum(sizes.values())
    target = int(math.floor(total * ratio + 0.5))
    exact = {name: size * ratio for name, size in sizes.items()}
    counts = {name: int(math.floor(value)) for name, value in exact.items()}
    remainder = target - sum(counts.values())
    order = sorted(exact, key=lambda name: (-(exact[name] - counts[name]), name))
    for name in order[:max(remainder, 0)]:
        counts[name] += 1
    # every category keeps at least one sample on each side
    return {name: min(max(count, 1), sizes[name] - 1) for name, count in counts.items()}


def split(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Per-category stratified random train/val split, reproducible under ``seed``."""
    if not 0 < ratio < 1:
        raise DatasetError(f"split ratio must lie in (0, 1), got {ratio}")

    groups: Dict[str, List[ManifestEntry]] = {}
    for entry in sorted(manifest.entries, key=lambda e: e.sample_id):
        groups.setdefault(entry.category.value, []).append(entry)
    for name, group in groups.items():
        if len(group) < 2:
            raise DatasetError(
                f"Category '{name}' has {len(group)} sample(s); cannot stratify",
            )

    counts = _allocate_train_counts({name: len(g) for name, g in groups.items()}, ratio)
    rng = np.random.default_rng(seed)
    assigned: Dict[str, str] = {}
    for name in sorted(groups):
        group = groups[name]
        order = rng.permutation(len(group))
        for rank, index in enumerate(order):
            assigned[group[index].sample_id] = "train" if rank < counts[name] else "val"

    entries = tuple(
        entry.model_copy(update={"split": assigned[entry.sample_id]}) for entry in manifest.entries
    )
    result = DatasetManifest(root=manifest.root, entries=entries, seed=seed, ratio=ratio)
    logger.info(
        f"Split {len(result)} samples: {len(result.train_entries)} train / {len(result.val_entries)} val"
    )
    return result


def augment(
    sample: PairedSample,
    generator: Optional[torch.Generator] = None,
    hflip_p: float = 0.5,
    vflip_p: float = 0.5,
) -> PairedSample:
    """Random horizontal/vertical flips applied identically to both modalities."""
    draws = torch.rand(2, generator=generator)
    dims = []
    if draws[0] < hflip_p:
        dims.append(-1)
    if draws[1] < vflip_p:
        dims.append(-2)
    if not dims:
        return sample
    return replace(
        sample,
        cfp=torch.flip(sample.cfp, dims=dims),
        ffa=torch.flip(sample.ffa, dims=dims) if sample.ffa is not None else None,
    )


class PairedImageDataset(Dataset):
    """Items are dicts with ``cfp``, ``ffa``, ``label`` (embedding index), ``class_index`` and ``sample_id``."""

    def __init__(
        self,
        entries: List[ManifestEntry],
        image_size: int,
        train: bool = False,
        seed: int = 0,
        hflip_p: float = 0.5,
        vflip_p: float = 0.5,
        load_ffa: bool = True,
        generator: Optional[torch.Generator] = None,
    ):
        self.entries = list(entries)
        self.image_size = image_size
        self.train = train
        self.hflip_p = hflip_p
        self.vflip_p = vflip_p
        self.load_ffa = load_ffa
        self.generator = generator if generator is not None else torch.Generator().manual_seed(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def load_sample(self, index: int) -> PairedSample:
        entry = self.entries[index]
        ffa = None
        if self.load_ffa:
            if not entry.ffa_path:
                raise DatasetError(f"Sample {entry.sample_id} has no FFA image")
            ffa = load_image_tensor(entry.ffa_path, self.image_size)
        return PairedSample(
            cfp=load_image_tensor(entry.cfp_path, self.image_size),
            ffa=ffa,
            category=entry.category,
            sample_id=entry.sample_id,
        )

    def __getitem__(self, index: int) -> dict:
        sample = self.load_sample(index)
        if self.train:
            sample = augment(sample, self.generator, self.hflip_p, self.vflip_p)
        item = {
            "cfp": sample.cfp,
            "label": sample.category.embedding_index,
            "class_index": sample.category.class_index,
            "sample_id": sample.sample_id,
        }
        if sample.ffa is not None:
            item["ffa"] = sample.ffa
        return item
