"""
Dual-modality fundus disease classifier.

Each enabled modality (CFP, FFA) has its own residual backbone; pooled features
are concatenated and fed to one fully connected layer over the five disease
classes. Synthetic FFA comes from a trained synthesis checkpoint with the
category input fixed to 'none'.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from torchvision.models import ResNet, resnet18, resnet50
from torchvision.models.resnet import BasicBlock
from tqdm import tqdm

from config import settings
from dataset import (
    FFA_FILENAME,
    MANIFEST_FILENAME,
    PairedImageDataset,
    split,
    write_manifest_csv,
)
from errors import ConfigError, DatasetError, ShapeError
from metrics import classification_metrics
from models import (
    DISEASE_CATEGORIES,
    CategoryLabel,
    DatasetManifest,
    DiagnosisConfig,
    MetricReport,
    ModalityConfig,
    Variant,
)
from storage import ArtifactStore
from training import load_generator, synthesize
from utils import load_image_tensor, resolve_device, save_image, seed_everything, tensor_to_image

logger = logging.getLogger(__name__)

NUM_CLASSES = len(DISEASE_CATEGORIES)
FEATURE_DIMS = {"resnet10": 512, "resnet18": 512, "resnet50": 2048}
SYNTHETIC_CACHE_DIR = "synthetic_ffa"


def _build_resnet(name: str, pretrained: bool) -> ResNet:
    if name == "resnet10":
        if pretrained:
            raise ConfigError("No pretrained weights exist for resnet10")
        return ResNet(BasicBlock, [1, 1, 1, 1])
    if name == "resnet18":
        return resnet18(weights="DEFAULT" if pretrained else None)
    if name == "resnet50":
        return resnet50(weights="DEFAULT" if pretrained else None)
    raise ConfigError(f"Unknown backbone '{name}'")


class Backbone(nn.Module):
    """Residual trunk with the classifier removed; emits a pooled feature vector."""

    def __init__(self, name: str = "resnet10", image_size: int = 128, pretrained: bool = False):
        super().__init__()
        self.name = name
        self.image_size = image_size
        self.net = _build_resnet(name, pretrained)
        self.feature_dim = FEATURE_DIMS[name]
        self.net.fc = nn.Identity()

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        expected = (3, self.image_size, self.image_size)
        if img.dim() != 4 or tuple(img.shape[1:]) != expected:
            raise ShapeError(f"backbone expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(img.shape)}")
        return self.net(img)


def extract_features(img: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Feature vector(s) for one (3, H, W) image or a batch."""
    if img.dim() == 3:
        return backbone(img.unsqueeze(0))[0]
    return backbone(img)


def classify(
    features_cfp: Optional[torch.Tensor],
    features_ffa: Optional[torch.Tensor],
    head: nn.Linear,
) -> torch.Tensor:
    """Softmax class probabilities from the concatenated modality features."""
    parts = [f for f in (features_cfp, features_ffa) if f is not None]
    if not parts:
        raise ShapeError("at least one modality's features are required")
    features = torch.cat(parts, dim=-1)
    if features.shape[-1] != head.in_features:
        raise ShapeError(f"head expects {head.in_features} features, got {features.shape[-1]}")
    return F.softmax(head(features), dim=-1)


class DiagnosisNet(nn.Module):
    def __init__(self, modality_config: ModalityConfig, config: DiagnosisConfig):
        super().__init__()
        self.modalities = modality_config.modalities
        self.backbones = nn.ModuleDict({
            name: Backbone(config.backbone, config.image_size, config.pretrained) for name in self.modalities
        })
        width = sum(backbone.feature_dim for backbone in self.backbones.values())
        self.head = nn.Linear(width, NUM_CLASSES)

    def features(self, inputs: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {name: self.backbones[name](inputs[name]) for name in self.modalities}

    def forward(self, inputs: Dict[str, torch.Tensor]) -> torch.Tensor:
        """Class logits."""
        features = self.features(inputs)
        return self.head(torch.cat([features[name] for name in self.modalities], dim=-1))

    def predict_proba(self, inputs: Dict[str, torch.Tensor]) -> torch.Tensor:
        features = self.features(inputs)
        return classify(features.get("cfp"), features.get("ffa"), self.head)


# Synthetic FFA
class FFASynthesizer:
    """Trained generator wrapped for diagnosis: category input is always 'none'."""

    def __init__(
        self,
        checkpoint: Union[str, Path],
        device: Optional[torch.device] = None,
        expected_variant: Optional[Variant] = None,
    ):
        self.checkpoint = str(checkpoint)
        self.device = device or resolve_device()
        self.generator, self.header = load_generator(checkpoint, self.device, expected_variant)

    @property
    def image_size(self) -> int:
        return self.header.train_config.image_size

    def __call__(self, cfp_batch: torch.Tensor) -> Tuple[torch.Tensor, dict]:
        size = cfp_batch.shape[-2:]
        x = cfp_batch.to(self.device)
        if tuple(size) != (self.image_size, self.image_size):
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)
        labels = torch.full((x.shape[0],), CategoryLabel.NONE.embedding_index, dtype=torch.long, device=self.device)
        ffa = synthesize(self.generator, x, labels)
        if tuple(ffa.shape[-2:]) != tuple(size):
            ffa = F.interpolate(ffa, size=tuple(size), mode="bilinear", align_corners=False)
        metadata = {
            "checkpoint": self.checkpoint,
            "variant": self.header.variant.value,
            "category_input": [CategoryLabel.NONE.value] * x.shape[0],
        }
        return ffa.clamp(-1, 1).cpu(), metadata


def synthesize_ffa_for_diagnosis(
    cfp_batch: torch.Tensor,
    checkpoint: Union[str, Path],
    device: Optional[torch.device] = None,
    expected_variant: Optional[Variant] = None,
) -> Tuple[torch.Tensor, dict]:
    """
    Synthesize FFA for a CFP batch with every category set to 'none'
    Returns: (ffa batch shaped like the input, run metadata)
    """
    return FFASynthesizer(checkpoint, device, expected_variant)(cfp_batch)


def cache_synthetic_ffa(
    manifest: DatasetManifest,
    synthesizer: FFASynthesizer,
    out_root: Union[str, Path],
    batch_size: int = 8,
) -> DatasetManifest:
    """
    Write synthetic FFA for every sample as ``<out_root>/<category>/<sample_id>/ffa.png``
    Returns: manifest pointing at the original CFP and the cached FFA
    """
    out_root = Path(out_root)
    entries = list(manifest.entries)
    cached = []
    for start in tqdm(range(0, len(entries), batch_size), desc="synthesizing FFA", disable=not settings.progress_bars):
        chunk = entries[start:start + batch_size]
        cfp = torch.stack([load_image_tensor(e.cfp_path, synthesizer.image_size) for e in chunk])
        ffa, _ = synthesizer(cfp)
        for entry, image in zip(chunk, ffa):
            target = out_root / entry.category.value / entry.sample_id / FFA_FILENAME
            save_image(tensor_to_image(image), target)
            cached.append(entry.model_copy(update={"ffa_path": str(target)}))

    result = DatasetManifest(root=str(out_root), entries=tuple(cached), seed=manifest.seed, ratio=manifest.ratio)
    write_manifest_csv(result, out_root / MANIFEST_FILENAME)
    metadata = {
        "checkpoint": Path(synthesizer.checkpoint).as_posix(),
        "variant": synthesizer.header.variant.value,
        "category_input": CategoryLabel.NONE.value,
        "samples": len(cached),
    }
    (out_root / "synthesis.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    logger.info(f"Cached {len(cached)} synthetic FFA images under {out_root}")
    return result


# Experiment
def _inputs(batch: dict, modalities: List[str], device: torch.device) -> Dict[str, torch.Tensor]:
    return {name: batch[name].to(device) for name in modalities}


@torch.no_grad()
def predict(model: DiagnosisNet, loader: DataLoader, device: torch.device) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    model.eval()
    probabilities, labels, ids = [], [], []
    for batch in loader:
        probabilities.append(model.predict_proba(_inputs(batch, model.modalities, device)).cpu())
        labels.append(batch["class_index"])
        ids.extend(batch["sample_id"])
    return torch.cat(probabilities).double().numpy(), torch.cat(labels).numpy(), ids


def run_diagnosis_experiment(
    manifest: DatasetManifest,
    modality_config: ModalityConfig,
    config: DiagnosisConfig,
    store: ArtifactStore,
    device: Optional[torch.device] = None,
    progress: Optional[bool] = None,
) -> MetricReport:
    """
    Train the classifier on the train split and score it on validation
    Persists ``diagnosis_report.csv``, ``predictions.csv`` and per-epoch losses
    """
    device = device or resolve_device()
    synthesizer = None
    split_seed, split_ratio = config.seed, config.split_ratio
    if modality_config.ffa_source == "synthetic":
        synthesizer = FFASynthesizer(modality_config.checkpoint, device, modality_config.variant)
        # validation samples must be unseen by the generator too
        split_seed = synthesizer.header.train_config.seed
        split_ratio = synthesizer.header.train_config.split_ratio
        if (split_seed, split_ratio) != (config.seed, config.split_ratio):
            logger.warning(
                f"Splitting with the synthesis run's seed={split_seed} ratio={split_ratio} "
                f"instead of seed={config.seed} ratio={config.split_ratio}"
            )
    if not (manifest.train_entries and manifest.val_entries):
        manifest = split(manifest, split_ratio, split_seed)
    store.initialize()
    store.path("diag_losses.csv").unlink(missing_ok=True)

    if synthesizer is not None:
        manifest = cache_synthetic_ffa(manifest, synthesizer, store.path(SYNTHETIC_CACHE_DIR), config.batch_size)
    load_ffa = modality_config.ffa_source != "none"
    for entry in manifest.entries:
        if load_ffa and not entry.ffa_path:
            raise DatasetError(f"Sample {entry.sample_id} has no FFA image")
        if not modality_config.use_cfp and not entry.cfp_path:
            raise DatasetError(f"Sample {entry.sample_id} has no CFP image")

    seed_everything(config.seed)
    model = DiagnosisNet(modality_config, config).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    criterion = nn.CrossEntropyLoss()

    train_set = PairedImageDataset(
        manifest.train_entries, config.image_size, train=True, seed=config.seed,
        hflip_p=config.hflip_p, vflip_p=config.vflip_p, load_ffa=load_ffa,
    )
    val_set = PairedImageDataset(manifest.val_entries, config.image_size, train=False, load_ffa=load_ffa)
    # batch norm cannot train on a trailing batch of one
    train_loader = DataLoader(
        train_set, batch_size=config.batch_size, shuffle=True, num_workers=settings.num_workers,
        generator=torch.Generator().manual_seed(config.seed),
        drop_last=len(train_set) % config.batch_size == 1,
    )
    val_loader = DataLoader(val_set, batch_size=config.batch_size, shuffle=False, num_workers=settings.num_workers)
    show_progress = settings.progress_bars if progress is None else progress

    logger.info(
        f"Diagnosis run: modalities={model.modalities} backbone={config.backbone} "
        f"train={len(train_set)} val={len(val_set)}"
    )
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for batch in tqdm(train_loader, desc=f"diag epoch {epoch}/{config.epochs}", disable=not show_progress, leave=False):
            logits = model(_inputs(batch, model.modalities, device))
            loss = criterion(logits, batch["class_index"].to(device))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss) * logits.shape[0]
            count += logits.shape[0]
        store.append_csv_row("diag_losses.csv", {"epoch": epoch, "loss": total / count}, ["epoch", "loss"])
        logger.info(f"Diagnosis epoch {epoch}: loss={total / count:.4f}")

    probabilities, labels, ids = predict(model, val_loader, device)
    report = classification_metrics(probabilities, labels, seed=config.seed, source=config.backbone)
    report.metadata.update({
        "modalities": "+".join(model.modalities),
        "ffa_source": modality_config.ffa_source,
        "checkpoint": modality_config.checkpoint,
        "split_seed": manifest.seed,
    })
    store.write_csv("diagnosis_report.csv", report.to_frame())

    columns = ["sample_id", "label"] + [f"p_{c.value}" for c in DISEASE_CATEGORIES]
    rows = [
        {"sample_id": sid, "label": int(label), **{f"p_{c.value}": float(p[k]) for k, c in enumerate(DISEASE_CATEGORIES)}}
        for sid, label, p in zip(ids, labels, probabilities)
    ]
    store.write_csv("predictions.csv", pd.DataFrame(rows, columns=columns))
    logger.info(
        f"Diagnosis ({report.metadata['modalities']}): ACC={report.value('all', 'ACC'):.2f}% "
        f"AUC={report.value('all', 'AUC'):.4f}"
    )
    return report
