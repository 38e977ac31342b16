"""
Synthesis and classification metrics.

Distributional scores (FID, KID) work on ``FeatureSet`` matrices produced by a
pluggable extractor; LPIPS works on the extractor's intermediate feature maps.
Three extractors are provided:

* ``identity`` - pixels as the single layer, channel means as features
* ``random-projection`` - frozen, seeded random conv stack (hermetic default)
* ``inception`` - torchvision Inception-v3, pretrained when weights are given
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import roc_auc_score

from config import settings
from errors import ConfigError, MetricError, ShapeError
from models import DISEASE_CATEGORIES, MetricReport, MetricRow

logger = logging.getLogger(__name__)

LPIPS_EPS = 1e-10
SYNTHESIS_METRICS = ("FID", "KID", "LPIPS")
CLASSIFICATION_METRICS = ("ACC", "AUC", "SEN", "SPE")


@dataclass(frozen=True)
class FeatureSet:
    matrix: np.ndarray
    extractor: str
    source: Literal["real", "synthetic"] = "real"

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
        if matrix.ndim != 2:
            raise MetricError(f"feature matrix must be N x D, got shape {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise MetricError("feature matrix contains non-finite entries")
        object.__setattr__(self, "matrix", matrix)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def moments(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.n < 2:
            raise MetricError(f"at least 2 samples are needed for a covariance, got {self.n}")
        mu = self.matrix.mean(axis=0)
        sigma = np.atleast_2d(np.cov(self.matrix, rowvar=False, ddof=1))
        return mu, sigma


def _check_pair(a: FeatureSet, b: FeatureSet) -> None:
    if a.dim != b.dim:
        raise MetricError(f"feature dimensions differ: {a.dim} vs {b.dim}")


# FID
def _trace_sqrt_psd(matrix: np.ndarray) -> float:
    """Trace of the square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues = scipy.linalg.eigh(symmetric, eigvals_only=True)
    return float(np.sqrt(np.clip(eigenvalues, 0.0, None)).sum())


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    symmetric = (matrix + matrix.T) / 2.0
    eigenvalues, vectors = scipy.linalg.eigh(symmetric)
    return (vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))) @ vectors.T


def frechet_distance(
    mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray
) -> float:
    """
    Frechet distance between two Gaussians
    d^2 = ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^0.5)

    Tr((S1 S2)^0.5) is taken as Tr((A S2 A)^0.5) with A = S1^0.5, which keeps
    both square roots on symmetric matrices.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    sigma1, sigma2 = np.atleast_2d(sigma1).astype(np.float64), np.atleast_2d(sigma2).astype(np.float64)
    if mu1.shape != mu2.shape or sigma1.shape != sigma2.shape or sigma1.shape != (mu1.size, mu1.size):
        raise MetricError(
            f"moment shapes do not match: {mu1.shape}, {sigma1.shape} vs {mu2.shape}, {sigma2.shape}"
        )
    try:
        sqrt_sigma1 = _sqrt_psd(sigma1)
        trace_cross = _trace_sqrt_psd(sqrt_sigma1 @ sigma2 @ sqrt_sigma1)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as e:
        raise MetricError("matrix square root failed", details=str(e))

    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_cross)
    if not np.isfinite(value):
        raise MetricError("Frechet distance is not finite")
    return value


def fid(a: FeatureSet, b: FeatureSet) -> float:
    _check_pair(a, b)
    mu_a, sigma_a = a.moments()
    mu_b, sigma_b = b.moments()
    return frechet_distance(mu_a, sigma_a, mu_b, sigma_b)


# KID
def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def _unbiased_mmd2(x: np.ndarray, y: np.ndarray) -> float:
    m, n = x.shape[0], y.shape[0]
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    return float(term_xx + term_yy - 2.0 * k_xy.mean())


def kid(
    a: FeatureSet,
    b: FeatureSet,
    num_subsets: Optional[int] = None,
    subset_size: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Unbiased squared MMD with the cubic polynomial kernel
    Full-set estimate by default; with ``num_subsets`` the estimate is averaged
    over random subsets of ``subset_size`` rows drawn from each set
    """
    _check_pair(a, b)
    if a.n < 2 or b.n < 2:
        raise MetricError(f"KID needs at least 2 samples per set, got {a.n} and {b.n}")
    if not num_subsets:
        return _unbiased_mmd2(a.matrix, b.matrix)

    size = min(subset_size or min(a.n, b.n), a.n, b.n)
    if size < 2:
        raise MetricError("KID subsets need at least 2 samples")
    rng = np.random.default_rng(seed)
    estimates = [
        _unbiased_mmd2(
            a.matrix[rng.choice(a.n, size, replace=False)],
            b.matrix[rng.choice(b.n, size, replace=False)],
        )
        for _ in range(num_subsets)
    ]
    return float(np.mean(estimates))


# Feature extractors
class FeatureExtractor(nn.Module):
    """Maps (N, 3, H, W) images in [-1, 1] to pooled features and per-layer maps."""

    name = "extractor"

    def layers(self, images: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError

    def layer_weights(self) -> List[torch.Tensor]:
        raise NotImplementedError

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return torch.cat([layer.mean(dim=(2, 3)) for layer in self.layers(images)], dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)


class IdentityExtractor(FeatureExtractor):
    name = "identity"

    def __init__(self, channels: int = 3):
        super().__init__()
        self.channels = channels

    def layers(self, images: torch.Tensor) -> List[torch.Tensor]:
        return [images]

    def layer_weights(self) -> List[torch.Tensor]:
        return [torch.ones(self.channels)]


class RandomProjectionExtractor(FeatureExtractor):
    """Frozen random conv stack; deterministic for a given seed."""

    name = "random-projection"

    def __init__(self, seed: int = 0, channels: Sequence[int] = (16, 32, 64), in_channels: int = 3):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        previous = in_channels
        for width in channels:
            conv = nn.Conv2d(previous, width, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=generator) * (2.0 / (previous * 9)) ** 0.5
                )
                conv.bias.zero_()
            self.stages.append(conv)
            previous = width
        self.requires_grad_(False)
        self.eval()

    def layers(self, images: torch.Tensor) -> List[torch.Tensor]:
        outputs = []
        h = images
        for conv in self.stages:
            h = F.relu(conv(h))
            outputs.append(h)
        return outputs

    def layer_weights(self) -> List[torch.Tensor]:
        return [torch.ones(conv.out_channels) for conv in self.stages]


class InceptionExtractor(FeatureExtractor):
    """Inception-v3 trunk; taps Mixed_5d, Mixed_6e and Mixed_7c."""

    name = "inception"
    input_size = 299

    def __init__(self, weights_path: Optional[str] = None):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=False)
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            missing, _ = net.load_state_dict(state, strict=False)
            logger.info(f"Loaded inception weights from {weights_path} ({len(missing)} missing keys)")
        else:
            logger.warning("Inception extractor has no pretrained weights; scores are not comparable across runs")
        self.blocks = nn.ModuleList([
            nn.Sequential(
                net.Conv2d_1a_3x3, net.Conv2d_2a_3x3, net.Conv2d_2b_3x3, net.maxpool1,
                net.Conv2d_3b_1x1, net.Conv2d_4a_3x3, net.maxpool2,
                net.Mixed_5b, net.Mixed_5c, net.Mixed_5d,
            ),
            nn.Sequential(net.Mixed_6a, net.Mixed_6b, net.Mixed_6c, net.Mixed_6d, net.Mixed_6e),
            nn.Sequential(net.Mixed_7a, net.Mixed_7b, net.Mixed_7c),
        ])
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def layers(self, images: torch.Tensor) -> List[torch.Tensor]:
        h = F.interpolate(images, size=(self.input_size, self.input_size), mode="bilinear", align_corners=False)
        h = ((h + 1.0) / 2.0 - self.mean) / self.std
        outputs = []
        for block in self.blocks:
            h = block(h)
            outputs.append(h)
        return outputs

    def layer_weights(self) -> List[torch.Tensor]:
        return [torch.ones(288), torch.ones(768), torch.ones(2048)]

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.layers(images)[-1].mean(dim=(2, 3))


def build_extractor(name: str, seed: int = 0, weights_path: Optional[str] = None) -> FeatureExtractor:
    if name == "identity":
        return IdentityExtractor()
    if name == "random-projection":
        return RandomProjectionExtractor(seed=seed)
    if name == "inception":
        return InceptionExtractor(weights_path or settings.extractor_weights)
    raise ConfigError(f"Unknown feature extractor '{name}'")


@torch.no_grad()
def extract_features(
    images: torch.Tensor,
    extractor: FeatureExtractor,
    source: Literal["real", "synthetic"] = "real",
    batch_size: int = 16,
) -> FeatureSet:
    extractor.eval()
    device = extractor_device(extractor)
    chunks = [
        extractor.features(images[i:i + batch_size].to(device)).cpu()
        for i in range(0, images.shape[0], batch_size)
    ]
    return FeatureSet(torch.cat(chunks).double().numpy(), extractor=extractor.name, source=source)


def extractor_device(extractor: nn.Module) -> torch.device:
    for tensor in itertools.chain(extractor.parameters(), extractor.buffers()):
        return tensor.device
    return torch.device("cpu")


# LPIPS
def _unit_normalize(feat: torch.Tensor) -> torch.Tensor:
    norm = torch.sqrt(torch.sum(feat ** 2, dim=1, keepdim=True))
    return feat / (norm + LPIPS_EPS)


def lpips_per_image(img_a: torch.Tensor, img_b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Per-image perceptual distance, shape (N,)."""
    if img_a.shape != img_b.shape:
        raise ShapeError(f"image shapes differ: {tuple(img_a.shape)} vs {tuple(img_b.shape)}")
    device = extractor_device(extractor)
    img_a, img_b = img_a.to(device), img_b.to(device)
    distance = torch.zeros(img_a.shape[0], dtype=img_a.dtype, device=img_a.device)
    layers_a, layers_b = extractor.layers(img_a), extractor.layers(img_b)
    for feat_a, feat_b, weights in zip(layers_a, layers_b, extractor.layer_weights()):
        diff = (_unit_normalize(feat_a) - _unit_normalize(feat_b)) ** 2
        weighted = (diff * weights.to(diff).view(1, -1, 1, 1)).sum(dim=1)
        distance = distance + weighted.mean(dim=(1, 2))
    return distance


@torch.no_grad()
def lpips(img_a: torch.Tensor, img_b: torch.Tensor, extractor: FeatureExtractor) -> float:
    return float(lpips_per_image(img_a, img_b, extractor).mean())


# Synthesis report
def synthesis_report(
    pairs: Dict[str, Tuple[torch.Tensor, torch.Tensor]],
    extractor: FeatureExtractor,
    seed: int,
    kid_subsets: Optional[int] = None,
    kid_subset_size: Optional[int] = None,
) -> Tuple[MetricReport, MetricReport]:
    """
    FID/KID/LPIPS per category from ``{category: (real, synthetic)}`` batches
    Returns: (per-category report, pooled 'all' report)
    """
    rows: List[MetricRow] = []
    pooled_real, pooled_fake = [], []
    for category, (real, fake) in pairs.items():
        real_set = extract_features(real, extractor, "real")
        fake_set = extract_features(fake, extractor, "synthetic")
        values = {
            "FID": fid(real_set, fake_set),
            "KID": kid(real_set, fake_set, kid_subsets, kid_subset_size, seed),
            "LPIPS": lpips(real, fake, extractor),
        }
        rows.extend(
            MetricRow(category=category, metric=m, value=values[m], seed=seed, extractor=extractor.name)
            for m in SYNTHESIS_METRICS
        )
        pooled_real.append(real)
        pooled_fake.append(fake)
        logger.info(
            f"{category}: FID={values['FID']:.4f} KID={values['KID']:.5f} LPIPS={values['LPIPS']:.4f}"
        )

    real_all, fake_all = torch.cat(pooled_real), torch.cat(pooled_fake)
    real_set = extract_features(real_all, extractor, "real")
    fake_set = extract_features(fake_all, extractor, "synthetic")
    summary = {
        "FID": fid(real_set, fake_set),
        "KID": kid(real_set, fake_set, kid_subsets, kid_subset_size, seed),
        "LPIPS": lpips(real_all, fake_all, extractor),
    }
    summary_rows = [
        MetricRow(category="all", metric=m, value=summary[m], seed=seed, extractor=extractor.name)
        for m in SYNTHESIS_METRICS
    ]
    metadata = {"seed": seed, "extractor": extractor.name}
    return MetricReport(rows=rows, metadata=metadata), MetricReport(rows=summary_rows, metadata=metadata)


# Classification
def _as_score_matrix(pred_scores) -> np.ndarray:
    scores = np.asarray(pred_scores, dtype=np.float64)
    if scores.ndim == 1:
        # positive-class scores of a binary task
        scores = np.stack([1.0 - scores, scores], axis=1)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise MetricError(f"scores must be N x C with C >= 2, got shape {scores.shape}")
    if not np.isfinite(scores).all():
        raise MetricError("scores contain non-finite values")
    return scores


def _class_names(n_classes: int) -> List[str]:
    if n_classes == len(DISEASE_CATEGORIES):
        return [category.value for category in DISEASE_CATEGORIES]
    return [f"class_{k}" for k in range(n_classes)]


def classification_metrics(
    pred_scores,
    labels,
    seed: int = 0,
    source: str = "classifier",
    per_class: bool = True,
) -> MetricReport:
    """
    ACC (%) from argmax; SEN and SPE (%) and AUC (fraction) one-vs-rest per
    class, macro-averaged over the classes where each is defined
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 0:
        raise MetricError("cannot compute classification metrics on empty input")
    scores = _as_score_matrix(pred_scores)
    if scores.shape[0] != labels.size:
        raise MetricError(f"{scores.shape[0]} score rows for {labels.size} labels")
    n_classes = scores.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise MetricError(f"labels must lie in [0, {n_classes - 1}]")
    if np.unique(labels).size < 2:
        raise MetricError("AUC is undefined for a single-class label set")

    predicted = scores.argmax(axis=1)
    names = _class_names(n_classes)
    rows: List[MetricRow] = []
    sens, spes, aucs = [], [], []
    for k in range(n_classes):
        truth = labels == k
        guess = predicted == k
        per = {}
        if truth.any():
            per["SEN"] = 100.0 * float((guess & truth).sum()) / float(truth.sum())
            sens.append(per["SEN"])
        if (~truth).any():
            per["SPE"] = 100.0 * float((~guess & ~truth).sum()) / float((~truth).sum())
            spes.append(per["SPE"])
        if truth.any() and (~truth).any():
            per["AUC"] = float(roc_auc_score(truth.astype(int), scores[:, k]))
            aucs.append(per["AUC"])
        if per_class:
            rows.extend(
                MetricRow(category=names[k], metric=m, value=per[m], seed=seed, extractor=source)
                for m in ("SEN", "SPE", "AUC")
                if m in per
            )

    macro = {
        "ACC": 100.0 * float((predicted == labels).mean()),
        "AUC": float(np.mean(aucs)),
        "SEN": float(np.mean(sens)),
        "SPE": float(np.mean(spes)),
    }
    summary = [
        MetricRow(category="all", metric=m, value=macro[m], seed=seed, extractor=source)
        for m in CLASSIFICATION_METRICS
    ]
    return MetricReport(rows=summary + rows, metadata={"seed": seed, "source": source, "n": int(labels.size)})
