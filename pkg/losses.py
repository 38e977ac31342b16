import logging

import torch
import torch.nn.functional as F

from errors import NonFiniteLossError, ShapeError
from networks import warp

logger = logging.getLogger(__name__)


def _check_finite(name: str, scores: torch.Tensor) -> None:
    if not torch.isfinite(scores).all():
        raise NonFiniteLossError(f"non-finite {name} passed to adversarial loss")


def adversarial_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """-E[log D(y_t)] - E[log(1 - D(G(x)_t))] on noised real and generated images."""
    _check_finite("real_scores", real_scores)
    _check_finite("fake_scores", fake_scores)
    real_term = F.binary_cross_entropy(real_scores, torch.ones_like(real_scores))
    fake_term = F.binary_cross_entropy(fake_scores, torch.zeros_like(fake_scores))
    return real_term + fake_term


def adversarial_loss_g(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss -E[log D(G(x)_t)]."""
    _check_finite("fake_scores", fake_scores)
    return F.binary_cross_entropy(fake_scores, torch.ones_like(fake_scores))


def correction_loss(y: torch.Tensor, y_g: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between the real image and the registered generated image."""
    if y.shape != y_g.shape:
        raise ShapeError(f"real {tuple(y.shape)} and generated {tuple(y_g.shape)} differ")
    return (y - warp(y_g, field)).abs().mean()


def smoothness_loss(field: torch.Tensor) -> torch.Tensor:
    """Mean squared first-order differences of the displacement field."""
    dy = field[:, :, 1:, :] - field[:, :, :-1, :]
    dx = field[:, :, :, 1:] - field[:, :, :, :-1]
    return (dx.pow(2).mean() + dy.pow(2).mean()) / 2.0
