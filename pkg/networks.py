"""
Learnable networks of the synthesis model.

* ``FFAGenerator`` - 64-channel input projection, optional category
  embedding fused by broadcast addition, then a residual encoder-decoder.
* ``NoisedPatchDiscriminator`` - patch classifier over diffusion-noised
  images, conditioned on the diffusion step through a learned time embedding.
* ``RegistrationUNet`` - predicts a dense displacement field (pixels) that
  aligns the generated image to the real one; ``warp`` applies it.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ScheduleError, ShapeError
from models import TrainConfig

logger = logging.getLogger(__name__)

LATENT_CHANNELS = 64
NUM_CATEGORY_ROWS = 6  # none + five diseases


def init_weights(module: nn.Module, gain: float = 0.02) -> None:
    """Normal(0, gain) convolutions, zero biases, unit-centred norm scales."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.weight is not None:
            nn.init.normal_(m.weight, 1.0, gain)
            nn.init.zeros_(m.bias)


def count_parameters(module: Optional[nn.Module]) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


# Generator
class InputProjection(nn.Module):
    def __init__(self, in_channels: int = 3, out_channels: int = LATENT_CHANNELS):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(
            in_channels, out_channels, kernel_size=7, padding=3, padding_mode="reflect"
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (B, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        return self.conv(x)


class CategoryEmbedding(nn.Module):
    """One learned 64-vector per category; row 0 ('none') is pinned to zero."""

    def __init__(self, dim: int = LATENT_CHANNELS):
        super().__init__()
        self.table = nn.Embedding(NUM_CATEGORY_ROWS, dim, padding_idx=0)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.table(labels)


def fuse(feat: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
    """Broadcast-add a (B, C) embedding across every spatial position of (B, C, H, W)."""
    return feat + c.view(c.shape[0], c.shape[1], 1, 1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class FFAGenerator(nn.Module):
    def __init__(self, n_residual_blocks: int = 9, use_category: bool = True):
        super().__init__()
        self.use_category = use_category
        self.projection = InputProjection()
        self.category_embedding = CategoryEmbedding() if use_category else None

        c = LATENT_CHANNELS
        # no normalization directly after fusion: instance norm would cancel
        # the spatially constant category offset
        layers = [nn.ReLU(inplace=False)]
        for mult in (1, 2):
            layers += [
                nn.Conv2d(c * mult, c * mult * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(c * mult * 2),
                nn.ReLU(inplace=True),
            ]
        layers += [ResidualBlock(c * 4) for _ in range(n_residual_blocks)]
        for mult in (4, 2):
            layers += [
                nn.ConvTranspose2d(
                    c * mult, c * mult // 2, kernel_size=3, stride=2, padding=1, output_padding=1
                ),
                nn.InstanceNorm2d(c * mult // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 3, kernel_size=7), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def encode_input(self, x: torch.Tensor) -> torch.Tensor:
        return self.projection(x)

    def embed_category(self, labels: torch.Tensor) -> torch.Tensor:
        if self.category_embedding is None:
            return torch.zeros(labels.shape[0], LATENT_CHANNELS, device=labels.device)
        return self.category_embedding(labels)

    def generate(self, fused: torch.Tensor) -> torch.Tensor:
        return self.decoder(fused)

    def forward(self, x: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        feat = self.encode_input(x)
        if self.category_embedding is not None and labels is not None:
            feat = fuse(feat, self.embed_category(labels))
        return self.generate(feat)


# Discriminator
def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class NoisedPatchDiscriminator(nn.Module):
    """Patch discriminator D(z_t, t) returning a score map in [0, 1]."""

    def __init__(
        self,
        in_channels: int = 3,
        ndf: int = 64,
        num_steps: int = 1000,
        time_conditioned: bool = True,
        time_dim: int = 128,
    ):
        super().__init__()
        self.num_steps = num_steps
        self.time_conditioned = time_conditioned
        self.time_dim = time_dim

        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, ndf, kernel_size=4, stride=2, padding=1),
            nn.LeakyReLU(0.2, True),
        )
        self.conv1 = nn.Conv2d(ndf, ndf * 2, kernel_size=4, stride=2, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm2d(ndf * 2)
        if time_conditioned:
            self.time_mlp = nn.Sequential(
                nn.Linear(time_dim, ndf * 2), nn.SiLU(), nn.Linear(ndf * 2, ndf * 2)
            )
        else:
            self.time_mlp = None
        self.head = nn.Sequential(
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 2, ndf * 4, kernel_size=4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(ndf * 4),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 4, ndf * 8, kernel_size=4, stride=1, padding=1, bias=False),
            nn.InstanceNorm2d(ndf * 8),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * 8, 1, kernel_size=4, stride=1, padding=1),
        )

    def forward(self, img: torch.Tensor, t: Union[int, torch.Tensor]) -> torch.Tensor:
        steps = torch.as_tensor(t, dtype=torch.long, device=img.device)
        if steps.dim() == 0:
            steps = steps.expand(img.shape[0])
        if steps.min() < 0 or steps.max() >= self.num_steps:
            raise ScheduleError(f"step index out of range [0, {self.num_steps - 1}]")

        h = self.norm1(self.conv1(self.stem(img)))
        if self.time_mlp is not None:
            emb = self.time_mlp(timestep_embedding(steps, self.time_dim))
            h = h + emb.view(emb.shape[0], emb.shape[1], 1, 1)
        return torch.sigmoid(self.head(h))


# Registration
def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2, True),
        nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2, True),
    )


class RegistrationUNet(nn.Module):
    """U-Net over concat(moving, fixed) producing a 2-channel (dx, dy) field."""

    def __init__(self, in_channels: int = 6, channels: tuple = (32, 64, 128)):
        super().__init__()
        self.depth = len(channels)
        self.encoders = nn.ModuleList()
        previous = in_channels
        for width in channels:
            self.encoders.append(_conv_block(previous, width))
            previous = width
        self.downs = nn.ModuleList(
            nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1) for width in channels
        )
        self.bottleneck = _conv_block(channels[-1], channels[-1])
        self.decoders = nn.ModuleList()
        previous = channels[-1]
        for width in reversed(channels):
            self.decoders.append(_conv_block(previous + width, width))
            previous = width
        self.flow = nn.Conv2d(channels[0], 2, kernel_size=3, padding=1)
        # identity alignment at initialization
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        if moving.shape != fixed.shape:
            raise ShapeError(
                f"registration inputs differ: {tuple(moving.shape)} vs {tuple(fixed.shape)}"
            )
        factor = 2 ** self.depth
        if moving.shape[-1] % factor or moving.shape[-2] % factor:
            raise ShapeError(f"spatial size must be divisible by {factor}")

        h = torch.cat([moving, fixed], dim=1)
        skips = []
        for encoder, down in zip(self.encoders, self.downs):
            h = encoder(h)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = decoder(torch.cat([h, skip], dim=1))
        return self.flow(h)


def warp(img: torch.Tensor, field: torch.Tensor) -> torch.Tensor:
    """Bilinearly resample ``img`` at p + field(p), clamping to the image border.

    ``field`` is (B, 2, H, W) in pixels, channel 0 horizontal, channel 1
    vertical. A zero field returns ``img`` exactly.
    """
    if img.dim() != 4 or field.dim() != 4 or field.shape[1] != 2:
        raise ShapeError(f"expected (B,C,H,W) image and (B,2,H,W) field, got {tuple(img.shape)}, {tuple(field.shape)}")
    if img.shape[0] != field.shape[0] or img.shape[-2:] != field.shape[-2:]:
        raise ShapeError(f"image {tuple(img.shape)} and field {tuple(field.shape)} do not match")

    batch, channels, height, width = img.shape
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=field.dtype, device=field.device),
        torch.arange(width, dtype=field.dtype, device=field.device),
        indexing="ij",
    )
    px = (xs + field[:, 0]).clamp(0, width - 1)
    py = (ys + field[:, 1]).clamp(0, height - 1)

    x0 = px.detach().floor()
    y0 = py.detach().floor()
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()
    x1i = (x0i + 1).clamp(max=width - 1)
    y1i = (y0i + 1).clamp(max=height - 1)

    flat = img.reshape(batch, channels, height * width)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        index = (yi * width + xi).view(batch, 1, height * width).expand(-1, channels, -1)
        return flat.gather(2, index).view(batch, channels, height, width)

    top = (1 - wx) * gather(y0i, x0i) + wx * gather(y0i, x1i)
    bottom = (1 - wx) * gather(y1i, x0i) + wx * gather(y1i, x1i)
    return (1 - wy) * top + wy * bottom


@dataclass
class SynthesisNetworks:
    generator: FFAGenerator
    discriminator: NoisedPatchDiscriminator
    registration: RegistrationUNet

    def train(self) -> None:
        for net in (self.generator, self.discriminator, self.registration):
            net.train()

    def eval(self) -> None:
        for net in (self.generator, self.discriminator, self.registration):
            net.eval()

    def to(self, device: torch.device) -> "SynthesisNetworks":
        for net in (self.generator, self.discriminator, self.registration):
            net.to(device)
        return self

    def parameter_counts(self) -> dict:
        return {
            "generator": count_parameters(self.generator),
            "discriminator": count_parameters(self.discriminator),
            "registration": count_parameters(self.registration),
        }


def build_networks(config: TrainConfig) -> SynthesisNetworks:
    """Instantiate the three networks for ``config.variant`` (seed before calling)."""
    generator = FFAGenerator(
        n_residual_blocks=config.n_residual_blocks,
        use_category=config.variant.uses_category,
    )
    discriminator = NoisedPatchDiscriminator(
        num_steps=config.schedule.num_steps,
        time_conditioned=config.variant.uses_diffusion,
    )
    registration = RegistrationUNet()
    init_weights(generator)
    init_weights(discriminator)
    networks = SynthesisNetworks(generator, discriminator, registration)
    logger.info(f"Built networks for variant '{config.variant.value}': {networks.parameter_counts()}")
    return networks
