"""
Alternating optimization of the synthesis model.

One step: sample t per image from the controller, noise real and (detached)
generated FFA at the same t, update D, feed D's mean real score to the
controller, then update G and R jointly on the non-saturating adversarial
loss plus the weighted correction and smoothness losses.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from config import settings
from dataset import PairedImageDataset, split, write_manifest_csv
from diffusion_schedule import forward_diffuse, schedule_from_config
from dynamic_controller import ControllerTrace, new_controller, sample_t, update
from errors import CheckpointError, DatasetError, NonFiniteLossError
from losses import adversarial_loss_d, adversarial_loss_g, correction_loss, smoothness_loss
from models import (
    CategoryLabel,
    CheckpointHeader,
    ControllerState,
    DatasetManifest,
    EpochSummary,
    StepReport,
    TrainConfig,
    Variant,
)
from networks import FFAGenerator, SynthesisNetworks, build_networks
from storage import ArtifactStore, load_checkpoint
from utils import make_image_grid, resolve_device, seed_everything

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "loss_g_adv", "loss_d", "loss_corr", "loss_smooth", "r", "T"]
STEP_COLUMNS = ["epoch", "step", "loss_g_adv", "loss_d", "loss_corr", "loss_smooth", "d_real_score", "r", "T"]
TRACE_FILENAME = "controller_trace.txt"


def set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for parameter in module.parameters():
        parameter.requires_grad_(flag)


class SynthesisTrainer:
    def __init__(
        self,
        config: TrainConfig,
        device: Optional[torch.device] = None,
        store: Optional[ArtifactStore] = None,
    ):
        self.config = config
        self.device = device or resolve_device()
        self.rng = seed_everything(config.seed)
        # data order and augmentation flips, checkpointed with the rest of the state
        self.shuffle_rng = torch.Generator().manual_seed(config.seed)
        self.augment_rng = torch.Generator().manual_seed(config.seed)
        self.networks: SynthesisNetworks = build_networks(config).to(self.device)
        self.schedule = schedule_from_config(config.schedule)
        self.controller: ControllerState = new_controller(
            config.t_init, config.controller_lambda, 0, config.schedule.num_steps - 1
        )
        betas = tuple(config.adam_betas)
        self.optimizer_d = torch.optim.Adam(
            self.networks.discriminator.parameters(),
            lr=config.lr,
            betas=betas,
            weight_decay=config.weight_decay,
        )
        self.optimizer_g = torch.optim.Adam(
            list(self.networks.generator.parameters()) + list(self.networks.registration.parameters()),
            lr=config.lr,
            betas=betas,
            weight_decay=config.weight_decay,
        )
        self.trace: Optional[ControllerTrace] = None
        if store is not None and config.variant.uses_diffusion:
            self.trace = ControllerTrace(store.path(TRACE_FILENAME))
            self.trace.initialize()
        self.d_steps = 0

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def _labels(self, batch: dict, size: int) -> torch.Tensor:
        if self.variant.uses_category:
            return torch.as_tensor(batch["label"], dtype=torch.long).to(self.device)
        return torch.full((size,), CategoryLabel.NONE.embedding_index, dtype=torch.long, device=self.device)

    def _randn(self, like: torch.Tensor) -> torch.Tensor:
        return torch.randn(like.shape, generator=self.rng, dtype=like.dtype).to(self.device)

    def _ensure_finite(self, losses: Dict[str, torch.Tensor], epoch: int, step: int) -> None:
        bad = [name for name, value in losses.items() if not torch.isfinite(value).all()]
        if bad:
            snapshot = {
                "epoch": epoch,
                "step": step,
                "values": {name: float(value.detach().float().mean()) for name, value in losses.items()},
                "controller": self.controller.model_dump(),
            }
            logger.error(f"Non-finite loss {bad} at epoch {epoch} step {step}: {snapshot}")
            raise NonFiniteLossError(f"non-finite loss {bad}", snapshot=snapshot)

    def train_step(self, batch: dict, epoch: int = 0, step: int = 0) -> StepReport:
        start = time.perf_counter()
        G, D, R = self.networks.generator, self.networks.discriminator, self.networks.registration
        self.networks.train()

        x = batch["cfp"].to(self.device)
        y = batch["ffa"].to(self.device)
        labels = self._labels(batch, x.shape[0])
        y_g = G(x, labels)

        if self.variant.uses_diffusion:
            t = sample_t(self.controller, self.rng, size=x.shape[0]).to(self.device)
            noise_real = self._randn(y)
            noise_fake = self._randn(y)
            real_input = forward_diffuse(self.schedule, y, t, noise_real)
            fake_input = forward_diffuse(self.schedule, y_g.detach(), t, noise_fake)
        else:
            t = torch.zeros(x.shape[0], dtype=torch.long, device=self.device)
            real_input = y
            fake_input = y_g.detach()

        # discriminator
        set_requires_grad(D, True)
        self.optimizer_d.zero_grad(set_to_none=True)
        real_scores = D(real_input, t)
        fake_scores = D(fake_input, t)
        self._ensure_finite({"real_scores": real_scores, "fake_scores": fake_scores}, epoch, step)
        loss_d = adversarial_loss_d(real_scores, fake_scores)
        self._ensure_finite({"loss_d": loss_d}, epoch, step)
        loss_d.backward()
        self.optimizer_d.step()
        d_real_score = min(max(float(real_scores.detach().mean()), 0.0), 1.0)

        if self.variant.uses_diffusion:
            self.d_steps += 1
            if self.d_steps % self.config.controller_every == 0:
                self.controller = update(self.controller, d_real_score)
                if self.trace is not None:
                    self.trace.append(self.controller, d_real_score)

        # generator + registration
        set_requires_grad(D, False)
        self.optimizer_g.zero_grad(set_to_none=True)
        if self.variant.uses_diffusion:
            fake_for_g = forward_diffuse(self.schedule, y_g, t, noise_fake)
        else:
            fake_for_g = y_g
        fake_scores_g = D(fake_for_g, t)
        self._ensure_finite({"fake_scores_g": fake_scores_g}, epoch, step)
        loss_g_adv = adversarial_loss_g(fake_scores_g)
        field = R(y_g, y)
        loss_corr = correction_loss(y, y_g, field)
        loss_smooth = smoothness_loss(field)
        total = loss_g_adv + self.config.lambda_corr * loss_corr + self.config.lambda_smooth * loss_smooth
        self._ensure_finite(
            {"loss_g_adv": loss_g_adv, "loss_corr": loss_corr, "loss_smooth": loss_smooth}, epoch, step
        )
        total.backward()
        self.optimizer_g.step()
        set_requires_grad(D, True)

        return StepReport(
            epoch=epoch,
            step=step,
            loss_g_adv=float(loss_g_adv),
            loss_d=float(loss_d),
            loss_corr=float(loss_corr),
            loss_smooth=float(loss_smooth),
            d_real_score=d_real_score,
            r=self.controller.r,
            T=self.controller.T,
            seconds=time.perf_counter() - start,
        )

    # Checkpoints
    def header(self, epoch: int) -> CheckpointHeader:
        return CheckpointHeader(
            variant=self.variant,
            diffusion_enabled=self.variant.uses_diffusion,
            category_enabled=self.variant.uses_category,
            schedule=self.config.schedule,
            controller=self.controller,
            epoch=epoch,
            train_config=self.config,
        )

    def state_blocks(self) -> Dict[str, dict]:
        return {
            "generator": self.networks.generator.state_dict(),
            "discriminator": self.networks.discriminator.state_dict(),
            "registration": self.networks.registration.state_dict(),
            "optimizer_g": self.optimizer_g.state_dict(),
            "optimizer_d": self.optimizer_d.state_dict(),
            "rng": self.rng.get_state(),
            "data": {
                "shuffle_rng": self.shuffle_rng.get_state(),
                "augment_rng": self.augment_rng.get_state(),
                "d_steps": torch.tensor(self.d_steps),
            },
        }

    def load_state(self, path: Union[str, Path]) -> CheckpointHeader:
        header, blocks = load_checkpoint(path, map_location=self.device)
        if header.variant != self.variant:
            raise CheckpointError(
                f"Checkpoint variant '{header.variant.value}' does not match '{self.variant.value}'"
            )
        self.networks.generator.load_state_dict(blocks["generator"])
        self.networks.discriminator.load_state_dict(blocks["discriminator"])
        self.networks.registration.load_state_dict(blocks["registration"])
        self.optimizer_g.load_state_dict(blocks["optimizer_g"])
        self.optimizer_d.load_state_dict(blocks["optimizer_d"])
        if "rng" in blocks:
            self.rng.set_state(blocks["rng"].cpu())
        if "data" in blocks:
            self.shuffle_rng.set_state(blocks["data"]["shuffle_rng"].cpu())
            self.augment_rng.set_state(blocks["data"]["augment_rng"].cpu())
            self.d_steps = int(blocks["data"]["d_steps"])
        if header.controller is not None:
            self.controller = header.controller
        logger.info(f"Resumed from {path} at epoch {header.epoch}")
        return header


@dataclass
class TrainingResult:
    history: List[EpochSummary] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    manifest: Optional[DatasetManifest] = None

    @property
    def final_checkpoint(self) -> Optional[Path]:
        return self.checkpoints[-1] if self.checkpoints else None


@torch.no_grad()
def synthesize(
    generator: FFAGenerator, cfp: torch.Tensor, labels: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Run the generator in eval mode; ``labels=None`` means category 'none'."""
    generator.eval()
    if labels is None:
        labels = torch.full(
            (cfp.shape[0],), CategoryLabel.NONE.embedding_index, dtype=torch.long, device=cfp.device
        )
    return generator(cfp, labels)


def load_generator(
    path: Union[str, Path],
    device: Optional[torch.device] = None,
    expected_variant: Optional[Variant] = None,
) -> tuple:
    """
    Rebuild the generator stored in a checkpoint
    Returns: (generator, header)
    """
    device = device or resolve_device()
    header, blocks = load_checkpoint(path, map_location=device)
    if expected_variant is not None and header.variant != expected_variant:
        raise CheckpointError(
            f"Checkpoint variant '{header.variant.value}' does not match expected '{expected_variant.value}'"
        )
    if "generator" not in blocks:
        raise CheckpointError(f"Checkpoint {path} has no generator block")
    generator = FFAGenerator(
        n_residual_blocks=header.train_config.n_residual_blocks,
        use_category=header.category_enabled,
    ).to(device)
    try:
        generator.load_state_dict(blocks["generator"])
    except RuntimeError as e:
        raise CheckpointError(f"Generator weights in {path} do not match its header", details=str(e))
    generator.eval()
    return generator, header


def _prepare_manifest(manifest: DatasetManifest, config: TrainConfig) -> DatasetManifest:
    if manifest.train_entries and manifest.val_entries:
        return manifest
    return split(manifest, config.split_ratio, config.seed)


def _sample_grid(trainer: SynthesisTrainer, dataset: PairedImageDataset, count: int):
    items = [dataset[i] for i in range(min(count, len(dataset)))]
    if not items:
        return None
    cfp = torch.stack([item["cfp"] for item in items]).to(trainer.device)
    labels = None
    if trainer.variant.uses_category:
        labels = torch.tensor([item["label"] for item in items], device=trainer.device)
    fake = synthesize(trainer.networks.generator, cfp, labels).cpu()
    return make_image_grid([[item["cfp"], fake[i], item["ffa"]] for i, item in enumerate(items)])


def run_training(
    manifest: DatasetManifest,
    config: TrainConfig,
    store: ArtifactStore,
    device: Optional[torch.device] = None,
    resume: Optional[Union[str, Path]] = None,
    progress: Optional[bool] = None,
) -> TrainingResult:
    """
    Train one variant end to end
    Persists per-epoch checkpoints, loss CSVs, the controller trace and sample grids
    """
    manifest = _prepare_manifest(manifest, config)
    if not manifest.train_entries:
        raise DatasetError("Training split is empty")
    store.initialize()
    if resume is None:
        # a fresh run never appends to logs left by an earlier one
        for name in ("losses.csv", "steps.csv", TRACE_FILENAME):
            store.path(name).unlink(missing_ok=True)
    write_manifest_csv(manifest, store.path("split_manifest.csv"))

    trainer = SynthesisTrainer(config, device=device, store=store)
    start_epoch = 1
    if resume is not None:
        start_epoch = trainer.load_state(resume).epoch + 1

    train_set = PairedImageDataset(
        manifest.train_entries, config.image_size, train=True, generator=trainer.augment_rng
    )
    val_set = PairedImageDataset(manifest.val_entries, config.image_size, train=False)
    loader = DataLoader(
        train_set,
        batch_size=config.batch_size,
        shuffle=True,
        num_workers=settings.num_workers,
        generator=trainer.shuffle_rng,
    )
    show_progress = settings.progress_bars if progress is None else progress

    result = TrainingResult(manifest=manifest)
    for epoch in range(start_epoch, config.epochs + 1):
        reports: List[StepReport] = []
        batches = tqdm(loader, desc=f"epoch {epoch}/{config.epochs}", disable=not show_progress, leave=False)
        for step, batch in enumerate(batches):
            report = trainer.train_step(batch, epoch=epoch, step=step)
            reports.append(report)
            store.append_csv_row("steps.csv", report.without_timing(), STEP_COLUMNS)
            batches.set_postfix(corr=f"{report.loss_corr:.4f}", T=report.T)

        n = len(reports)
        summary = EpochSummary(
            epoch=epoch,
            loss_g_adv=sum(r.loss_g_adv for r in reports) / n,
            loss_d=sum(r.loss_d for r in reports) / n,
            loss_corr=sum(r.loss_corr for r in reports) / n,
            loss_smooth=sum(r.loss_smooth for r in reports) / n,
            r=trainer.controller.r,
            T=trainer.controller.T,
        )
        result.history.append(summary)
        store.append_csv_row("losses.csv", summary.model_dump(), LOSS_COLUMNS)
        logger.info(
            f"Epoch {epoch}: G_adv={summary.loss_g_adv:.4f} D={summary.loss_d:.4f} "
            f"corr={summary.loss_corr:.4f} smooth={summary.loss_smooth:.5f} r={summary.r:.2f} T={summary.T}"
        )

        result.checkpoints.append(
            store.save_checkpoint(f"epoch_{epoch:03d}.pt", trainer.header(epoch), trainer.state_blocks())
        )
        grid = _sample_grid(trainer, val_set, config.sample_grid_size)
        if grid is not None:
            store.save_image(f"samples/epoch_{epoch:03d}.png", grid)

    return result
