import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Categories
class CategoryLabel(str, Enum):
    NONE = "none"
    NORMAL = "normal"
    DR = "dr"
    RVO = "rvo"
    AMD = "amd"
    CSC = "csc"

    @property
    def embedding_index(self) -> int:
        """Row of the category embedding table; 'none' is row 0 (fixed at zero)."""
        return list(CategoryLabel).index(self)

    @property
    def class_index(self) -> int:
        """Diagnosis class index in 0..4; undefined for 'none'."""
        if self is CategoryLabel.NONE:
            raise ValueError("'none' is not a diagnosis class")
        return DISEASE_CATEGORIES.index(self)


DISEASE_CATEGORIES: List[CategoryLabel] = [
    CategoryLabel.NORMAL,
    CategoryLabel.DR,
    CategoryLabel.RVO,
    CategoryLabel.AMD,
    CategoryLabel.CSC,
]


class Variant(str, Enum):
    BASELINE = "baseline"
    M1 = "m1"
    FULL = "full"

    @property
    def uses_diffusion(self) -> bool:
        return self in (Variant.M1, Variant.FULL)

    @property
    def uses_category(self) -> bool:
        return self is Variant.FULL


# Diffusion / controller
class ScheduleConfig(BaseModel):
    num_steps: int = Field(1000, ge=1)
    beta_min: float = 1e-4
    beta_max: float = 2e-3


class ControllerState(BaseModel):
    """Accumulator r, speed lambda and max step T of the adaptive difficulty rule."""

    model_config = ConfigDict(populate_by_name=True)

    r: float = 0.0
    lam: float = Field(0.1, alias="lambda")
    T: int
    T_min: int
    T_max: int
    update_count: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_bounds(self) -> "ControllerState":
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.T_min <= self.T <= self.T_max:
            raise ValueError(
                f"T={self.T} outside bounds [{self.T_min}, {self.T_max}]"
            )
        return self


# Training
class TrainConfig(BaseModel):
    variant: Variant = Variant.FULL
    profile: str = "desk"
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    adam_betas: Tuple[float, float] = (0.5, 0.999)
    lambda_corr: float = Field(20.0, ge=0)
    lambda_smooth: float = Field(10.0, ge=0)
    seed: int = 1
    image_size: int = Field(128, ge=16)
    n_residual_blocks: int = Field(4, ge=1)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    t_init: int = Field(10, ge=0)
    controller_lambda: float = Field(0.1, gt=0)
    controller_every: int = Field(1, ge=1)
    split_ratio: float = Field(0.7, gt=0, lt=1)
    sample_grid_size: int = Field(4, ge=1)

    @field_validator("image_size")
    @classmethod
    def check_image_size(cls, value: int) -> int:
        # generator downsamples twice, registration U-Net three times
        if value % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {value}")
        return value

    @model_validator(mode="after")
    def check_t_init(self) -> "TrainConfig":
        if self.t_init > self.schedule.num_steps - 1:
            raise ValueError(
                f"t_init={self.t_init} exceeds last schedule step {self.schedule.num_steps - 1}"
            )
        return self


class StepReport(BaseModel):
    epoch: int
    step: int
    loss_g_adv: float
    loss_d: float
    loss_corr: float
    loss_smooth: float
    d_real_score: float
    r: float
    T: int
    seconds: float = 0.0

    def losses(self) -> Dict[str, float]:
        return {
            "loss_g_adv": self.loss_g_adv,
            "loss_d": self.loss_d,
            "loss_corr": self.loss_corr,
            "loss_smooth": self.loss_smooth,
        }

    def without_timing(self) -> Dict[str, Any]:
        return self.model_dump(exclude={"seconds"})


class EpochSummary(BaseModel):
    epoch: int
    loss_g_adv: float
    loss_d: float
    loss_corr: float
    loss_smooth: float
    r: float
    T: int


class CheckpointHeader(BaseModel):
    format_version: int = 1
    variant: Variant
    diffusion_enabled: bool
    category_enabled: bool
    schedule: ScheduleConfig
    controller: Optional[ControllerState] = None
    epoch: int = 0
    train_config: TrainConfig


# Dataset
class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: str
    cfp_path: str
    ffa_path: Optional[str] = None
    category: CategoryLabel
    split: Optional[Literal["train", "val"]] = None


MANIFEST_COLUMNS = ["sample_id", "cfp_path", "ffa_path", "category", "split"]


class DatasetManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    root: str
    entries: Tuple[ManifestEntry, ...]
    seed: Optional[int] = None
    ratio: Optional[float] = None

    @model_validator(mode="after")
    def check_partition(self) -> "DatasetManifest":
        ids = [entry.sample_id for entry in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate sample_id in manifest")
        return self

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, split: str) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    @property
    def train_entries(self) -> List[ManifestEntry]:
        return self.subset("train")

    @property
    def val_entries(self) -> List[ManifestEntry]:
        return self.subset("val")

    def category_counts(self) -> Dict[str, int]:
        counts = {category.value: 0 for category in DISEASE_CATEGORIES}
        for entry in self.entries:
            counts[entry.category.value] += 1
        return counts

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "sample_id": e.sample_id,
                "cfp_path": e.cfp_path,
                "ffa_path": e.ffa_path or "",
                "category": e.category.value,
                "split": e.split or "",
            }
            for e in self.entries
        ]
        return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


class PhantomConfig(BaseModel):
    """Procedural parameters of the phantom paired dataset."""

    image_size: int = Field(128, ge=16)
    # misalignment between renderings (affine)
    max_shift_px: float = Field(2.0, ge=0)
    max_rotation_deg: float = Field(1.0, ge=0)
    # vessel tree
    n_trunks: int = Field(4, ge=1)
    branch_depth: int = Field(5, ge=1)
    trunk_width_px: float = Field(3.0, gt=0)
    # lesions
    lesion_margin: float = Field(0.1, gt=0)
    macula_radius_frac: float = Field(0.14, gt=0, lt=0.5)
    cfp_lesion_contrast: float = Field(0.1, ge=0)
    # per-image macular pigment amplitude, uniform in [-v, v]; masks the faint CFP lesion
    cfp_macula_variation: float = Field(0.15, ge=0)
    # noise
    cfp_brightness_jitter: float = Field(0.08, ge=0)
    cfp_noise_std: float = Field(0.03, ge=0)
    ffa_noise_std: float = Field(0.02, ge=0)
    cfp_vessel_contrast: float = Field(0.12, ge=0)

    @property
    def misaligned(self) -> bool:
        return self.max_shift_px > 0 or self.max_rotation_deg > 0


# Diagnosis
class ModalityConfig(BaseModel):
    use_cfp: bool = True
    ffa_source: Literal["none", "real", "synthetic"] = "none"
    checkpoint: Optional[str] = None
    # synthetic FFA checkpoints must carry this variant
    variant: Variant = Variant.FULL

    @model_validator(mode="after")
    def check_modalities(self) -> "ModalityConfig":
        if not self.use_cfp and self.ffa_source == "none":
            raise ValueError("at least one modality must be enabled")
        if self.ffa_source == "synthetic" and not self.checkpoint:
            raise ValueError("synthetic FFA requires a synthesis checkpoint")
        return self

    @classmethod
    def from_flag(cls, flag: str, use_cfp: bool = True, variant: Variant = Variant.FULL) -> "ModalityConfig":
        """Parse ``real``, ``none`` or ``synthetic:<checkpoint>``."""
        if flag.startswith("synthetic"):
            _, _, checkpoint = flag.partition(":")
            return cls(use_cfp=use_cfp, ffa_source="synthetic", checkpoint=checkpoint or None, variant=variant)
        return cls(use_cfp=use_cfp, ffa_source=flag)

    @property
    def modalities(self) -> List[str]:
        names = ["cfp"] if self.use_cfp else []
        if self.ffa_source != "none":
            names.append("ffa")
        return names


class DiagnosisConfig(BaseModel):
    profile: str = "desk"
    image_size: int = Field(128, ge=32)
    backbone: Literal["resnet10", "resnet18", "resnet50"] = "resnet10"
    pretrained: bool = False
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(15, ge=1)
    lr: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    seed: int = 1
    hflip_p: float = Field(0.5, ge=0, le=1)
    vflip_p: float = Field(0.5, ge=0, le=1)
    split_ratio: float = Field(0.7, gt=0, lt=1)


# Reports
METRIC_COLUMNS = ["category", "metric", "value", "seed", "extractor"]


class MetricRow(BaseModel):
    category: str
    metric: str
    value: float
    seed: int
    extractor: str

    @field_validator("value")
    @classmethod
    def check_finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("metric values must be finite")
        return value


class MetricReport(BaseModel):
    rows: List[MetricRow]
    split: str = "val"
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def value(self, category: str, metric: str) -> float:
        for row in self.rows:
            if row.category == category and row.metric == metric:
                return row.value
        raise KeyError(f"{category}/{metric}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.model_dump() for row in self.rows], columns=METRIC_COLUMNS)


class ExperimentManifest(BaseModel):
    command: str
    arguments: Dict[str, Any]
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    version: str
    output_dir: str
    created_at: datetime
    finished_at: Optional[datetime] = None


# Error Models
class ErrorDetail(BaseModel):
    code: str
    message: str
    details: Optional[str] = None


class ErrorResponse(BaseModel):
    error: ErrorDetail
