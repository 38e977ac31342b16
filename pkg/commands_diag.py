import logging
from argparse import Namespace
from pathlib import Path

from pydantic import ValidationError

from config import DIAG_PROFILES, config_from_args, settings
from dataset import load_mpos
from diagnosis import run_diagnosis_experiment
from errors import ConfigError
from models import DiagnosisConfig, ModalityConfig, Variant
from storage import finish_run, start_run
from utils import namespace_to_dict, resolve_device

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("diag-run", help="Train and score the fundus disease classifier")
    parser.add_argument(
        "--ffa", default="none", help="FFA modality: none | real | synthetic:<checkpoint>"
    )
    parser.add_argument("--no-cfp", action="store_true", help="drop the CFP branch")
    parser.add_argument(
        "--synth-variant", choices=[v.value for v in Variant], default=Variant.FULL.value,
        help="variant a synthetic FFA checkpoint must carry",
    )
    parser.add_argument("--profile", choices=sorted(DIAG_PROFILES), default="desk")
    parser.add_argument("--config", default=None, help="JSON file with DiagnosisConfig fields")
    parser.add_argument("--data", default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--image-size", type=int, default=None)
    parser.add_argument("--backbone", choices=["resnet10", "resnet18", "resnet50"], default=None)
    parser.add_argument("--pretrained", action="store_true", default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--device", default=None)
    parser.add_argument("--no-progress", action="store_true")
    parser.set_defaults(handler=cmd_diag_run)


def _modality_tag(modality: ModalityConfig) -> str:
    parts = ["cfp"] if modality.use_cfp else []
    if modality.ffa_source != "none":
        parts.append(f"{modality.ffa_source}ffa")
    return "+".join(parts)


def cmd_diag_run(args: Namespace) -> int:
    try:
        variant = Variant(getattr(args, "synth_variant", Variant.FULL.value))
        modality = ModalityConfig.from_flag(args.ffa, use_cfp=not args.no_cfp, variant=variant)
    except ValidationError as e:
        raise ConfigError(f"Invalid modality selection '{args.ffa}'", details=str(e))
    overrides = {
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "image_size": args.image_size,
        "backbone": args.backbone,
        "pretrained": args.pretrained,
        "lr": args.lr,
    }
    config = config_from_args(DiagnosisConfig, args, overrides, DIAG_PROFILES)
    args.data = args.data or settings.data_root
    args.out = args.out or str(Path(settings.output_root) / f"diag-{_modality_tag(modality)}-seed{config.seed}")

    store = start_run(
        args.out,
        "diag-run",
        namespace_to_dict(args),
        config.model_dump(mode="json"),
        config.seed,
    )
    manifest = load_mpos(args.data)
    run_diagnosis_experiment(
        manifest,
        modality,
        config,
        store,
        device=resolve_device(args.device),
        progress=False if args.no_progress else None,
    )
    finish_run(store)
    return 0
