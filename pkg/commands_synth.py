import logging
from argparse import Namespace
from pathlib import Path
from typing import Dict, List, Tuple

import pandas as pd
import torch
from torch.utils.data import DataLoader

from config import SYNTH_PROFILES, config_from_args, settings
from dataset import PairedImageDataset, load_mpos, split
from errors import ConfigError, DatasetError, MetricError
from metrics import SYNTHESIS_METRICS, build_extractor, synthesis_report
from models import DISEASE_CATEGORIES, CategoryLabel, ManifestEntry, TrainConfig, Variant
from storage import finish_run, start_run
from training import load_generator, run_training, synthesize
from utils import namespace_to_dict, resolve_device

logger = logging.getLogger(__name__)

METRICS_FILENAME = "synthesis_metrics.csv"
SUMMARY_FILENAME = "synthesis_summary.csv"
COMPARISON_FILENAME = "comparison.csv"
MIN_EVAL_SAMPLES_PER_CATEGORY = 2


def register(subparsers) -> None:
    train = subparsers.add_parser("synth-train", help="Train one synthesis variant")
    train.add_argument("--variant", choices=[v.value for v in Variant], default=None)
    train.add_argument("--profile", choices=sorted(SYNTH_PROFILES), default="desk")
    train.add_argument("--config", default=None, help="JSON file with TrainConfig fields")
    train.add_argument("--data", default=None, help="dataset root (default: FFASYN_DATA_ROOT)")
    train.add_argument("--out", default=None, help="run directory")
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--batch-size", type=int, default=None)
    train.add_argument("--image-size", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--residual-blocks", type=int, default=None)
    train.add_argument("--t-init", type=int, default=None)
    train.add_argument("--controller-lambda", type=float, default=None)
    train.add_argument("--controller-every", type=int, default=None)
    train.add_argument("--lambda-corr", type=float, default=None)
    train.add_argument("--lambda-smooth", type=float, default=None)
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--device", default=None)
    train.add_argument("--no-progress", action="store_true")
    train.set_defaults(handler=cmd_synth_train)

    evaluate = subparsers.add_parser("synth-eval", help="Per-category FID/KID/LPIPS of a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", default=None)
    evaluate.add_argument("--out", default=None)
    evaluate.add_argument("--seed", type=int, default=None)
    evaluate.add_argument("--split", choices=["train", "val"], default="val")
    evaluate.add_argument(
        "--extractor", choices=["random-projection", "inception", "identity"], default="random-projection"
    )
    evaluate.add_argument("--extractor-seed", type=int, default=0)
    evaluate.add_argument("--kid-subsets", type=int, default=None)
    evaluate.add_argument("--kid-subset-size", type=int, default=None)
    evaluate.add_argument("--batch-size", type=int, default=8)
    evaluate.add_argument("--category-none", action="store_true", help="feed 'none' instead of true categories")
    evaluate.add_argument("--device", default=None)
    evaluate.set_defaults(handler=cmd_synth_eval)

    compare = subparsers.add_parser("synth-compare", help="Side-by-side table of several synth-eval reports")
    compare.add_argument("--report", action="append", required=True, metavar="NAME=CSV")
    compare.add_argument("--out", required=True)
    compare.set_defaults(handler=cmd_synth_compare)


def cmd_synth_train(args: Namespace) -> int:
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "image_size": args.image_size,
        "lr": args.lr,
        "n_residual_blocks": args.residual_blocks,
        "t_init": args.t_init,
        "controller_lambda": args.controller_lambda,
        "controller_every": args.controller_every,
        "lambda_corr": args.lambda_corr,
        "lambda_smooth": args.lambda_smooth,
    }
    config = config_from_args(TrainConfig, args, overrides, SYNTH_PROFILES)
    args.data = args.data or settings.data_root
    args.out = args.out or str(Path(settings.output_root) / f"synth-{config.variant.value}-seed{config.seed}")

    store = start_run(args.out, "synth-train", namespace_to_dict(args), config.model_dump(mode="json"), config.seed)
    manifest = load_mpos(args.data)
    result = run_training(
        manifest,
        config,
        store,
        device=resolve_device(args.device),
        resume=args.resume,
        progress=False if args.no_progress else None,
    )
    finish_run(store)
    if result.history:
        last = result.history[-1]
        logger.info(
            f"synth-train {config.variant.value}: {len(result.history)} epochs, "
            f"final corr={last.loss_corr:.4f} T={last.T}, checkpoint {result.final_checkpoint}"
        )
    return 0


def _category_of(label: int) -> CategoryLabel:
    return list(CategoryLabel)[label]


def check_eval_entries(entries: List[ManifestEntry], split_name: str) -> None:
    """FID and KID need a covariance, so every category needs two samples."""
    counts = {category.value: 0 for category in DISEASE_CATEGORIES}
    for entry in entries:
        counts[entry.category.value] += 1
    short = {name: count for name, count in counts.items() if count < MIN_EVAL_SAMPLES_PER_CATEGORY}
    if short:
        raise DatasetError(
            f"synth-eval needs at least {MIN_EVAL_SAMPLES_PER_CATEGORY} '{split_name}' samples per category",
            details=f"too few in: {short}",
        )


def collect_pairs(
    generator: torch.nn.Module,
    dataset: PairedImageDataset,
    use_category: bool,
    batch_size: int,
    device: torch.device,
) -> Dict[str, Tuple[torch.Tensor, torch.Tensor]]:
    """Real and synthesized FFA grouped by disease category."""
    real: Dict[str, List[torch.Tensor]] = {}
    fake: Dict[str, List[torch.Tensor]] = {}
    for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
        labels = batch["label"].to(device) if use_category else None
        synthesized = synthesize(generator, batch["cfp"].to(device), labels).cpu()
        for i, label in enumerate(batch["label"].tolist()):
            name = _category_of(label).value
            real.setdefault(name, []).append(batch["ffa"][i])
            fake.setdefault(name, []).append(synthesized[i])
    pairs = {}
    for category in DISEASE_CATEGORIES:
        if category.value not in real:
            raise MetricError(f"No evaluation samples for category '{category.value}'")
        pairs[category.value] = (torch.stack(real[category.value]), torch.stack(fake[category.value]))
    return pairs


def cmd_synth_eval(args: Namespace) -> int:
    device = resolve_device(args.device)
    generator, header = load_generator(args.checkpoint, device)
    config = header.train_config
    seed = args.seed if args.seed is not None else config.seed
    args.data = args.data or settings.data_root
    args.out = args.out or str(Path(args.checkpoint).resolve().parent.parent / "eval")

    store = start_run(
        args.out,
        "synth-eval",
        namespace_to_dict(args),
        {"train_config": config.model_dump(mode="json"), "variant": header.variant.value},
        seed,
    )
    manifest = load_mpos(args.data)
    if not (manifest.train_entries and manifest.val_entries):
        manifest = split(manifest, config.split_ratio, config.seed)
    entries = manifest.subset(args.split)
    check_eval_entries(entries, args.split)
    dataset = PairedImageDataset(entries, config.image_size, train=False)
    use_category = header.category_enabled and not args.category_none

    pairs = collect_pairs(generator, dataset, use_category, args.batch_size, device)
    extractor = build_extractor(args.extractor, seed=args.extractor_seed)
    report, summary = synthesis_report(pairs, extractor, seed, args.kid_subsets, args.kid_subset_size)
    store.write_csv(METRICS_FILENAME, report.to_frame())
    store.write_csv(SUMMARY_FILENAME, summary.to_frame())
    finish_run(store)
    logger.info(
        f"synth-eval {header.variant.value}: FID={summary.value('all', 'FID'):.4f} "
        f"KID={summary.value('all', 'KID'):.5f} LPIPS={summary.value('all', 'LPIPS'):.4f}"
    )
    return 0


def _parse_report_flag(flag: str) -> Tuple[str, Path]:
    name, sep, path = flag.partition("=")
    if not sep or not name or not path:
        raise ConfigError(f"--report expects NAME=CSV, got '{flag}'")
    return name, Path(path)


def compare_reports(reports: List[Tuple[str, pd.DataFrame]]) -> pd.DataFrame:
    """
    One row per (method, category) with a column per metric, plus a 'mean'
    row per method averaged over the disease categories
    """
    frames = []
    for name, frame in reports:
        frame = frame[frame["metric"].isin(SYNTHESIS_METRICS)].copy()
        frame.insert(0, "method", name)
        frames.append(frame)
    stacked = pd.concat(frames, ignore_index=True)
    table = stacked.pivot_table(index=["method", "category"], columns="metric", values="value").reset_index()
    table.columns.name = None

    diseases = [c.value for c in DISEASE_CATEGORIES]
    means = (
        table[table["category"].isin(diseases)]
        .groupby("method", sort=False)[list(SYNTHESIS_METRICS)]
        .mean()
        .reset_index()
    )
    means.insert(1, "category", "mean")
    table = pd.concat([table, means], ignore_index=True)

    method_order = {name: i for i, (name, _) in enumerate(reports)}
    category_order = {name: i for i, name in enumerate(diseases + ["all", "mean"])}
    table = table.sort_values(
        by=["method", "category"],
        key=lambda column: column.map(method_order if column.name == "method" else category_order),
    ).reset_index(drop=True)
    return table[["method", "category", *SYNTHESIS_METRICS]]


def cmd_synth_compare(args: Namespace) -> int:
    parsed = [_parse_report_flag(flag) for flag in args.report]
    for name, path in parsed:
        if not path.is_file():
            raise ConfigError(f"Report for '{name}' not found: {path}")

    store = start_run(args.out, "synth-compare", namespace_to_dict(args), {}, 0)
    table = compare_reports([(name, pd.read_csv(path)) for name, path in parsed])
    store.write_csv(COMPARISON_FILENAME, table)
    finish_run(store)
    logger.info(f"synth-compare: {len(parsed)} methods -> {store.path(COMPARISON_FILENAME)}")
    return 0
