import logging
from argparse import Namespace

from config import config_from_args, settings
from errors import ConfigError
from models import DISEASE_CATEGORIES, PhantomConfig
from phantom import generate_phantom_dataset
from storage import finish_run, start_run
from utils import namespace_to_dict

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("phantom-gen", help="Generate the procedural paired CFP/FFA dataset")
    parser.add_argument("--n", type=int, default=50, help="number of pairs")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--out", default=None, help="target directory (default: FFASYN_DATA_ROOT)")
    parser.add_argument("--config", default=None, help="JSON file with PhantomConfig fields")
    parser.add_argument("--image-size", type=int, default=None)
    parser.add_argument("--max-shift", type=float, default=None, help="misalignment shift in pixels")
    parser.add_argument("--max-rotation", type=float, default=None, help="misalignment rotation in degrees")
    parser.add_argument("--lesion-margin", type=float, default=None)
    parser.set_defaults(handler=cmd_phantom_gen)


def cmd_phantom_gen(args: Namespace) -> int:
    """
    Write a phantom dataset with its manifest CSV
    """
    if args.n < len(DISEASE_CATEGORIES):
        raise ConfigError(f"--n must be at least {len(DISEASE_CATEGORIES)}, got {args.n}")
    config = config_from_args(
        PhantomConfig,
        args,
        {
            "image_size": args.image_size,
            "max_shift_px": args.max_shift,
            "max_rotation_deg": args.max_rotation,
            "lesion_margin": args.lesion_margin,
        },
    )
    args.out = args.out or settings.data_root

    store = start_run(args.out, "phantom-gen", namespace_to_dict(args), config.model_dump(mode="json"), args.seed)
    manifest = generate_phantom_dataset(args.n, args.seed, config, args.out)
    finish_run(store)
    logger.info(f"phantom-gen: {len(manifest)} pairs {manifest.category_counts()} in {args.out}")
    return 0
