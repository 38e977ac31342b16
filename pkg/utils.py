import logging
import random
from argparse import Namespace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from config import settings
from errors import DatasetError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a torch generator for explicit draws."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def resolve_device(name: Optional[str] = None) -> torch.device:
    name = name or settings.device
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def validate_image_file(path: PathLike) -> None:
    """
    Check that a file exists and decodes as an image
    """
    try:
        with Image.open(path) as image:
            image.verify()
    except FileNotFoundError:
        raise DatasetError(f"Image not found: {path}")
    except (UnidentifiedImageError, OSError) as e:
        raise DatasetError(f"Unreadable image: {path}", details=str(e))


def load_image_tensor(path: PathLike, size: Optional[int] = None) -> torch.Tensor:
    """
    Load an RGB image as a (3, H, W) float tensor in [-1, 1]
    Resizes with bilinear interpolation when ``size`` is given
    """
    try:
        with Image.open(path) as image:
            image = image.convert("RGB")
            if size is not None and image.size != (size, size):
                image = image.resize((size, size), Image.Resampling.BILINEAR)
            array = np.asarray(image, dtype=np.float32)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        logger.error(f"Failed to load image {path}: {e}")
        raise DatasetError(f"Unreadable image: {path}", details=str(e))

    tensor = torch.from_numpy(array).permute(2, 0, 1).contiguous()
    return tensor / 127.5 - 1.0


def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
    """Convert a (3, H, W) tensor in [-1, 1] to an 8-bit RGB image."""
    array = ((tensor.detach().cpu().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(np.ascontiguousarray(array.permute(1, 2, 0).numpy()))


def array_to_image(array: np.ndarray) -> Image.Image:
    """Convert an (H, W, 3) float array in [0, 1] to an 8-bit RGB image."""
    return Image.fromarray(np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8))


def save_image(image: Image.Image, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")


def make_image_grid(rows: List[List[torch.Tensor]], padding: int = 2) -> Image.Image:
    """
    Tile rows of (3, H, W) tensors into one image
    Each row is typically [cfp, synthesized ffa, real ffa]
    """
    tiles = [[tensor_to_image(t) for t in row] for row in rows]
    width, height = tiles[0][0].size
    n_cols = max(len(row) for row in tiles)
    grid = Image.new(
        "RGB",
        (n_cols * width + (n_cols + 1) * padding, len(tiles) * height + (len(tiles) + 1) * padding),
        (255, 255, 255),
    )
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            grid.paste(tile, (padding + j * (width + padding), padding + i * (height + padding)))
    return grid


def namespace_to_dict(args: Namespace) -> Dict[str, Any]:
    """JSON-ready view of parsed arguments; handler callables are dropped."""
    values = {}
    for key, value in vars(args).items():
        if callable(value) or key == "config_snapshot":
            continue
        values[key] = str(value) if isinstance(value, Path) else value
    return values
