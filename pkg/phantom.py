"""
Procedural paired fundus phantom.

Every sample is one branching vessel tree rendered twice:

* CFP: orange-red background with vignetting and brightness jitter, dark
  low-contrast vessels, lesions barely visible under a random macular
  pigment, so no simple CFP statistic tells the categories apart.
* FFA: near-grayscale, bright high-contrast vessels on a dark choroid, a dark
  avascular macula carrying a category-dependent lesion texture whose mean
  intensity steps up by ``lesion_margin`` per category.

The FFA rendering is then moved by a small random affine transform so the pair
is only approximately aligned.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from dataset import CFP_FILENAME, FFA_FILENAME, MANIFEST_FILENAME, write_manifest_csv
from errors import ConfigError
from models import DISEASE_CATEGORIES, CategoryLabel, DatasetManifest, ManifestEntry, PhantomConfig
from utils import array_to_image, save_image

logger = logging.getLogger(__name__)

PHANTOM_CONFIG_FILENAME = "phantom_config.json"

# mean lesion intensity = rank * lesion_margin
LESION_RANK = {
    CategoryLabel.NORMAL: 0,
    CategoryLabel.DR: 1,
    CategoryLabel.RVO: 2,
    CategoryLabel.AMD: 3,
    CategoryLabel.CSC: 4,
}

FFA_MACULA_LEVEL = 0.1
FFA_CHOROID_LEVEL = 0.3
FFA_VESSEL_GAIN = 0.6
CFP_BASE_COLOR = np.array([0.78, 0.36, 0.16])
CFP_LESION_COLOR = np.array([1.0, 0.9, 0.55])


@dataclass
class PhantomPair:
    cfp: np.ndarray  # (H, W, 3) in [0, 1]
    ffa: np.ndarray  # (H, W, 3) in [0, 1]
    cfp_vessels: np.ndarray  # (H, W) bool
    ffa_vessels: np.ndarray  # (H, W) bool
    lesion_mask: np.ndarray  # (H, W) bool, CFP geometry


def macula_geometry(config: PhantomConfig) -> Tuple[float, float, float]:
    """(cx, cy, radius) of the macular lesion region in pixels."""
    size = config.image_size
    return 0.62 * size, 0.5 * size, config.macula_radius_frac * size


def lesion_region_mask(config: PhantomConfig) -> np.ndarray:
    cx, cy, radius = macula_geometry(config)
    ys, xs = np.mgrid[0 : config.image_size, 0 : config.image_size]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2


def _fundus_mask(size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    return (xs - c) ** 2 + (ys - c) ** 2 <= (0.48 * size) ** 2


def _segment_distance(a: Tuple[float, float], b: Tuple[float, float], p: Tuple[float, float]) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    length_sq = dx * dx + dy * dy
    u = 0.0 if length_sq == 0 else min(max(((p[0] - ax) * dx + (p[1] - ay) * dy) / length_sq, 0.0), 1.0)
    return math.hypot(ax + u * dx - p[0], ay + u * dy - p[1])


def _draw_vessel_tree(rng: np.random.Generator, config: PhantomConfig, disc: Tuple[float, float]) -> np.ndarray:
    size = config.image_size
    cx, cy, radius = macula_geometry(config)
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    centre = (size - 1) / 2.0

    def grow(x: float, y: float, angle: float, depth: int) -> None:
        if depth >= config.branch_depth:
            return
        length = 0.2 * size * (0.78 ** depth) * rng.uniform(0.8, 1.2)
        width = max(1, int(round(config.trunk_width_px * (0.72 ** depth))))
        angle = angle + rng.uniform(-0.3, 0.3)
        nx = x + length * math.cos(angle)
        ny = y + length * math.sin(angle)
        if _segment_distance((x, y), (nx, ny), (cx, cy)) < 1.25 * radius + width:
            # avascular zone around the macula
            return
        draw.line([(x, y), (nx, ny)], fill=255, width=width)
        if (nx - centre) ** 2 + (ny - centre) ** 2 > (0.47 * size) ** 2:
            return
        spread = rng.uniform(0.3, 0.6)
        grow(nx, ny, angle - spread, depth + 1)
        grow(nx, ny, angle + spread, depth + 1)

    offset = rng.uniform(0, 2 * math.pi)
    for k in range(config.n_trunks):
        angle = offset + 2 * math.pi * k / config.n_trunks + rng.uniform(-0.2, 0.2)
        grow(disc[0], disc[1], angle, 0)
    return np.asarray(canvas, dtype=np.float64) / 255.0


def _gaussian(xs: np.ndarray, ys: np.ndarray, x0: float, y0: float, sigma: float) -> np.ndarray:
    return np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) / (2 * sigma ** 2))


def _lesion_texture(rng: np.random.Generator, category: CategoryLabel, config: PhantomConfig) -> np.ndarray:
    """Category pattern inside the macula, scaled to unit mean over the region."""
    size = config.image_size
    cx, cy, radius = macula_geometry(config)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    region = lesion_region_mask(config)
    pattern = np.zeros((size, size))

    if category is CategoryLabel.NORMAL:
        return pattern
    if category is CategoryLabel.DR:
        # scattered micro-aneurysm dots
        for _ in range(30):
            r = radius * math.sqrt(rng.uniform(0, 1))
            a = rng.uniform(0, 2 * math.pi)
            pattern += _gaussian(xs, ys, cx + r * math.cos(a), cy + r * math.sin(a), max(0.06 * radius, 0.8))
    elif category is CategoryLabel.RVO:
        # radial streaks from one side
        a0 = rng.uniform(0, 2 * math.pi)
        angle = np.arctan2(ys - cy, xs - cx)
        pattern = 0.5 + 0.5 * np.cos(7 * (angle - a0))
    elif category is CategoryLabel.AMD:
        # central drusen-like blob
        pattern = _gaussian(xs, ys, cx + rng.uniform(-0.1, 0.1) * radius, cy, 0.5 * radius)
    elif category is CategoryLabel.CSC:
        # ring of leakage
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        pattern = np.exp(-((dist - 0.6 * radius) ** 2) / (2 * (0.15 * radius) ** 2))

    pattern = np.clip(pattern, 0.0, 1.0)
    texture = np.where(region, 0.5 + 0.5 * pattern, 0.0)
    return texture / texture[region].mean()


def _misalign(array: np.ndarray, shift: Tuple[float, float], rotation_deg: float, order: int) -> np.ndarray:
    """Rotate about the image centre and translate by ``shift`` (dx, dy) pixels."""
    size = array.shape[0]
    theta = math.radians(rotation_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    centre = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    # ndimage maps output coords to input coords: in = R^T (out - c - s) + c, in (row, col)
    shift_rc = np.array([shift[1], shift[0]])
    matrix = rot.T
    offset = centre - matrix @ (centre + shift_rc)
    if array.ndim == 2:
        return ndimage.affine_transform(array, matrix, offset=offset, order=order, mode="nearest")
    return np.stack(
        [
            ndimage.affine_transform(array[..., c], matrix, offset=offset, order=order, mode="nearest")
            for c in range(array.shape[-1])
        ],
        axis=-1,
    )


def render_phantom_pair(rng: np.random.Generator, category: CategoryLabel, config: PhantomConfig) -> PhantomPair:
    size = config.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    rr = ((xs - centre) ** 2 + (ys - centre) ** 2) / (0.48 * size) ** 2
    fundus = _fundus_mask(size)
    region = lesion_region_mask(config)
    cx, cy, radius = macula_geometry(config)

    disc = (0.27 * size + rng.uniform(-0.02, 0.02) * size, 0.5 * size + rng.uniform(-0.03, 0.03) * size)
    vessels = _draw_vessel_tree(rng, config, disc)
    lesion = LESION_RANK[category] * config.lesion_margin * _lesion_texture(rng, category, config)
    disc_glow = _gaussian(xs, ys, disc[0], disc[1], 0.05 * size)
    macula_shade = _gaussian(xs, ys, cx, cy, radius)

    # CFP
    brightness = 1.0 + config.cfp_brightness_jitter * rng.standard_normal()
    pigment = config.cfp_macula_variation * rng.uniform(-1.0, 1.0)
    shade = brightness * (1.0 - 0.35 * rr) - 0.08 * macula_shade
    cfp = shade[..., None] * CFP_BASE_COLOR
    cfp = cfp * (1.0 - config.cfp_vessel_contrast * vessels)[..., None]
    cfp = cfp + 0.35 * disc_glow[..., None] * np.array([1.0, 0.9, 0.6])
    cfp = cfp + (config.cfp_lesion_contrast * lesion + pigment * macula_shade)[..., None] * CFP_LESION_COLOR
    cfp = cfp + config.cfp_noise_std * rng.standard_normal(cfp.shape)
    cfp = np.where(fundus[..., None], np.clip(cfp, 0.0, 1.0), 0.0)

    # FFA
    ffa = FFA_CHOROID_LEVEL * (1.0 - 0.3 * rr)
    ffa = np.where(region, FFA_MACULA_LEVEL, ffa)
    ffa = ffa + FFA_VESSEL_GAIN * vessels + 0.5 * disc_glow + lesion
    ffa = ffa + config.ffa_noise_std * rng.standard_normal(ffa.shape)
    ffa = np.where(fundus, np.clip(ffa, 0.0, 1.0), 0.0)
    ffa = np.stack([ffa, ffa, 0.97 * ffa], axis=-1)

    cfp_vessels = vessels > 0.5
    ffa_vessels = cfp_vessels
    if config.misaligned:
        shift = tuple(rng.uniform(-config.max_shift_px, config.max_shift_px, size=2))
        rotation = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
        ffa = np.clip(_misalign(ffa, shift, rotation, order=1), 0.0, 1.0)
        ffa_vessels = _misalign(cfp_vessels.astype(np.float64), shift, rotation, order=0) > 0.5

    return PhantomPair(
        cfp=cfp,
        ffa=ffa,
        cfp_vessels=cfp_vessels,
        ffa_vessels=ffa_vessels,
        lesion_mask=region,
    )


def phantom_category(index: int) -> CategoryLabel:
    return DISEASE_CATEGORIES[index % len(DISEASE_CATEGORIES)]


def generate_phantom_dataset(
    n: int, seed: int, config: PhantomConfig, out_dir: Union[str, Path]
) -> DatasetManifest:
    """
    Render ``n`` deterministic pairs into ``out_dir`` in the on-disk dataset layout
    Categories cycle through the five diseases so n >= 5 covers all of them
    """
    if n < len(DISEASE_CATEGORIES):
        raise ConfigError(f"phantom dataset needs n >= {len(DISEASE_CATEGORIES)}, got {n}")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Cannot create phantom directory {out_dir}: {e}")
        raise

    entries = []
    for index in range(n):
        category = phantom_category(index)
        rng = np.random.default_rng([seed, index])
        pair = render_phantom_pair(rng, category, config)
        sample_id = f"{category.value}_{index:04d}"
        sample_dir = out_dir / category.value / sample_id
        save_image(array_to_image(pair.cfp), sample_dir / CFP_FILENAME)
        save_image(array_to_image(pair.ffa), sample_dir / FFA_FILENAME)
        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                cfp_path=str(sample_dir / CFP_FILENAME),
                ffa_path=str(sample_dir / FFA_FILENAME),
                category=category,
            )
        )

    manifest = DatasetManifest(root=str(out_dir), entries=tuple(entries), seed=seed)
    write_manifest_csv(manifest, out_dir / MANIFEST_FILENAME)
    (out_dir / PHANTOM_CONFIG_FILENAME).write_text(config.model_dump_json(indent=2) + "\n")
    logger.info(f"Generated {n} phantom pairs in {out_dir}")
    return manifest
