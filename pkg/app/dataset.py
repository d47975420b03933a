"""Synthetic infrared scenes, 3:1:1 splitting, fixed-size cropping and dataset I/O.

Directory layout: ``images/<id>.pgm``, ``masks/<id>.pgm`` and a ``split.txt``
manifest of ``<id> <train|val|test>`` lines.
"""
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from app.errors import ConfigError
from app.models import DatasetSplit, Sample, SyntheticSceneConfig
from app.raster import load_mask, load_raster, save_mask, save_raster

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# half-peak radius r  <=>  sigma = r / sqrt(2 ln 2)
_HALF_PEAK = math.sqrt(2.0 * math.log(2.0))
_WINDOW = 4  # 9x9 target window around the centre pixel


# --- synthesis --------------------------------------------------------------

def _background(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    height, width = cfg.size
    level = cfg.background_level
    if cfg.background == "flat":
        return np.full((height, width), level)
    if cfg.background == "gradient":
        theta = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:height, 0:width]
        ramp = np.cos(theta) * (xx / max(width - 1, 1) - 0.5) + np.sin(theta) * (yy / max(height - 1, 1) - 0.5)
        return level + 0.1 * ramp
    clouds = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=max(height, width) / 16.0)
    clouds /= clouds.std() + 1e-12
    return level + 0.05 * clouds


def _place_targets(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> List[Tuple[float, float, float]]:
    height, width = cfg.size
    count = int(rng.integers(cfg.target_count[0], cfg.target_count[1] + 1))
    placed = []
    for _ in range(count):
        for _attempt in range(50):
            radius = rng.uniform(*cfg.target_radius)
            margin = math.ceil(radius) + 1
            if height <= 2 * margin or width <= 2 * margin:
                raise ConfigError(f"scene {cfg.size} is too small for targets of radius {radius:.2f}")
            cy = rng.uniform(margin, height - 1 - margin)
            cx = rng.uniform(margin, width - 1 - margin)
            # masks stay at least two pixels apart
            if all(math.hypot(cy - y, cx - x) > radius + r + 2.0 for y, x, r in placed):
                placed.append((cy, cx, radius))
                break
        else:
            logger.debug("could not place target %d without overlap; scene keeps %d", len(placed) + 1, len(placed))
    return placed


def _render(cfg: SyntheticSceneConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    height, width = cfg.size
    image = _background(cfg, rng)
    mask = np.zeros((height, width), dtype=np.uint8)
    for cy, cx, radius in _place_targets(cfg, rng):
        sigma = radius / _HALF_PEAK
        amplitude = rng.uniform(*cfg.target_intensity) - cfg.background_level
        reach = min(int(math.ceil(3.0 * sigma)), max(height, width))
        r0, r1 = max(int(cy) - reach, 0), min(int(cy) + reach + 2, height)
        c0, c1 = max(int(cx) - reach, 0), min(int(cx) + reach + 2, width)
        yy, xx = np.mgrid[r0:r1, c0:c1]
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        profile = np.exp(-dist2 / (2.0 * sigma * sigma))
        image[r0:r1, c0:c1] += amplitude * profile
        inside = (profile >= 0.5) & (np.abs(yy - round(cy)) <= _WINDOW) & (np.abs(xx - round(cx)) <= _WINDOW)
        mask[r0:r1, c0:c1] |= inside.astype(np.uint8)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(id=f"synth{cfg.seed}_{index:05d}", image=image, mask=mask)


def generate_synthetic(cfg: SyntheticSceneConfig, n: int) -> List[Sample]:
    """``n`` scenes of Gaussian point targets on a background; deterministic in ``cfg.seed``."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    contrast = cfg.target_intensity[0] - cfg.background_level
    if contrast < cfg.contrast_margin:
        raise ConfigError(
            f"dimmest target ({cfg.target_intensity[0]}) is only {contrast:.3f} above the "
            f"{cfg.background} background mean {cfg.background_level}; margin {cfg.contrast_margin} is infeasible"
        )
    samples = [_render(cfg, i) for i in range(n)]
    logger.info("generated %d synthetic %dx%d scenes (seed %d)", n, cfg.size[0], cfg.size[1], cfg.seed)
    return samples


# --- splitting --------------------------------------------------------------

def split_sizes(n: int, ratios: Sequence[int] = (3, 1, 1)) -> Tuple[int, int, int]:
    total = sum(ratios)
    train = n * ratios[0] // total
    val = n * ratios[1] // total
    return train, val, n - train - val


def split_dataset(samples: Sequence[Sample], ratios: Sequence[int] = (3, 1, 1), seed: int = 0) -> DatasetSplit:
    """Shuffled floor/floor/remainder partition."""
    if len(samples) < 5:
        raise ConfigError(f"splitting needs at least 5 samples, got {len(samples)}")
    if len(ratios) != 3 or min(ratios) <= 0:
        raise ConfigError(f"split ratios must be three positive integers, got {tuple(ratios)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train, n_val, _ = split_sizes(len(samples), ratios)
    picked = [samples[i] for i in order]
    return DatasetSplit(
        train=picked[:n_train],
        val=picked[n_train:n_train + n_val],
        test=picked[n_train + n_val:],
    )


# --- geometry ---------------------------------------------------------------

def _fit_axis(array: np.ndarray, axis: int, target: int, start: Optional[int] = None) -> np.ndarray:
    extent = array.shape[axis]
    if extent > target:
        offset = (extent - target) // 2 if start is None else start
        return np.take(array, np.arange(offset, offset + target), axis=axis)
    if extent < target:
        before = (target - extent) // 2
        pad = [(0, 0)] * array.ndim
        pad[axis] = (before, target - extent - before)
        return np.pad(array, pad)
    return array


def crop_or_pad(sample: Sample, target: Tuple[int, int] = (256, 256)) -> Sample:
    """Centre-crop larger extents, zero-pad smaller ones; image and mask move together."""
    image, mask = sample.image, sample.mask
    for axis, extent in enumerate(target):
        image = _fit_axis(image, axis, extent)
        mask = _fit_axis(mask, axis, extent)
    return Sample(id=sample.id, image=image, mask=mask)


def random_crop(sample: Sample, target: Tuple[int, int], rng: np.random.Generator) -> Sample:
    image, mask = sample.image, sample.mask
    for axis, extent in enumerate(target):
        start = int(rng.integers(0, image.shape[axis] - extent + 1)) if image.shape[axis] > extent else None
        image = _fit_axis(image, axis, extent, start)
        mask = _fit_axis(mask, axis, extent, start)
    return Sample(id=sample.id, image=image, mask=mask)


def hflip(sample: Sample) -> Sample:
    return Sample(id=sample.id, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())


# --- directory I/O ----------------------------------------------------------

def write_manifest(assignments: Dict[str, str], path: Union[str, Path]) -> None:
    lines = [f"{sample_id} {split}\n" for sample_id, split in assignments.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> Dict[str, str]:
    assignments = {}
    for number, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in SPLITS:
            raise ConfigError(f"manifest entry {line!r} is not '<id> <train|val|test>'", line=number)
        assignments[parts[0]] = parts[1]
    return assignments


def write_dataset(split: DatasetSplit, root: Union[str, Path]) -> Path:
    root = Path(root)
    for name in SPLITS:
        for sample in getattr(split, name):
            save_raster(sample.image, root / "images" / f"{sample.id}.pgm")
            save_mask(sample.mask, root / "masks" / f"{sample.id}.pgm")
    write_manifest(split.assignments(), root / "split.txt")
    return root


def load_sample(root: Union[str, Path], sample_id: str) -> Sample:
    root = Path(root)
    return Sample(
        id=sample_id,
        image=load_raster(root / "images" / f"{sample_id}.pgm"),
        mask=load_mask(root / "masks" / f"{sample_id}.pgm"),
    )


def load_dataset(root: Union[str, Path], seed: int = 0) -> DatasetSplit:
    """Read a dataset directory; without ``split.txt`` the pairs are split 3:1:1."""
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise ConfigError(f"{root} is not a dataset directory (needs images/ and masks/)")
    manifest = root / "split.txt"
    if manifest.exists():
        assignments = read_manifest(manifest)
        buckets = {name: [] for name in SPLITS}
        for sample_id, name in assignments.items():
            buckets[name].append(load_sample(root, sample_id))
        return DatasetSplit(**buckets)
    ids = sorted(p.stem for p in (root / "images").glob("*.pgm"))
    logger.info("no split manifest in %s; splitting %d pairs 3:1:1", root, len(ids))
    return split_dataset([load_sample(root, i) for i in ids], seed=seed)
