import argparse
import logging
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from app.commands import common_options, resolve
from app.errors import ConfigError
from app.raster import load_raster, save_mask, save_raster
from app.settings import Settings
from brain.checkpoint import load_checkpoint, restore_model
from brain.network import MPANet
from brain.tensor import Tensor

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", parents=[common_options()], help="heatmap and mask for graymap images")
    parser.add_argument("--checkpoint", type=str, required=True)
    parser.add_argument("images", nargs="+", help="P5 graymap images")
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--dump-branches", action="store_true",
                        help="also write global, local-fusion and final feature maps")
    parser.set_defaults(handler=run)


def _scaled(feature: np.ndarray) -> np.ndarray:
    # channel mean, min-max scaled to [0, 1]
    mean = feature.mean(axis=0)
    span = mean.max() - mean.min()
    return (mean - mean.min()) / span if span > 0 else np.zeros_like(mean)


def tiles(shape: Tuple[int, int], tile: Tuple[int, int]):
    height, width = shape
    for top in range(0, height, tile[0]):
        for left in range(0, width, tile[1]):
            yield top, left


def infer_image(model: MPANet, image: np.ndarray, dump_branches: bool = False) -> Dict[str, np.ndarray]:
    """Zero-pad to whole tiles of the model input size, run every tile, crop back."""
    tile = tuple(model.cfg.input_size)
    height, width = image.shape
    padded_shape = (-(-height // tile[0]) * tile[0], -(-width // tile[1]) * tile[1])
    padded = np.zeros(padded_shape, dtype=np.float32)
    padded[:height, :width] = image
    outputs: Dict[str, np.ndarray] = {"heatmap": np.zeros(padded_shape, dtype=np.float32)}
    if dump_branches:
        outputs.update({name: np.zeros(padded_shape, dtype=np.float32) for name in ("global", "local", "fused")})

    model.eval()
    for top, left in tiles(padded_shape, tile):
        window = (slice(top, top + tile[0]), slice(left, left + tile[1]))
        x = Tensor(padded[window][None, None])
        outputs["heatmap"][window] = model(x).data[0, 0]
        if dump_branches:
            for name, feature in model.branch_features(x).items():
                outputs[name][window] = _scaled(feature.data[0])
    return {name: out[:height, :width] for name, out in outputs.items()}


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings)
    if args.threshold is not None and not 0.0 < args.threshold < 1.0:
        raise ConfigError(f"--threshold must lie in (0, 1), got {args.threshold}")
    model = restore_model(load_checkpoint(args.checkpoint))
    out_dir = Path(cfg.out_dir)
    for image_path in map(Path, args.images):
        outputs = infer_image(model, load_raster(image_path), dump_branches=args.dump_branches)
        heatmap = outputs.pop("heatmap")
        save_raster(heatmap, out_dir / f"{image_path.stem}_heatmap.pgm")
        mask = model.predict_mask(heatmap, args.threshold)
        save_mask(mask, out_dir / f"{image_path.stem}_mask.pgm")
        for name, feature in outputs.items():
            save_raster(feature, out_dir / f"{image_path.stem}_{name}.pgm")
        logger.info("%s: %d positive pixels", image_path, int(mask.sum()))
        print(f"✅ {image_path} -> {out_dir / (image_path.stem + '_heatmap.pgm')}")
    return 0
