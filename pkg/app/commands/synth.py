import argparse
from pathlib import Path

from app.commands import common_options, resolve
from app.dataset import generate_synthetic, split_dataset, write_dataset
from app.settings import Settings


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", parents=[common_options()],
                                   help="generate a synthetic small-target dataset")
    parser.add_argument("--n", type=int, default=50, help="number of scenes")
    parser.add_argument("--size", type=str, default=None, help="scene size, e.g. 64 or 64,96")
    parser.add_argument("--background", choices=["flat", "gradient", "cloud-noise"], default=None)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings, {"synth": {"size": args.size, "background": args.background}})
    samples = generate_synthetic(cfg.synth, args.n)
    split = split_dataset(samples, seed=cfg.synth.seed)
    root = write_dataset(split, Path(cfg.out_dir))
    print(f"✅ wrote {len(samples)} scenes to {root} "
          f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")
    return 0
