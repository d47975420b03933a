import argparse
from pathlib import Path

from app.commands import common_options, resolve
from app.dataset import load_dataset
from app.settings import Settings
from brain.network import MPANet
from brain.training import train


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", parents=[common_options()], help="train the network")
    parser.add_argument("--data", type=str, required=True, help="dataset directory (images/, masks/, split.txt)")
    parser.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--loss", choices=["soft_iou", "bce"], default=None)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings, {"train": {
        "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "loss": args.loss,
    }})
    splits = load_dataset(args.data, seed=cfg.train.seed)
    model = MPANet(cfg.model, seed=cfg.train.seed)
    ckpt = train(model, splits, cfg.train, out_dir=Path(cfg.out_dir), resume_from=args.resume, quiet=args.quiet)
    print(f"✅ trained {ckpt.epoch} epoch(s); best validation nIoU {ckpt.best_niou:.4f}; "
          f"checkpoints and epochs.csv in {cfg.out_dir}")
    return 0
