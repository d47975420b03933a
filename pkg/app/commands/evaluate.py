"""``eval``: metrics of a checkpoint (or of stored prediction masks) on one split."""
import argparse
import logging
from pathlib import Path

from app.commands import common_options, resolve
from app.dataset import SPLITS, crop_or_pad, load_dataset
from app.errors import ConfigError
from app.metrics import MetricAccumulator, write_report
from app.raster import load_mask
from app.settings import Settings
from brain.checkpoint import load_checkpoint, restore_model
from brain.training import predict_heatmaps

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", parents=[common_options()], help="evaluate IoU, nIoU, F1, Pd and Fa")
    parser.add_argument("--data", type=str, required=True, help="dataset directory")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", type=str, help="model checkpoint to predict with")
    source.add_argument("--predictions", type=str, help="directory of <id>.pgm prediction masks")
    parser.add_argument("--split", choices=list(SPLITS) + ["all"], default="test")
    parser.add_argument("--threshold", type=float, default=None, help="heatmap threshold (default from model)")
    parser.add_argument("--f1-as-printed", action="store_true", help="F1 without the harmonic factor 2")
    parser.add_argument("--iou-as-printed", action="store_true", help="IoU denominator T + P - FP")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings)
    if args.threshold is not None and not 0.0 < args.threshold < 1.0:
        raise ConfigError(f"--threshold must lie in (0, 1), got {args.threshold}")
    splits = load_dataset(args.data, seed=cfg.train.seed)
    samples = splits.train + splits.val + splits.test if args.split == "all" else getattr(splits, args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")

    acc = MetricAccumulator()
    if args.checkpoint:
        model = restore_model(load_checkpoint(args.checkpoint))
        extent = tuple(model.cfg.input_size)
        resized = [s.id for s in samples if s.image.shape != extent]
        if resized:
            logger.warning("%d of %d image(s) differ from the model input %dx%d and are scored centre-cropped or "
                           "zero-padded (first: %s)", len(resized), len(samples), extent[0], extent[1], resized[0])
        for sample, heatmap in zip(samples, predict_heatmaps(model, samples, cfg.train.batch_size)):
            label = crop_or_pad(sample, model.cfg.input_size).mask
            acc.update(sample.id, model.predict_mask(heatmap, args.threshold), label)
    else:
        for sample in samples:
            path = Path(args.predictions) / f"{sample.id}.pgm"
            if not path.exists():
                raise ConfigError(f"no prediction mask {path} for sample {sample.id}")
            acc.update(sample.id, load_mask(path), sample.mask)

    report = acc.report(f1_as_printed=args.f1_as_printed, iou_as_printed=args.iou_as_printed)
    rows_path, summary_path = write_report(report, Path(cfg.out_dir) / "metrics.csv")
    f1_label = "F1 (as printed)" if args.f1_as_printed else "F1"
    print(f"IoU {report.iou:.4f}  nIoU {report.niou:.4f}  Pd {report.pd:.4f}  "
          f"Fa {report.fa_e6:.2f}e-6  {f1_label} {report.f1:.4f}  ({len(report.rows)} images)")
    print(f"✅ wrote {rows_path} and {summary_path}")
    return 0
