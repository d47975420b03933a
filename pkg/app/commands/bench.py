import argparse
from pathlib import Path

from app.commands import common_options, resolve
from app.errors import ConfigError
from app.settings import Settings
from brain.bench import DEFAULT_SIZES, run_bench, write_bench


def register(subparsers) -> None:
    parser = subparsers.add_parser("bench", parents=[common_options()],
                                   help="axial vs non-local attention cost at growing sizes")
    parser.add_argument("--sizes", type=str, default=",".join(map(str, DEFAULT_SIZES)))
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--repeats", type=int, default=3)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes needs at least one positive size")
    if min(args.channels, args.heads, args.repeats) < 1:
        raise ConfigError("--channels, --heads and --repeats must be positive")
    if args.channels % args.heads:
        raise ConfigError(f"--channels {args.channels} is not divisible by --heads {args.heads}")
    rows = run_bench(sizes, args.channels, args.heads, args.repeats, cfg.seed)
    path = write_bench(rows, Path(cfg.out_dir) / "bench.csv")
    for row in rows:
        print(f"{row.size:>4}  axial {row.axial_macs:>12d} MACs  non-local {row.nonlocal_macs:>14d} MACs  "
              f"ratio {row.ratio:.4f} (analytic trend {row.analytic_ratio:.4f})")
    print(f"✅ wrote {path}")
    return 0
