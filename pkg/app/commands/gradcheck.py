import argparse
from pathlib import Path

import pandas as pd

from app.commands import common_options, resolve
from app.errors import ConfigError
from app.settings import Settings
from brain.gradcheck import NETWORK_TOL, OP_TOL, OPS, network_grad_check, run_suite


def register(subparsers) -> None:
    parser = subparsers.add_parser("gradcheck", parents=[common_options()],
                                   help="central-difference gradient checks at 64-bit")
    parser.add_argument("--seeds", type=int, default=3, help="randomized cases per op")
    parser.add_argument("--ops", type=str, default=None, help=f"comma-separated subset of: {', '.join(OPS)}")
    parser.add_argument("--network", action="store_true", help="also check the full network")
    parser.add_argument("--tol", type=float, default=OP_TOL)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace, settings: Settings) -> int:
    cfg = resolve(args, settings)
    names = [n.strip() for n in args.ops.split(",")] if args.ops else None
    unknown = sorted(set(names or ()) - set(OPS))
    if unknown:
        raise ConfigError(f"unknown ops: {', '.join(unknown)}")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    reports = run_suite(seeds, names, tol=args.tol)
    if args.network:
        reports.extend(network_grad_check(seed=s, tol=NETWORK_TOL) for s in seeds)

    frame = pd.DataFrame([{"name": r.name, "max_rel_error": r.max_rel_error, "tol": r.tol, "passed": r.passed}
                          for r in reports])
    path = Path(cfg.out_dir) / "gradcheck.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    failed = [r for r in reports if not r.passed]
    for report in failed:
        print(f"❌ {report.name}: relative error {report.max_rel_error:.3g} >= {report.tol:.1g}")
    print(f"{'✅' if not failed else '❌'} {len(reports) - len(failed)}/{len(reports)} checks passed; report in {path}")
    return 1 if failed else 0
