import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.errors import ConfigError, DimensionError, MPANetError, ParseError
from app.settings import Settings, apply_determinism

logger = logging.getLogger("mpanet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    from app.commands import bench, evaluate, gradcheck, infer, synth, train

    parser = argparse.ArgumentParser(
        prog="mpanet",
        description="Infrared small-target segmentation with multi-patch axial attention",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in (synth, train, evaluate, infer, gradcheck, bench):
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        settings = Settings()
    except ValidationError as exc:
        print(f"❌ invalid MPANET_* settings: {exc}", file=sys.stderr)
        return EXIT_USAGE
    # BLAS pools read their thread count when numpy first loads
    apply_determinism(settings)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    from brain import functional as F

    F.EINSUM_OPTIMIZE = settings.einsum_optimize

    try:
        return args.handler(args, settings)
    except (ConfigError, ParseError, DimensionError, OSError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MPANetError as exc:
        logger.error("%s failed: %s", args.command, exc)
        return EXIT_FAILURE
    except ArithmeticError as exc:
        logger.error("%s failed with a numeric error: %s", args.command, exc)
        return EXIT_FAILURE
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
