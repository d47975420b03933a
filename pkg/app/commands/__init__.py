"""One module per sub-command; each exposes ``register(subparsers)``."""
import argparse
from typing import Any, Dict, Optional

from app.config import build_run_config
from app.models import RunConfig
from app.settings import Settings


def common_options() -> argparse.ArgumentParser:
    """Flags shared by every sub-command."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=str, default=None, help="key=value run config file")
    parent.add_argument("--out", type=str, default=None, help="output directory")
    parent.add_argument("--seed", type=int, default=None, help="seed for every random component")
    parent.add_argument("--quiet", action="store_true", help="no progress bars")
    return parent


def resolve(args: argparse.Namespace, settings: Settings,
            overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    overrides = dict(overrides or {})
    overrides["run"] = {"out_dir": args.out, "seed": args.seed}
    return build_run_config(args.command, args.config, overrides, settings)
