"""Ambient settings and the key=value run-config loader.

Settings come from ``MPANET_*`` environment variables (and ``.env``). A run
config file holds one ``section.key=value`` per line, ``#`` starts a comment::

    model.input_size=64
    model.channels=16,32,64
    train.epochs=5
"""
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from app.errors import ConfigError
from app.models import MPANetConfig, RunConfig, SyntheticSceneConfig, TrainConfig
from app.settings import Settings

logger = logging.getLogger(__name__)


SECTIONS = {
    "model": MPANetConfig,
    "synth": SyntheticSceneConfig,
    "train": TrainConfig,
}
RUN_KEYS = {"out_dir", "seed"}


def _line_numbers(path: Path) -> Dict[str, int]:
    numbers = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            if "=" not in stripped:
                raise ConfigError(f"expected section.key=value, got {stripped!r}", line=number)
            numbers.setdefault(stripped.split("=", 1)[0].strip(), number)
    return numbers


def _strip_comment(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    return value.split(" #", 1)[0].strip()


def parse_run_file(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    """Group ``section.key=value`` lines by section, rejecting unknown keys by line."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    lines = _line_numbers(path)
    grouped: Dict[str, Dict[str, Any]] = {"model": {}, "synth": {}, "train": {}, "run": {}}
    for key, value in dotenv_values(path, interpolate=False).items():
        line = lines.get(key)
        section, _, field = key.partition(".")
        if not field:
            raise ConfigError(f"key {key!r} has no section (expected model.*, synth.*, train.* or run.*)", line=line)
        if section == "run":
            known = RUN_KEYS
        elif section in SECTIONS:
            known = set(SECTIONS[section].model_fields)
        else:
            raise ConfigError(f"unknown section {section!r} in key {key!r}", line=line)
        if field not in known:
            raise ConfigError(f"unknown key {key!r}", line=line)
        value = _strip_comment(value)
        if value is None or value == "":
            raise ConfigError(f"key {key!r} has no value", line=line)
        grouped[section][field] = value
    logger.debug("read %d key(s) from %s", sum(len(v) for v in grouped.values()), path)
    return grouped


def build_run_config(
    subcommand: str,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Dict[str, Any]]] = None,
    settings: Optional[Settings] = None,
) -> RunConfig:
    """defaults < settings < config file < command-line ``overrides`` (same section layout)."""
    settings = settings or Settings()
    layers = {"model": {}, "synth": {}, "train": {}, "run": {"out_dir": settings.out_dir, "seed": settings.seed}}
    if config_path is not None:
        for section, values in parse_run_file(config_path).items():
            layers[section].update(values)
    for section, values in (overrides or {}).items():
        layers[section].update({k: v for k, v in values.items() if v is not None})

    seed = layers["run"].get("seed")
    flag_seed = (overrides or {}).get("run", {}).get("seed") is not None
    # one seed flows into every seeded component; a section may pin its own unless --seed is given
    for section in ("synth", "train"):
        if flag_seed:
            layers[section]["seed"] = seed
        else:
            layers[section].setdefault("seed", seed)
    try:
        return RunConfig(
            subcommand=subcommand,
            config_path=config_path,
            out_dir=layers["run"]["out_dir"],
            seed=seed,
            model=MPANetConfig(**layers["model"]),
            synth=SyntheticSceneConfig(**layers["synth"]),
            train=TrainConfig(**layers["train"]),
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
