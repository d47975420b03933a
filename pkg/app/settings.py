"""Ambient ``MPANET_*`` settings, importable before numpy."""
import os
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MPANET_", env_file=".env", extra="ignore")

    log_level: str = "INFO"
    out_dir: Path = Path("runs")
    seed: int = 0
    strict_determinism: bool = True
    einsum_optimize: bool = True


def apply_determinism(settings: Settings) -> None:
    """Pin BLAS pools to one thread; takes effect only before numpy is first imported."""
    if not settings.strict_determinism:
        return
    for var in BLAS_THREAD_VARS:
        os.environ.setdefault(var, "1")
