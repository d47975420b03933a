"""Axial vs full non-local attention: multiply-accumulate counts and wall time."""
import logging
import time
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.models import BenchRow
from brain.attention import RelPosEmbedding, axial_position_sensitive_attention, nonlocal_attention
from brain.tensor import Tensor, count_macs

logger = logging.getLogger(__name__)

DEFAULT_SIZES = (8, 16, 32, 64)


def _measure(fn: Callable[[], Tensor], repeats: int) -> Tuple[int, float]:
    with count_macs() as counter:
        fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return counter.total, float(np.median(timings))


def bench_size(size: int, channels: int = 8, heads: int = 2, repeats: int = 3, seed: int = 0) -> BenchRow:
    """Attention cores only: q, k and v are given, projections are not counted."""
    rng = np.random.default_rng(seed)
    d = channels // heads
    q, k, v = (Tensor(rng.standard_normal((1, channels, size, size)).astype(np.float32)) for _ in range(3))
    emb_h = RelPosEmbedding("height", size, d, d, rng)
    emb_w = RelPosEmbedding("width", size, d, d, rng)

    def axial() -> Tensor:
        y = axial_position_sensitive_attention(q, k, v, emb_h, "height", heads=heads, scale=True)
        return axial_position_sensitive_attention(y, y, y, emb_w, "width", heads=heads, scale=True)

    def full() -> Tensor:
        return nonlocal_attention(q, k, v, heads=heads, scale=True)

    axial_macs, axial_seconds = _measure(axial, repeats)
    nonlocal_macs, nonlocal_seconds = _measure(full, repeats)
    row = BenchRow(size=size, axial_macs=axial_macs, nonlocal_macs=nonlocal_macs,
                   axial_seconds=axial_seconds, nonlocal_seconds=nonlocal_seconds)
    logger.info("size %d: axial %d MACs %.4fs, non-local %d MACs %.4fs",
                size, axial_macs, axial_seconds, nonlocal_macs, nonlocal_seconds)
    return row


def run_bench(sizes: Sequence[int] = DEFAULT_SIZES, channels: int = 8, heads: int = 2,
              repeats: int = 3, seed: int = 0) -> List[BenchRow]:
    return [bench_size(s, channels, heads, repeats, seed) for s in sizes]


def bench_frame(rows: Sequence[BenchRow]) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in rows])
    frame["ratio"] = [row.ratio for row in rows]
    frame["analytic_ratio"] = [row.analytic_ratio for row in rows]
    # constant across sizes when counts follow HW(H+W) vs (HW)^2
    frame["normalized_ratio"] = frame["ratio"] / frame["analytic_ratio"]
    frame["speedup"] = frame["nonlocal_seconds"] / frame["axial_seconds"]
    return frame


def write_bench(rows: Sequence[BenchRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bench_frame(rows).to_csv(path, index=False)
    return path
