"""Segmentation and detection metrics for small-target masks.

Pixel-level: IoU over the whole dataset, nIoU as the per-image mean and a
per-image normalized F1. Target-level: 8-connected components are matched
one-to-one by centroid distance; Pd is the matched share of label targets and
Fa the share of image pixels covered by unmatched predicted components.
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from skimage import measure

from app.errors import DimensionError, UndefinedMetricError
from app.models import ConfusionCounts, ImageMetrics, MetricsReport, Target, TargetMatch

logger = logging.getLogger(__name__)

MATCH_DISTANCE = 3.0
CSV_COLUMNS = [
    "id", "T", "P", "TP", "iou", "precision", "recall",
    "n_label_targets", "n_pred_targets", "n_matched", "false_pixels",
]


def _binary(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask) > 0


def confusion(pred: np.ndarray, label: np.ndarray) -> ConfusionCounts:
    pred, label = _binary(pred), _binary(label)
    if pred.shape != label.shape:
        raise DimensionError(f"prediction {pred.shape} and label {label.shape} differ in extent")
    return ConfusionCounts(T=int(label.sum()), P=int(pred.sum()), TP=int((pred & label).sum()))


def iou(counts: ConfusionCounts, as_printed: bool = False) -> float:
    """TP / (T + P - TP); two empty masks agree perfectly.

    ``as_printed`` subtracts false positives instead of TP, i.e. TP / (T + TP),
    kept only to audit the alternative reading of the formula.
    """
    if as_printed:
        denominator = counts.T + counts.P - (counts.P - counts.TP)
    else:
        denominator = counts.T + counts.P - counts.TP
    if denominator == 0:
        return 1.0
    return counts.TP / denominator


def niou(per_image: Sequence[ConfusionCounts], as_printed: bool = False) -> float:
    if not per_image:
        raise UndefinedMetricError("nIoU needs at least one image")
    return float(np.mean([iou(c, as_printed) for c in per_image]))


def precision_recall(counts: ConfusionCounts) -> Tuple[float, float]:
    if counts.T == 0 and counts.P == 0:
        return 1.0, 1.0
    precision = counts.TP / counts.P if counts.P else 0.0
    recall = counts.TP / counts.T if counts.T else 0.0
    return precision, recall


def f1_normalized(per_image: Sequence[Tuple[float, float]], as_printed: bool = False) -> float:
    """Mean over images of factor * P * R / (P + R); factor 2 unless ``as_printed``."""
    if not per_image:
        raise UndefinedMetricError("F1 needs at least one image")
    factor = 1.0 if as_printed else 2.0
    scores = [factor * p * r / (p + r) if p + r > 0 else 0.0 for p, r in per_image]
    return float(np.mean(scores))


# --- targets ----------------------------------------------------------------

def extract_targets(mask: np.ndarray) -> List[Target]:
    labelled = measure.label(_binary(mask), connectivity=2)
    return [
        Target(centroid=tuple(float(c) for c in region.centroid), pixels=region.coords)
        for region in measure.regionprops(labelled)
    ]


def match_targets(
    label_targets: Sequence[Target],
    pred_targets: Sequence[Target],
    image_pixels: int = 0,
    max_distance: float = MATCH_DISTANCE,
) -> TargetMatch:
    """Greedy one-to-one matching by ascending centroid distance, strictly below ``max_distance``."""
    candidates = []
    for li, lt in enumerate(label_targets):
        for pi, pt in enumerate(pred_targets):
            distance = float(np.hypot(lt.centroid[0] - pt.centroid[0], lt.centroid[1] - pt.centroid[1]))
            if distance < max_distance:
                candidates.append((distance, li, pi))
    candidates.sort()
    used_labels, used_preds, matches = set(), set(), []
    for distance, li, pi in candidates:
        if li in used_labels or pi in used_preds:
            continue
        used_labels.add(li)
        used_preds.add(pi)
        matches.append((li, pi, distance))
    return TargetMatch(
        label_targets=list(label_targets),
        pred_targets=list(pred_targets),
        matches=matches,
        image_pixels=image_pixels,
    )


def pd_fa(matches: Sequence[TargetMatch]) -> Tuple[float, float]:
    t_all = sum(m.T_All for m in matches)
    if t_all == 0:
        raise UndefinedMetricError("Pd is undefined without any label targets")
    p_all = sum(m.P_All for m in matches)
    pd_ = sum(m.T_correct for m in matches) / t_all
    fa = sum(m.P_false for m in matches) / p_all if p_all else 0.0
    return pd_, fa


# --- per image and dataset ----------------------------------------------------

def image_metrics(sample_id: str, pred: np.ndarray, label: np.ndarray) -> Tuple[ImageMetrics, ConfusionCounts, TargetMatch]:
    counts = confusion(pred, label)
    match = match_targets(extract_targets(label), extract_targets(pred), image_pixels=int(np.asarray(label).size))
    precision, recall = precision_recall(counts)
    row = ImageMetrics(
        id=sample_id,
        T=counts.T,
        P=counts.P,
        TP=counts.TP,
        iou=iou(counts),
        precision=precision,
        recall=recall,
        n_label_targets=match.T_All,
        n_pred_targets=len(match.pred_targets),
        n_matched=match.T_correct,
        false_pixels=match.P_false,
    )
    return row, counts, match


class MetricAccumulator:
    """Streams image pairs and reduces them into a :class:`MetricsReport`."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.rows: List[ImageMetrics] = []
        self.counts: List[ConfusionCounts] = []
        self.matches: List[TargetMatch] = []

    def update(self, sample_id: str, pred: np.ndarray, label: np.ndarray) -> ImageMetrics:
        row, counts, match = image_metrics(sample_id, pred, label)
        self.rows.append(row)
        self.counts.append(counts)
        self.matches.append(match)
        return row

    def __len__(self) -> int:
        return len(self.rows)

    def report(self, f1_as_printed: bool = False, iou_as_printed: bool = False,
               allow_undefined_pd: bool = False) -> MetricsReport:
        """Dataset summary; with ``allow_undefined_pd`` a target-free set reports Pd as NaN."""
        if not self.rows:
            raise UndefinedMetricError("no images were evaluated")
        total = sum(self.counts[1:], self.counts[0])
        try:
            pd_, fa = pd_fa(self.matches)
        except UndefinedMetricError:
            if not allow_undefined_pd:
                raise
            p_all = sum(m.P_All for m in self.matches)
            pd_, fa = float("nan"), sum(m.P_false for m in self.matches) / p_all
        return MetricsReport(
            iou=iou(total, iou_as_printed),
            niou=niou(self.counts, iou_as_printed),
            f1=f1_normalized([(r.precision, r.recall) for r in self.rows], f1_as_printed),
            pd=pd_,
            fa=fa,
            rows=list(self.rows),
            counts=total,
            T_correct=sum(m.T_correct for m in self.matches),
            T_All=sum(m.T_All for m in self.matches),
            P_false=sum(m.P_false for m in self.matches),
            P_All=sum(m.P_All for m in self.matches),
            f1_as_printed=f1_as_printed,
            iou_as_printed=iou_as_printed,
        )


def evaluate(
    preds: Sequence[np.ndarray],
    labels: Sequence[np.ndarray],
    ids: Optional[Sequence[str]] = None,
    f1_as_printed: bool = False,
    iou_as_printed: bool = False,
) -> MetricsReport:
    if len(preds) != len(labels):
        raise DimensionError(f"{len(preds)} predictions for {len(labels)} labels")
    ids = ids or [str(i) for i in range(len(preds))]
    acc = MetricAccumulator()
    for sample_id, pred, label in zip(ids, preds, labels):
        acc.update(sample_id, pred, label)
    return acc.report(f1_as_printed=f1_as_printed, iou_as_printed=iou_as_printed)


# --- reports ------------------------------------------------------------------

def report_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in report.rows], columns=CSV_COLUMNS)


def summary_frame(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([{
        "iou": report.iou,
        "niou": report.niou,
        "pd": report.pd,
        "fa": report.fa,
        "fa_e6": report.fa_e6,
        "f1": report.f1,
        "f1_mode": "as_printed" if report.f1_as_printed else "harmonic",
        "iou_mode": "as_printed" if report.iou_as_printed else "union",
        "images": len(report.rows),
        "T_correct": report.T_correct,
        "T_All": report.T_All,
        "P_false": report.P_false,
        "P_All": report.P_All,
    }])


def write_report(report: MetricsReport, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Per-image rows to ``path`` and the dataset summary next to it as ``<stem>_summary.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary_path = path.with_name(f"{path.stem}_summary.csv")
    report_frame(report).to_csv(path, index=False)
    summary_frame(report).to_csv(summary_path, index=False)
    logger.info("wrote %d metric rows to %s", len(report.rows), path)
    return path, summary_path
