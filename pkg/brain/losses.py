"""Training objectives over sigmoid heatmaps."""
from typing import Union

import numpy as np

from app.errors import DimensionError
from brain import functional as F
from brain.tensor import Tensor

SOFT_IOU_EPS = 1e-6
BCE_CLAMP = 1e-7


def _target(heatmap: Tensor, mask: Union[Tensor, np.ndarray]) -> Tensor:
    mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=heatmap.dtype))
    if mask.shape != heatmap.shape:
        raise DimensionError(f"heatmap {heatmap.shape} and mask {mask.shape} differ in extent")
    return mask


def soft_iou_loss(heatmap: Tensor, mask: Union[Tensor, np.ndarray]) -> Tensor:
    """1 - (sum h*m + eps) / (sum h + sum m - sum h*m + eps), in [0, 1)."""
    mask = _target(heatmap, mask)
    inter = F.sum(heatmap * mask)
    union = F.sum(heatmap) + F.sum(mask) - inter
    return 1.0 - (inter + SOFT_IOU_EPS) / (union + SOFT_IOU_EPS)


def bce_loss(heatmap: Tensor, mask: Union[Tensor, np.ndarray]) -> Tensor:
    mask = _target(heatmap, mask)
    h = F.clamp(heatmap, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -F.mean(mask * F.log(h) + (1.0 - mask) * F.log(1.0 - h))


LOSSES = {"soft_iou": soft_iou_loss, "bce": bce_loss}
