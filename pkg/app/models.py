from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _split_list(value):
    # key=value files carry lists as "16,32,64"
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _pair(value):
    value = _split_list(value)
    if isinstance(value, (int, float)):
        return (value, value)
    if isinstance(value, list) and len(value) == 1:
        return (value[0], value[0])
    return value


# --- model side -------------------------------------------------------------

class AxialAttentionConfig(BaseModel):
    """Channel/head layout of one attention layer (C_in, C_2, C_out)."""

    c_in: int = Field(gt=0)
    c_mid: int = Field(gt=0)
    c_out: int = Field(gt=0)
    heads: int = Field(default=4, gt=0)
    axis_len: int = Field(default=1, gt=0)
    axis: Literal["height", "width"] = "width"
    positional: bool = True
    scale_logits: bool = True
    per_head_embeddings: bool = False
    residual: bool = True

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.c_mid % self.heads:
            raise ValueError(f"c_mid={self.c_mid} is not divisible by heads={self.heads}")
        return self

    @property
    def d_q(self) -> int:
        return self.c_mid // self.heads


class MPANetConfig(BaseModel):
    input_size: Tuple[int, int] = (256, 256)
    stages: int = Field(default=3, gt=0)
    channels: List[int] = [16, 32, 64]
    heads: int = Field(default=4, gt=0)
    patch_scales: List[int] = [1, 2, 4]
    fusion: Literal["concat_cbr"] = "concat_cbr"
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    upsample: Literal["nearest", "bilinear"] = "nearest"
    positional: bool = True
    scale_logits: bool = True
    per_head_embeddings: bool = False
    local_depth: int = Field(default=1, ge=1)
    local_pool: bool = True
    head_prior: float = Field(default=0.01, gt=0.0, lt=1.0)

    split_lists = field_validator("channels", "patch_scales", mode="before")(_split_list)
    split_size = field_validator("input_size", mode="before")(_pair)

    @model_validator(mode="after")
    def _check_layout(self):
        height, width = self.input_size
        if len(self.channels) != self.stages:
            raise ValueError(f"channels has {len(self.channels)} entries for {self.stages} stages")
        if any(c <= 0 or c % self.heads for c in self.channels):
            raise ValueError(f"every channel width must be a positive multiple of heads={self.heads}")
        step = 2 ** self.stages
        if height % step or width % step:
            raise ValueError(f"input_size {self.input_size} is not divisible by 2^stages={step}")
        if len(self.patch_scales) != 3 or self.patch_scales.count(1) != 1:
            raise ValueError("patch_scales needs three factors, exactly one of them 1")
        pool = 2 if self.local_pool else 1
        for factor in self.patch_scales:
            if factor < 1 or height % (factor * pool) or width % (factor * pool):
                raise ValueError(f"input_size {self.input_size} is not divisible by patch factor {factor}")
        return self

    @property
    def local_factors(self) -> List[int]:
        """Local patch factors, small patches (large factor) first."""
        return sorted((f for f in self.patch_scales if f != 1), reverse=True)


class TrainConfig(BaseModel):
    loss: Literal["soft_iou", "bce"] = "soft_iou"
    optimizer: Literal["adam"] = "adam"
    lr: float = Field(default=1e-3, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seed: int = 0
    eval_every: int = Field(default=1, ge=1)
    checkpoint_path: Optional[Path] = None
    augment_flip: bool = False
    augment_crop: bool = False

    split_betas = field_validator("betas", mode="before")(_split_list)


# --- data side --------------------------------------------------------------

class SyntheticSceneConfig(BaseModel):
    size: Tuple[int, int] = (256, 256)
    target_count: Tuple[int, int] = (1, 3)
    target_radius: Tuple[float, float] = (1.0, 4.0)
    target_intensity: Tuple[float, float] = (0.6, 1.0)
    background: Literal["flat", "gradient", "cloud-noise"] = "cloud-noise"
    background_level: float = Field(default=0.2, ge=0.0, le=1.0)
    noise_sigma: float = Field(default=0.02, ge=0.0)
    contrast_margin: float = Field(default=0.2, ge=0.0)
    seed: int = 0

    split_pairs = field_validator(
        "size", "target_count", "target_radius", "target_intensity", mode="before"
    )(_pair)

    @model_validator(mode="after")
    def _check_ranges(self):
        if min(self.size) <= 0:
            raise ValueError(f"size must be positive, got {self.size}")
        low, high = self.target_count
        if low < 0 or high < low:
            raise ValueError(f"bad target_count range {self.target_count}")
        if self.target_radius[0] < 1.0 or self.target_radius[1] < self.target_radius[0]:
            raise ValueError(f"target radius range must start at 1 or above, got {self.target_radius}")
        if self.target_radius[1] > 4.5:
            raise ValueError("target radius above 4.5 px does not fit a 9x9 small-target window")
        if not 0.0 < self.target_intensity[0] <= self.target_intensity[1] <= 1.0:
            raise ValueError(f"bad target_intensity range {self.target_intensity}")
        return self


class Sample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    image: np.ndarray
    mask: np.ndarray

    @model_validator(mode="after")
    def _aligned(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2-D extents")
        return self


class DatasetSplit(BaseModel):
    train: List[Sample]
    val: List[Sample]
    test: List[Sample]

    def assignments(self) -> Dict[str, str]:
        out = {}
        for name in ("train", "val", "test"):
            for sample in getattr(self, name):
                out[sample.id] = name
        return out


# --- metrics ----------------------------------------------------------------

class ConfusionCounts(BaseModel):
    T: int = Field(ge=0)
    P: int = Field(ge=0)
    TP: int = Field(ge=0)

    @model_validator(mode="after")
    def _tp_bound(self):
        if self.TP > min(self.T, self.P):
            raise ValueError(f"TP={self.TP} exceeds min(T={self.T}, P={self.P})")
        return self

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(T=self.T + other.T, P=self.P + other.P, TP=self.TP + other.TP)


class Target(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    centroid: Tuple[float, float]
    pixels: np.ndarray  # (k, 2) row/col coordinates

    @property
    def area(self) -> int:
        return int(len(self.pixels))


class TargetMatch(BaseModel):
    label_targets: List[Target]
    pred_targets: List[Target]
    matches: List[Tuple[int, int, float]]  # (label index, pred index, distance)
    image_pixels: int

    @property
    def T_correct(self) -> int:
        return len(self.matches)

    @property
    def T_All(self) -> int:
        return len(self.label_targets)

    @property
    def P_false(self) -> int:
        matched = {pred for _, pred, _ in self.matches}
        return sum(t.area for i, t in enumerate(self.pred_targets) if i not in matched)

    @property
    def P_All(self) -> int:
        return self.image_pixels


class ImageMetrics(BaseModel):
    id: str
    T: int
    P: int
    TP: int
    iou: float
    precision: float
    recall: float
    n_label_targets: int
    n_pred_targets: int
    n_matched: int
    false_pixels: int


class MetricsReport(BaseModel):
    iou: float
    niou: float
    f1: float
    pd: float
    fa: float
    rows: List[ImageMetrics]
    counts: ConfusionCounts
    T_correct: int
    T_All: int
    P_false: int
    P_All: int
    f1_as_printed: bool = False
    iou_as_printed: bool = False

    @property
    def fa_e6(self) -> float:
        """Fa in the conventional x10^-6 display unit."""
        return self.fa * 1e6


# --- harness records --------------------------------------------------------

class GradCheckReport(BaseModel):
    name: str
    max_rel_error: float
    tol: float
    per_tensor: Dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


class BenchRow(BaseModel):
    size: int
    axial_macs: int
    nonlocal_macs: int
    axial_seconds: float
    nonlocal_seconds: float

    @property
    def ratio(self) -> float:
        return self.axial_macs / self.nonlocal_macs

    @property
    def analytic_ratio(self) -> float:
        return (2 * self.size) / (self.size * self.size)


class RunConfig(BaseModel):
    subcommand: Literal["synth", "train", "eval", "infer", "gradcheck", "bench"]
    config_path: Optional[Path] = None
    out_dir: Path = Path("runs")
    seed: Optional[int] = None
    model: MPANetConfig = MPANetConfig()
    synth: SyntheticSceneConfig = SyntheticSceneConfig()
    train: TrainConfig = TrainConfig()


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    tensors: Dict[str, np.ndarray]  # parameters and buffers by dotted name
    optimizer: Dict[str, np.ndarray] = {}
    epoch: int = Field(default=0, ge=0)
    best_niou: float = 0.0
    config: dict = {}
