"""The multi-patch attention network.

A U-shaped global branch with axial-attention stages sees the full image; one
local branch per extra patch factor encodes non-overlapping patches with
shared weights and non-local blocks; local features are fused bottom-up (small
patches first) and finally with the global features into a sigmoid heatmap.
"""
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from app.errors import ContractError, DimensionError
from app.models import AxialAttentionConfig, MPANetConfig
from brain import functional as F
from brain.attention import AxialBlock, NonLocalBlock
from brain.nn import CBRBlock, Conv2d, Module, ModuleList
from brain.tensor import Tensor

logger = logging.getLogger(__name__)


def patch_split(x: Tensor, factor: int) -> Tensor:
    """N x C x H x W -> (N*f*f) x C x H/f x W/f, patches in row-major order per image."""
    n, c, height, width = x.shape
    if height % factor or width % factor:
        raise DimensionError(f"patch_split: {height}x{width} is not divisible by factor {factor}")
    h, w = height // factor, width // factor
    return (
        x.reshape(n, c, factor, h, factor, w)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n * factor * factor, c, h, w)
    )


def patch_merge(patches: Tensor, factor: int) -> Tensor:
    """Exact inverse of :func:`patch_split`."""
    b, c, h, w = patches.shape
    if b % (factor * factor):
        raise DimensionError(f"patch_merge: batch {b} is not a multiple of {factor}^2")
    n = b // (factor * factor)
    return (
        patches.reshape(n, factor, factor, c, h, w)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(n, c, factor * h, factor * w)
    )


def predict_mask(heatmap: Union[Tensor, np.ndarray], threshold: float = 0.5) -> np.ndarray:
    data = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    return (data > threshold).astype(np.uint8)


class GlobalStage(Module):
    def __init__(self, c_in: int, channels: int, heads: int, size, cfg: MPANetConfig,
                 rng: np.random.Generator, up_in: int = 0):
        super().__init__()
        height, width = size
        layer = dict(heads=heads, positional=cfg.positional, scale_logits=cfg.scale_logits,
                     per_head_embeddings=cfg.per_head_embeddings)
        self.cbr = CBRBlock(c_in, channels, rng)
        self.attn = AxialBlock(
            AxialAttentionConfig(c_in=channels, c_mid=channels, c_out=channels, axis_len=height,
                                 axis="height", **layer),
            AxialAttentionConfig(c_in=channels, c_mid=channels, c_out=channels, axis_len=width,
                                 axis="width", **layer),
            rng,
        )
        # decoder CBR, absent on the deepest stage
        self.up = CBRBlock(up_in + channels, channels, rng) if up_in else None


class GlobalBranch(Module):
    """Down: CBR, axial block, maxpool. Up: upsample, skip concat, CBR."""

    def __init__(self, cfg: MPANetConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        height, width = cfg.input_size
        self.stages: List[GlobalStage] = []
        for k, channels in enumerate(cfg.channels):
            c_in = 1 if k == 0 else cfg.channels[k - 1]
            up_in = cfg.channels[k + 1] if k + 1 < cfg.stages else 0
            stage = GlobalStage(c_in, channels, cfg.heads, (height >> k, width >> k), cfg, rng, up_in)
            self.add_module(f"stage{k + 1}", stage)
            self.stages.append(stage)

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        for k, stage in enumerate(self.stages):
            if k:
                x = F.maxpool2d(x)
            x = stage.attn(stage.cbr(x))
            skips.append(x)
        for stage, skip in zip(reversed(self.stages[:-1]), reversed(skips[:-1])):
            x = F.upsample2x(x, self.cfg.upsample)
            x = stage.up(F.concat([x, skip], axis=1))
        return x


class LocalBranch(Module):
    """Shared-weight patch encoder: CBR, [pool], non-local block(s), [upsample + skip], CBR."""

    def __init__(self, factor: int, cfg: MPANetConfig, rng: np.random.Generator):
        super().__init__()
        self.factor = factor
        self.pool = cfg.local_pool
        self.upsample = cfg.upsample
        channels = cfg.channels[0]
        self.cbr_in = CBRBlock(1, channels, rng)
        self.nl = ModuleList(
            NonLocalBlock(channels, channels, cfg.heads, rng, scale=cfg.scale_logits)
            for _ in range(cfg.local_depth)
        )
        self.cbr_out = CBRBlock(2 * channels, channels, rng)

    def encode(self, patches: Tensor) -> Tensor:
        skip = self.cbr_in(patches)
        y = F.maxpool2d(skip) if self.pool else skip
        for block in self.nl:
            y = block(y)
        if self.pool:
            y = F.upsample2x(y, self.upsample)
        return self.cbr_out(F.concat([y, skip], axis=1))

    def forward(self, x: Tensor) -> Tensor:
        return patch_merge(self.encode(patch_split(x, self.factor)), self.factor)


class MPANet(Module):
    def __init__(self, cfg: MPANetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.add_module("global", GlobalBranch(cfg, rng))
        self.locals: Dict[int, LocalBranch] = {}
        for factor in cfg.local_factors:
            branch = LocalBranch(factor, cfg, rng)
            self.add_module(f"local{factor}", branch)
            self.locals[factor] = branch
        channels = cfg.channels[0]
        self.add_module("fuse", ModuleList(
            (CBRBlock(2 * channels, channels, rng) for _ in cfg.local_factors), start=1
        ))
        head = Conv2d(channels, 1, 1, rng)
        # heatmap starts at the foreground prior, not at 0.5
        head.bias.data[...] = np.log(cfg.head_prior / (1.0 - cfg.head_prior))
        self.add_module("head", head)
        logger.info("built MPANet %s with %d parameters", cfg.input_size, self.parameter_count())

    # --- branches -----------------------------------------------------------
    def global_branch(self, x: Tensor) -> Tensor:
        return self._modules["global"](x)

    def local_branch(self, x: Tensor, factor: int) -> Tensor:
        if factor not in self.locals:
            raise DimensionError(f"no local branch for patch factor {factor}; have {sorted(self.locals)}")
        return self.locals[factor](x)

    def fuse_branches(self, global_feat: Tensor, local_feats: Sequence[Tensor]) -> Tensor:
        """Bottom-up: fuse local features small-patch first, then with the global map."""
        fuse = self._modules["fuse"]
        if len(local_feats) != len(fuse):
            raise DimensionError(f"expected {len(fuse)} local feature maps, got {len(local_feats)}")
        for feat in local_feats:
            if feat.shape[2:] != global_feat.shape[2:]:
                raise DimensionError(
                    f"fusion needs equal resolutions, got {feat.shape} and {global_feat.shape}"
                )
        x = local_feats[0]
        for block, feat in zip(fuse, list(local_feats[1:]) + [global_feat]):
            x = block(F.concat([x, feat], axis=1))
        return x

    def local_fusion(self, local_feats: Sequence[Tensor]) -> Tensor:
        """The local-only part of the bottom-up chain (every fusion step but the last)."""
        fuse = self._modules["fuse"]
        x = local_feats[0]
        for block, feat in zip(fuse, local_feats[1:]):
            x = block(F.concat([x, feat], axis=1))
        return x

    # --- end to end ---------------------------------------------------------
    def _check_input(self, image: Tensor) -> None:
        expected = (1,) + tuple(self.cfg.input_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise DimensionError(f"expected N x {' x '.join(map(str, expected))} input, got {image.shape}")
        if image.data.min() < 0.0 or image.data.max() > 1.0:
            raise ContractError("input image must be normalized to [0, 1]")

    def branch_features(self, image: Tensor) -> Dict[str, Tensor]:
        self._check_input(image)
        global_feat = self.global_branch(image)
        local_feats = [self.local_branch(image, f) for f in self.cfg.local_factors]
        fused = self.fuse_branches(global_feat, local_feats)
        return {
            "global": global_feat,
            "local": self.local_fusion(local_feats),
            "fused": fused,
        }

    def forward(self, image: Tensor) -> Tensor:
        self._check_input(image)
        global_feat = self.global_branch(image)
        local_feats = [self.local_branch(image, f) for f in self.cfg.local_factors]
        fused = self.fuse_branches(global_feat, local_feats)
        return F.sigmoid(self._modules["head"](fused))

    def predict_mask(self, heatmap: Union[Tensor, np.ndarray], threshold: Optional[float] = None) -> np.ndarray:
        return predict_mask(heatmap, self.cfg.threshold if threshold is None else threshold)

    def parameter_counts(self) -> Dict[str, int]:
        return {name: module.parameter_count() for name, module in self._modules.items()}
