"""Non-local attention and position-sensitive axial attention.

Feature maps are N x C x H x W. Attention runs per head on d = C / heads
channels; the position-sensitive form adds learned relative-offset embeddings
on queries, keys and values and attends along one axis only.
"""
import math
from typing import Optional, Tuple

import numpy as np

from app.errors import ConfigError, DimensionError
from app.models import AxialAttentionConfig
from brain import functional as F
from brain.nn import Module, Parameter
from brain.tensor import Tensor


# einsum letters: n batch, g head, c channel, i query position, j key position,
# o the position along the axis that is not attended
_AXIS_SUBSCRIPTS = {
    "width": {"q": "ngcoi", "k": "ngcoj", "logits": "ngoij"},
    "height": {"q": "ngcio", "k": "ngcjo", "logits": "ngoij"},
}


class RelPosEmbedding:
    """Relative-position tables r^q, r^k, r^v for one axis of extent ``span``.

    Tables have 2L-1 columns indexed by ``(key_pos - query_pos) + (L - 1)``;
    gathering them over all (query, key) pairs gives one L x L matrix per channel.
    """

    def __init__(self, axis: str, span: int, d_q: int, d_v: int, rng: np.random.Generator,
                 heads: Optional[int] = None):
        self.axis = axis
        self.span = span
        lead = (heads,) if heads else ()
        width = 2 * span - 1
        self.q_table = Parameter((rng.standard_normal(lead + (d_q, width)) / math.sqrt(d_q)).astype(np.float32))
        self.k_table = Parameter((rng.standard_normal(lead + (d_q, width)) / math.sqrt(d_q)).astype(np.float32))
        self.v_table = Parameter((rng.standard_normal(lead + (d_v, width)) / math.sqrt(d_v)).astype(np.float32))

    @property
    def per_head(self) -> bool:
        return self.q_table.ndim == 3

    @property
    def offsets(self) -> np.ndarray:
        query = np.arange(self.span)[:, None]
        key = np.arange(self.span)[None, :]
        return key - query + self.span - 1

    def gathered(self) -> Tuple[Tensor, Tensor, Tensor]:
        """(r^q, r^k, r^v) as [heads x] d x L(query) x L(key) tensors."""
        index = self.offsets
        return tuple(F.gather(t, index, axis=-1) for t in (self.q_table, self.k_table, self.v_table))


def qkv_project(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """q = W_Q x, k = W_K x, v = W_V x as 1x1 convolutions (weights c_mid x c_in)."""
    if x.ndim != 4:
        raise DimensionError(f"qkv_project expects N x C x H x W input, got {x.shape}")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        if w.ndim != 2 or w.shape[1] != x.shape[1]:
            raise DimensionError(f"qkv_project: {name} {w.shape} does not accept {x.shape[1]} input channels")
    return tuple(F.einsum("oc,nchw->nohw", w, x) for w in (wq, wk, wv))


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, c, h, w = t.shape
    if c % heads:
        raise DimensionError(f"{c} channels do not split into {heads} heads")
    return t.reshape(n, heads, c // heads, h, w)


def nonlocal_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1, scale: bool = False) -> Tensor:
    """y_ij = sum over every position hw of softmax(q_ij . k_hw) v_hw."""
    if q.shape != k.shape:
        raise DimensionError(f"nonlocal_attention: q {q.shape} and k {k.shape} differ")
    if v.shape[0] != q.shape[0] or v.shape[2:] != q.shape[2:]:
        raise DimensionError(f"nonlocal_attention: v {v.shape} is not aligned with q {q.shape}")
    n, _, height, width = q.shape
    qh = _split_heads(q, heads).reshape(n, heads, -1, height * width)
    kh = _split_heads(k, heads).reshape(n, heads, -1, height * width)
    vh = _split_heads(v, heads).reshape(n, heads, -1, height * width)
    logits = F.einsum("ngci,ngcj->ngij", qh, kh)
    if scale:
        logits = logits * (1.0 / math.sqrt(qh.shape[2]))
    weights = F.softmax(logits, axis=-1)
    y = F.einsum("ngij,ngcj->ngci", weights, vh)
    return y.reshape(n, v.shape[1], height, width)


def axial_position_sensitive_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    emb: Optional[RelPosEmbedding],
    axis: str,
    heads: int = 1,
    scale: bool = False,
) -> Tensor:
    """Attention restricted to one axis with relative-position terms on q, k and v.

    logits(i, j) = q_i.k_j + q_i.r^q(j-i) + k_j.r^k(j-i), softmax over j along the
    axis, y_i = sum_j a(i, j) (v_j + r^v(j-i)). ``emb=None`` drops the positional
    terms, which is the single-axis non-local form.
    """
    if axis not in _AXIS_SUBSCRIPTS:
        raise DimensionError(f"axis must be 'height' or 'width', got {axis!r}")
    if q.shape != k.shape:
        raise DimensionError(f"axial attention: q {q.shape} and k {k.shape} differ")
    if v.shape[0] != q.shape[0] or v.shape[2:] != q.shape[2:]:
        raise DimensionError(f"axial attention: v {v.shape} is not aligned with q {q.shape}")
    length = q.shape[3] if axis == "width" else q.shape[2]
    if emb is not None and emb.span != length:
        raise DimensionError(f"{axis} embedding spans {emb.span} positions, feature axis has {length}")

    subs = _AXIS_SUBSCRIPTS[axis]
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    logits = F.einsum(f"{subs['q']},{subs['k']}->{subs['logits']}", qh, kh)
    if emb is not None:
        rq, rk, rv = emb.gathered()
        table = "gcij" if emb.per_head else "cij"
        logits = logits + F.einsum(f"{subs['q']},{table}->{subs['logits']}", qh, rq)
        logits = logits + F.einsum(f"{subs['k']},{table}->{subs['logits']}", kh, rk)
    if scale:
        logits = logits * (1.0 / math.sqrt(qh.shape[2]))
    weights = F.softmax(logits, axis=-1)
    y = F.einsum(f"{subs['logits']},{subs['k']}->{subs['q']}", weights, vh)
    if emb is not None:
        y = y + F.einsum(f"{subs['logits']},{table}->{subs['q']}", weights, rv)
    return y.reshape(v.shape)


def analytic_axial_macs(n: int, heads: int, d_q: int, d_v: int, height: int, width: int,
                        positional: bool = True) -> int:
    """Multiply-accumulates of one height pass plus one width pass."""
    per_pair = d_q + d_v + ((2 * d_q + d_v) if positional else 0)
    return n * heads * height * width * (height + width) * per_pair


def analytic_nonlocal_macs(n: int, heads: int, d_q: int, d_v: int, height: int, width: int) -> int:
    return n * heads * (height * width) ** 2 * (d_q + d_v)


def _projection(rng: np.random.Generator, c_out: int, c_in: int) -> Parameter:
    return Parameter((rng.standard_normal((c_out, c_in)) / math.sqrt(c_in)).astype(np.float32))


class AxialAttentionLayer(Module):
    """W_Q/W_K/W_V projection plus position-sensitive attention along ``cfg.axis``."""

    def __init__(self, cfg: AxialAttentionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.wq = _projection(rng, cfg.c_mid, cfg.c_in)
        self.wk = _projection(rng, cfg.c_mid, cfg.c_in)
        self.wv = _projection(rng, cfg.c_mid, cfg.c_in)
        self.embedding = None
        if cfg.positional:
            self.embedding = RelPosEmbedding(
                cfg.axis, cfg.axis_len, cfg.d_q, cfg.d_q, rng,
                heads=cfg.heads if cfg.per_head_embeddings else None,
            )
            self.rq = self.embedding.q_table
            self.rk = self.embedding.k_table
            self.rv = self.embedding.v_table

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = qkv_project(x, self.wq, self.wk, self.wv)
        return axial_position_sensitive_attention(
            q, k, v, self.embedding, self.cfg.axis, heads=self.cfg.heads, scale=self.cfg.scale_logits
        )


class AxialBlock(Module):
    """Height-axis layer, width-axis layer, 1x1 projection to c_out, optional residual."""

    def __init__(self, cfg_h: AxialAttentionConfig, cfg_w: AxialAttentionConfig, rng: np.random.Generator):
        super().__init__()
        if cfg_h.axis != "height" or cfg_w.axis != "width":
            raise ConfigError(f"axial block needs a height then a width layer, got {cfg_h.axis}/{cfg_w.axis}")
        if cfg_w.c_in != cfg_h.c_mid:
            raise ConfigError(f"width layer takes {cfg_w.c_in} channels, height layer yields {cfg_h.c_mid}")
        self.residual = cfg_w.residual
        if self.residual and cfg_h.c_in != cfg_w.c_out:
            raise ConfigError(f"residual needs c_in == c_out, got {cfg_h.c_in} and {cfg_w.c_out}")
        self.add_module("height", AxialAttentionLayer(cfg_h, rng))
        self.add_module("width", AxialAttentionLayer(cfg_w, rng))
        self.wo = _projection(rng, cfg_w.c_out, cfg_w.c_mid)

    def forward(self, x: Tensor) -> Tensor:
        y = self._modules["height"](x)
        y = self._modules["width"](y)
        y = F.einsum("oc,nchw->nohw", self.wo, y)
        return x + y if self.residual else y


class NonLocalBlock(Module):
    """Projection, full-map attention, 1x1 output projection, residual."""

    def __init__(self, channels: int, c_mid: int, heads: int, rng: np.random.Generator, scale: bool = True):
        super().__init__()
        if c_mid % heads:
            raise ConfigError(f"c_mid={c_mid} is not divisible by heads={heads}")
        self.heads = heads
        self.scale = scale
        self.wq = _projection(rng, c_mid, channels)
        self.wk = _projection(rng, c_mid, channels)
        self.wv = _projection(rng, c_mid, channels)
        self.wo = _projection(rng, channels, c_mid)

    def forward(self, x: Tensor) -> Tensor:
        q, k, v = qkv_project(x, self.wq, self.wk, self.wv)
        y = nonlocal_attention(q, k, v, heads=self.heads, scale=self.scale)
        return x + F.einsum("oc,nchw->nohw", self.wo, y)
