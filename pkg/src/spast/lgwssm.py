"""Local/global window attention stylization.

Two attention paths fuse style features into content features. The local
path splits both maps into b x b non-overlapping regions, matches every
content region to its most similar style region, and renders each region
with attention-weighted mean/std statistics of the matched style tokens.
The global path runs the same statistics over all positions at once. The
stylized feature is the sum of the unblocked local output and the global
output, both produced from learnable 1x1 projections.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import GridError, ShapeError
from .feature_codec import LEVEL_CHANNELS

NORM_EPS = 1e-5


@dataclass(frozen=True)
class RegionGrid:
    """A b x b decomposition of one feature map."""

    b: int
    region_h: int
    region_w: int

    @classmethod
    def for_feature(cls, b: int, h: int, w: int) -> "RegionGrid":
        if b < 1:
            raise GridError(f"region count per side must be >= 1, got {b}")
        if h % b or w % b:
            raise GridError(f"b={b} does not divide feature size {h}x{w}")
        return cls(b, h // b, w // b)

    @property
    def regions(self) -> int:
        return self.b * self.b

    @property
    def tokens(self) -> int:
        return self.region_h * self.region_w


@dataclass
class BlockedTensor:
    """Region-major token layout: data is (b*b, tokens, C)."""

    data: torch.Tensor
    grid: RegionGrid


def channel_norm(f: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Zero-mean, unit-std normalization of each channel over space.

    Population statistics; ``eps`` inside the sqrt keeps constant channels
    finite (they normalize to zero).
    """
    mean = f.mean(dim=(-2, -1), keepdim=True)
    var = f.var(dim=(-2, -1), keepdim=True, correction=0)
    return (f - mean) / torch.sqrt(var + eps)


def _project(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """1x1 convolution as a channel-mixing matmul; x is (C, ...)."""
    y = torch.tensordot(weight, x, dims=([1], [0]))
    if bias is not None:
        y = y + bias.view(-1, *([1] * (x.dim() - 1)))
    return y


def block(
    f: torch.Tensor,
    grid: RegionGrid,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    normalize: bool = False,
) -> BlockedTensor:
    """Normalize (optionally), project (optionally) and split into regions.

    Regions are row-major over the grid; tokens are row-major inside each
    region, so region n holds exactly the pixels of spatial region n.
    """
    if normalize:
        f = channel_norm(f)
    if weight is not None:
        f = _project(f, weight, bias)
    c, h, w = f.shape
    if grid.region_h * grid.b != h or grid.region_w * grid.b != w:
        raise GridError(f"grid {grid} does not match feature size {h}x{w}")
    b, rh, rw = grid.b, grid.region_h, grid.region_w
    data = f.reshape(c, b, rh, b, rw).permute(1, 3, 2, 4, 0).reshape(b * b, rh * rw, c)
    return BlockedTensor(data, grid)


def unblock(
    bt: BlockedTensor,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Inverse of the blocking layout, then an optional 1x1 projection."""
    b, rh, rw = bt.grid.b, bt.grid.region_h, bt.grid.region_w
    c = bt.data.shape[-1]
    f = bt.data.reshape(b, b, rh, rw, c).permute(4, 0, 2, 1, 3).reshape(c, b * rh, b * rw)
    if weight is not None:
        f = _project(f, weight, bias)
    return f


def region_match(qb: BlockedTensor, kb: BlockedTensor) -> torch.Tensor:
    """Index of the most similar style region for every content region.

    Similarity is the cosine between mean-pooled region descriptors; exact
    ties break toward the lowest style index. Many-to-one matches are
    allowed. Returns an integer vector of length b*b.
    """
    if qb.data.shape[-1] != kb.data.shape[-1]:
        raise ShapeError("content/style blocked tensors disagree on channels")
    return match_descriptors(qb.data.mean(dim=1), kb.data.mean(dim=1))


def match_descriptors(content_desc: torch.Tensor, style_desc: torch.Tensor) -> torch.Tensor:
    """Cosine argmax of (R_c, C) descriptors against (R_s, C) descriptors."""
    cn = content_desc / content_desc.norm(dim=1, keepdim=True).clamp(min=1e-12)
    sn = style_desc / style_desc.norm(dim=1, keepdim=True).clamp(min=1e-12)
    sims = cn @ sn.T
    best = sims.max(dim=1, keepdim=True).values
    # first maximal index wins, independent of argmax tie behavior
    rank = torch.arange(sims.shape[1], 0, -1, device=sims.device)
    return ((sims == best) * rank).argmax(dim=1)


def rearrange_regions(
    kb: BlockedTensor, vb: BlockedTensor, idx: torch.Tensor
) -> tuple[BlockedTensor, BlockedTensor]:
    """Gather style regions so output region n equals input region idx[n]."""
    regions = kb.data.shape[0]
    if idx.min() < 0 or idx.max() >= regions:
        raise IndexError(f"region index out of range [0,{regions})")
    return (
        BlockedTensor(kb.data[idx], kb.grid),
        BlockedTensor(vb.data[idx], vb.grid),
    )


def region_attention(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-softmax of q @ k^T for (tokens, C) region tensors.

    Also accepts a leading region batch dimension.
    """
    return torch.softmax(q @ k.transpose(-1, -2), dim=-1)


def attention_weighted_stats(v: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-query attention-weighted mean and standard deviation of values.

    ``v`` is (..., C, T_k), ``a`` is (..., T_q, T_k) with rows summing to 1.
    The variance is clamped at zero before the sqrt (subgradient zero at
    the clamp), so one-hot attention yields an exact zero std.
    """
    at = a.transpose(-1, -2)
    m = v @ at
    e2 = (v * v) @ at
    var = e2 - m * m
    s = torch.where(var > 0, var.clamp(min=1e-20).sqrt(), torch.zeros_like(var))
    return m, s


class StylizationParams(nn.Module):
    """Learnable 1x1 projections for one feature level.

    The global path uses separate query/key/value projections; the local
    path shares a single blocking projection for its query/key/value and
    owns the unblocking projection applied after region assembly.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.query_weight = nn.Parameter(torch.empty(channels, channels))
        self.query_bias = nn.Parameter(torch.empty(channels))
        self.key_weight = nn.Parameter(torch.empty(channels, channels))
        self.key_bias = nn.Parameter(torch.empty(channels))
        self.value_weight = nn.Parameter(torch.empty(channels, channels))
        self.value_bias = nn.Parameter(torch.empty(channels))
        self.blocking_weight = nn.Parameter(torch.empty(channels, channels))
        self.blocking_bias = nn.Parameter(torch.empty(channels))
        self.unblocking_weight = nn.Parameter(torch.empty(channels, channels))
        self.unblocking_bias = nn.Parameter(torch.empty(channels))
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        # identity value/blocking and a zero unblocking projection give an
        # AdaIN-like warm start with the local branch opening up via its
        # own gradients
        with torch.no_grad():
            for w in (self.query_weight, self.key_weight):
                w.uniform_(-0.05, 0.05, generator=generator)
            self.value_weight.copy_(torch.eye(self.channels))
            self.blocking_weight.copy_(torch.eye(self.channels))
            self.unblocking_weight.zero_()
            for b in (
                self.query_bias,
                self.key_bias,
                self.value_bias,
                self.blocking_bias,
                self.unblocking_bias,
            ):
                b.zero_()


def _lwssm_blocked(
    fc: torch.Tensor, fs: torch.Tensor, params: StylizationParams, grid: RegionGrid
) -> BlockedTensor:
    """Region-matched attention statistics; output stays in blocked layout."""
    grid_s = RegionGrid.for_feature(grid.b, fs.shape[-2], fs.shape[-1])
    nfc = channel_norm(fc)
    qb = block(nfc, grid, params.blocking_weight, params.blocking_bias)
    kb = block(fs, grid_s, params.blocking_weight, params.blocking_bias, normalize=True)
    vb = block(fs, grid_s, params.blocking_weight, params.blocking_bias)
    idx = region_match(qb, kb)
    kt, vt = rearrange_regions(kb, vb, idx)
    a = region_attention(qb.data, kt.data)  # (R, Tq, Ts)
    m, s = attention_weighted_stats(vt.data.transpose(-1, -2), a)  # (R, C, Tq)
    nc = block(nfc, grid).data  # (R, Tq, C)
    out = s * nc.transpose(-1, -2) + m
    return BlockedTensor(out.transpose(-1, -2), grid)


def lwssm_forward(
    fc: torch.Tensor, fs: torch.Tensor, params: StylizationParams, grid: RegionGrid
) -> torch.Tensor:
    """Local path only, restored to the content feature's spatial layout."""
    return unblock(_lwssm_blocked(fc, fs, params, grid))


def gwssm_forward(fc: torch.Tensor, fs: torch.Tensor, params: StylizationParams) -> torch.Tensor:
    """Full-attention stylization over all content/style positions."""
    nfc = channel_norm(fc)
    c = fc.shape[0]
    q = _project(nfc, params.query_weight, params.query_bias).reshape(c, -1)
    k = _project(channel_norm(fs), params.key_weight, params.key_bias).reshape(c, -1)
    v = _project(fs, params.value_weight, params.value_bias).reshape(c, -1)
    a = torch.softmax(q.T @ k, dim=-1)
    m, s = attention_weighted_stats(v, a)
    out = s * nfc.reshape(c, -1) + m
    return out.reshape(fc.shape)


def lgwssm_forward(
    fc: torch.Tensor, fs: torch.Tensor, params: StylizationParams, grid: RegionGrid
) -> torch.Tensor:
    """Sum of the unblocked local path and the global path."""
    local = unblock(_lwssm_blocked(fc, fs, params, grid), params.unblocking_weight, params.unblocking_bias)
    return local + gwssm_forward(fc, fs, params)


class Stylizer(nn.Module):
    """Applies the fused stylization at the configured encoder levels.

    With both default levels, relu5_1's output is nearest-upsampled and
    added to relu4_1's, producing the feature handed to the decoder. The
    two attention branches can be disabled individually for ablations.
    """

    def __init__(
        self,
        levels: tuple = ("relu4_1", "relu5_1"),
        b: int = 4,
        use_local: bool = True,
        use_global: bool = True,
    ):
        super().__init__()
        if "relu4_1" not in levels:
            raise ValueError("stylization levels must include relu4_1")
        for level in levels:
            if level not in ("relu4_1", "relu5_1"):
                raise ValueError(f"unsupported stylization level {level}")
        self.levels = tuple(levels)
        self.b = b
        self.use_local = use_local
        self.use_global = use_global
        self.params = nn.ModuleDict({level: StylizationParams(LEVEL_CHANNELS[level]) for level in self.levels})

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for p in self.params.values():
            p.reset_parameters(generator)

    def forward(self, pyr_c: dict, pyr_s: dict) -> torch.Tensor:
        fused = {}
        for level in self.levels:
            fc, fs = pyr_c[level], pyr_s[level]
            grid = RegionGrid.for_feature(self.b, fc.shape[-2], fc.shape[-1])
            p = self.params[level]
            if self.use_local and self.use_global:
                y = lgwssm_forward(fc, fs, p, grid)
            elif self.use_local:
                y = unblock(_lwssm_blocked(fc, fs, p, grid), p.unblocking_weight, p.unblocking_bias)
            elif self.use_global:
                y = gwssm_forward(fc, fs, p)
            else:
                y = fc
            fused[level] = y
        out = fused["relu4_1"]
        if "relu5_1" in fused:
            up = F.interpolate(fused["relu5_1"].unsqueeze(0), size=out.shape[-2:], mode="nearest")
            out = out + up.squeeze(0)
        return out
