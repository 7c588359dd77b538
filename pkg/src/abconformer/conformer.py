"""Conformer sublayers (feedforward, masked self-attention, convolution block)
and the per-block three-branch wiring: the antigen branch runs all sublayers
and slides against each antibody branch; antibody branches omit self-attention.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import Config, ChainRole, DataError
from .sliding import AttentionMaps, SlidingParams, run_sliding

# Additive fill for masked attention scores. Large enough that exp underflows
# to exactly 0 after the row-max shift, yet finite so fully-padded query rows
# softmax to a uniform (finite) distribution instead of NaN.
_MASK_FILL = -1e30


def mask_rows(x: Tensor, mask: Tensor) -> Tensor:
    """Zero features at padded positions."""
    return x * mask.to(x.dtype).unsqueeze(-1)


def init_affine(module: nn.Module) -> None:
    """Symmetric uniform weights scaled by 1/sqrt(fan_in); zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv1d):
            fan_in = m.weight.shape[1] * m.weight.shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class FeedForward(nn.Module):
    """Pre-norm two-layer feedforward with residual add; padded rows zeroed."""

    def __init__(self, d: int, dim_ff: int):
        super().__init__()
        self.norm = nn.LayerNorm(d)
        self.lin_in = nn.Linear(d, dim_ff)
        self.lin_out = nn.Linear(dim_ff, d)
        init_affine(self)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        y = self.lin_out(F.gelu(self.lin_in(self.norm(x))))
        return mask_rows(x + y, mask)


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with padded keys masked out."""

    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads != 0:
            raise DataError("d_model must be divisible by n_heads", module="conformer")
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.norm = nn.LayerNorm(d)
        # Bias-free q/k/v: a key-side bias shifts every attended score in a
        # row equally, so softmax ignores it and the parameter would be dead.
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d)
        init_affine(self)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        b, length, d = x.shape
        y = self.norm(x)
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        shape = (b, length, self.n_heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], _MASK_FILL)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(b, length, d)
        return mask_rows(x + self.out(ctx), mask)


class ConvBlock(nn.Module):
    """Pre-norm depthwise + pointwise convolution with residual add.

    Padded rows are zeroed before the convolution so padding never leaks
    through the receptive field, and again after the residual add.
    """

    def __init__(self, d: int, kernel: int):
        super().__init__()
        if kernel % 2 == 0 or kernel < 1:
            raise DataError("conv kernel must be odd", module="conformer")
        self.norm = nn.LayerNorm(d)
        self.depthwise = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d, bias=False)
        self.pointwise = nn.Linear(d, d)
        init_affine(self)

    def conv_path(self, x: Tensor) -> Tensor:
        """Depthwise then pointwise map, before the nonlinearity."""
        y = self.depthwise(x.transpose(1, 2)).transpose(1, 2)
        return self.pointwise(y)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        y = mask_rows(self.norm(x), mask)
        y = F.gelu(self.conv_path(y))
        return mask_rows(x + y, mask)


def combine_heavy_light(x_h: Tensor, x_l: Tensor, alpha: float) -> Tensor:
    """Convex combination of the two antigen variants produced by sliding."""
    if x_h.shape != x_l.shape:
        raise DataError("combine requires equal shapes", module="conformer")
    if not (0.0 <= alpha <= 1.0):
        raise DataError("alpha out of [0,1]", module="conformer")
    return alpha * x_h + (1.0 - alpha) * x_l


class AntibodyBranch(nn.Module):
    """Antibody-side sublayers: feedforward, convolution, feedforward.

    No self-attention. The branch is split around the sliding pass: `enter`
    runs before the antigen slides against this chain, `finish` after.
    """

    def __init__(self, config: Config):
        super().__init__()
        self.ff_in = FeedForward(config.d_model, config.dim_ff)
        self.conv = ConvBlock(config.d_model, config.conv_kernel)
        self.ff_out = FeedForward(config.d_model, config.dim_ff)

    def enter(self, x: Tensor, mask: Tensor) -> Tensor:
        return self.ff_in(x, mask)

    def finish(self, x: Tensor, mask: Tensor) -> Tensor:
        return self.ff_out(self.conv(x, mask), mask)

    def forward(self, x: Tensor, mask: Tensor) -> Tensor:
        return self.finish(self.enter(x, mask), mask)


def antibody_layer(branch: AntibodyBranch, ab: Tensor, mask: Tensor) -> Tensor:
    """Full antibody branch when no sliding update intervenes."""
    return branch(ab, mask)


class Block(nn.Module):
    """One stacked layer of the three-branch backbone."""

    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        d, dim_ff = config.d_model, config.dim_ff
        self.ag_ff_in = FeedForward(d, dim_ff)
        self.ag_attn = SelfAttention(d, config.n_heads)
        self.slide_h = SlidingParams(d)
        self.slide_l = SlidingParams(d)
        self.ag_conv = ConvBlock(d, config.conv_kernel)
        self.ag_ff_out = FeedForward(d, dim_ff)
        self.ab_h = AntibodyBranch(config)
        self.ab_l = AntibodyBranch(config)

    def _slide(
        self,
        ag: Tensor,
        ab: Tensor,
        mask_ag: Tensor,
        mask_ab: Tensor,
        params: SlidingParams,
        record_maps: bool,
    ) -> tuple[Tensor, Tensor, AttentionMaps | None]:
        if ab.shape[-2] == 0 or not bool(mask_ab.any()):
            # Absent chain: the antigen passes through untouched.
            return ag, ab, None
        n = ab.shape[-2]
        q = torch.arange(n, dtype=ag.dtype, device=ag.device).expand(ab.shape[0], n)
        pair_mask = mask_ag.unsqueeze(-1) & mask_ab.unsqueeze(-2)
        return run_sliding(ag, ab, q, pair_mask, params, self.config, record_maps=record_maps)

    def antigen_layer(
        self,
        ag: Tensor,
        ab_h: Tensor,
        ab_l: Tensor,
        mask_ag: Tensor,
        mask_h: Tensor,
        mask_l: Tensor,
        record_maps: bool = False,
    ) -> tuple[Tensor, Tensor, Tensor, dict[ChainRole, AttentionMaps | None]]:
        """Antigen sublayers plus the two sliding passes.

        Both slidings consume the same post-attention antigen embeddings; the
        two resulting antigen variants are combined before the convolution.
        Antibody inputs are expected post-`enter`.
        """
        ag = self.ag_ff_in(ag, mask_ag)
        ag = self.ag_attn(ag, mask_ag)
        x_h, ab_h, maps_h = self._slide(ag, ab_h, mask_ag, mask_h, self.slide_h, record_maps)
        x_l, ab_l, maps_l = self._slide(ag, ab_l, mask_ag, mask_l, self.slide_l, record_maps)
        ag = combine_heavy_light(x_h, x_l, self.config.alpha)
        ag = self.ag_conv(ag, mask_ag)
        ag = self.ag_ff_out(ag, mask_ag)
        return ag, ab_h, ab_l, {ChainRole.ABH: maps_h, ChainRole.ABL: maps_l}

    def forward(
        self,
        ag: Tensor,
        ab_h: Tensor,
        ab_l: Tensor,
        mask_ag: Tensor,
        mask_h: Tensor,
        mask_l: Tensor,
        record_maps: bool = False,
    ) -> tuple[Tensor, Tensor, Tensor, dict[ChainRole, AttentionMaps | None]]:
        has_h = ab_h.shape[-2] > 0 and bool(mask_h.any())
        has_l = ab_l.shape[-2] > 0 and bool(mask_l.any())
        if has_h:
            ab_h = self.ab_h.enter(ab_h, mask_h)
        if has_l:
            ab_l = self.ab_l.enter(ab_l, mask_l)
        ag, ab_h, ab_l, maps = self.antigen_layer(
            ag, ab_h, ab_l, mask_ag, mask_h, mask_l, record_maps
        )
        if has_h:
            ab_h = self.ab_h.finish(ab_h, mask_h)
        if has_l:
            ab_l = self.ab_l.finish(ab_l, mask_l)
        return ag, ab_h, ab_l, maps
