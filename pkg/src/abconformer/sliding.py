"""Sliding attention: feature/spatial attention, dual normalization, and the
iterative embedding/position updates between a sliding and a reference chain.

All operations accept either unbatched tensors (m x d, n x d, m x n) or
batched ones with a leading batch dimension; the sliding chain has learnable
real positions P while the reference chain keeps fixed integer positions Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .core import Config, DataError


class SlidingParams(nn.Module):
    """Four bias-free d x d projections: score maps for the two chains and
    value maps for the two update directions.

    Bias-free is load-bearing: a zero reference chain must contribute an
    exactly zero value path so the sliding update degenerates to identity.
    """

    def __init__(self, d: int):
        super().__init__()
        self.e_s = nn.Parameter(torch.empty(d, d))
        self.e_r = nn.Parameter(torch.empty(d, d))
        self.e_x = nn.Parameter(torch.empty(d, d))
        self.e_y = nn.Parameter(torch.empty(d, d))
        bound = 1.0 / math.sqrt(d)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)


@dataclass
class SlidingState:
    """State evolved by one sliding pass.

    X: sliding embeddings (..., m, d); Y: reference embeddings (..., n, d);
    P: sliding positions (..., m); Q: reference positions (..., n);
    M: pairwise validity mask (..., m, n); h: bandwidth (scalar or (...,));
    t: step index.
    """

    X: Tensor
    Y: Tensor
    P: Tensor
    Q: Tensor
    M: Tensor
    h: Tensor
    t: int = 0


@dataclass
class StepMaps:
    """Attention matrices and position snapshot recorded after one step."""

    A: Tensor
    S: Tensor
    W_hat: Tensor
    W_tilde: Tensor
    P: Tensor  # positions after this step's update


@dataclass
class AttentionMaps:
    """Per-step map history of one sliding pass."""

    p0: Tensor
    bandwidth: Tensor
    steps: list[StepMaps] = field(default_factory=list)

    @property
    def final(self) -> StepMaps:
        return self.steps[-1]


def compute_bandwidth(mask: Tensor, config: Config) -> Tensor:
    """Gaussian kernel bandwidth from the reference chain's valid length.

    h = clamp(n_valid / scale, min_bw, max_bw), where n_valid counts reference
    positions with at least one valid pair in the mask.
    """
    mask = mask.bool()
    n_valid = mask.any(dim=-2).sum(dim=-1)
    if (n_valid == 0).all():
        raise DataError("all reference positions are masked", module="sliding")
    h = torch.clamp(n_valid.double() / config.scale, min=config.min_bw, max=config.max_bw)
    return h


def feature_attention(x: Tensor, y: Tensor, e_s: Tensor, e_r: Tensor) -> Tensor:
    """Row-max-shifted exponential of scaled dot-product scores.

    Every row's maximum entry is exactly 1 and all entries lie in (0, 1].
    """
    return _feature_attention(x, y, e_s, e_r, mask=None)


def _feature_attention(x: Tensor, y: Tensor, e_s: Tensor, e_r: Tensor, mask: Tensor | None) -> Tensor:
    d = x.shape[-1]
    if y.shape[-1] != d or e_s.shape != (d, d) or e_r.shape != (d, d):
        raise DataError("feature attention shape mismatch", module="sliding")
    scores = (x @ e_s) @ (y @ e_r).transpose(-1, -2) / math.sqrt(d)
    if mask is None:
        shift = scores.amax(dim=-1, keepdim=True)
        return torch.exp(scores - shift)
    # Row max over valid columns only, so padded content never shifts a row;
    # masked entries become exactly 0 instead of exp of an unshifted score,
    # which could overflow. Rows with no valid column fall back to zero shift.
    masked = scores.masked_fill(~mask.bool(), float("-inf"))
    shift = masked.amax(dim=-1, keepdim=True)
    shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    return torch.exp(masked - shift)


def spatial_attention(p: Tensor, q: Tensor, h: Tensor | float) -> Tensor:
    """Gaussian kernel over position differences: exp(-(p_i - q_j)^2 / (2 h^2))."""
    if not isinstance(h, Tensor):
        h = torch.as_tensor(h, dtype=p.dtype)
    if (h <= 0).any():
        raise DataError("bandwidth must be positive", module="sliding")
    diff = p.unsqueeze(-1) - q.unsqueeze(-2)
    hh = h.to(p.dtype).unsqueeze(-1).unsqueeze(-1)
    return torch.exp(-(diff * diff) / (2.0 * hh * hh))


def weighted_attention(
    a: Tensor, s: Tensor, mask: Tensor, epsilon: float
) -> tuple[Tensor, Tensor, Tensor]:
    """Masked Hadamard product of feature and spatial attention plus its
    row-wise and column-wise normalizations."""
    if a.shape != s.shape or a.shape != mask.shape:
        raise DataError("weighted attention shape mismatch", module="sliding")
    w = mask.to(a.dtype) * a * s
    w_hat = w / (w.sum(dim=-1, keepdim=True) + epsilon)
    w_tilde = w / (w.sum(dim=-2, keepdim=True) + epsilon)
    return w, w_hat, w_tilde


def init_positions(mask: Tensor, dtype: torch.dtype = torch.float64) -> Tensor:
    """Spread initial sliding positions uniformly over the reference span.

    p_i = i * (n_valid - 1) / (m_valid - 1) for valid i; a single valid
    sliding position starts at the span midpoint; padded entries are 0.
    """
    mask = mask.bool()
    row_valid = mask.any(dim=-1)
    m_valid = row_valid.sum(dim=-1, keepdim=True).to(dtype)
    n_valid = mask.any(dim=-2).sum(dim=-1, keepdim=True).to(dtype)
    m = mask.shape[-2]
    idx = torch.arange(m, dtype=dtype, device=mask.device)
    idx = idx.expand(mask.shape[:-2] + (m,))
    span = n_valid - 1.0
    step = span / torch.clamp(m_valid - 1.0, min=1.0)
    p = torch.where(m_valid > 1.0, idx * step, span / 2.0 * torch.ones_like(idx))
    return p * row_valid.to(dtype)


def sliding_step(
    state: SlidingState, params: SlidingParams, epsilon: float = 1e-9
) -> tuple[SlidingState, StepMaps]:
    """One iteration: attention, embedding updates, position update.

    Both right-hand sides use the pre-update X and Y; the bandwidth is fixed
    for the whole pass and only t advances.
    """
    a = _feature_attention(state.X, state.Y, params.e_s, params.e_r, state.M)
    s = spatial_attention(state.P, state.Q, state.h)
    _, w_hat, w_tilde = weighted_attention(a, s, state.M, epsilon)

    x_new = w_hat @ (state.Y @ params.e_y) + state.X
    y_new = w_tilde.transpose(-1, -2) @ (state.X @ params.e_x) + state.Y
    p_new = (w_hat @ state.Q.to(w_hat.dtype).unsqueeze(-1)).squeeze(-1)

    new_state = SlidingState(
        X=x_new, Y=y_new, P=p_new, Q=state.Q, M=state.M, h=state.h, t=state.t + 1
    )
    maps = StepMaps(
        A=a.detach(),
        S=s.detach(),
        W_hat=w_hat.detach(),
        W_tilde=w_tilde.detach(),
        P=p_new.detach(),
    )
    return new_state, maps


def run_sliding(
    x0: Tensor,
    y0: Tensor,
    q: Tensor,
    mask: Tensor,
    params: SlidingParams,
    config: Config,
    p0: Tensor | None = None,
    record_maps: bool = True,
) -> tuple[Tensor, Tensor, AttentionMaps | None]:
    """Run the full sliding pass for config.sliding_step iterations.

    The bandwidth is computed once from the mask before the loop. Returns the
    final sliding/reference embeddings and, if requested, the per-step maps.
    """
    if config.sliding_step < 1:
        raise DataError("sliding_step must be >= 1", module="sliding")
    h = compute_bandwidth(mask, config).to(x0.dtype)
    if p0 is None:
        p0 = init_positions(mask, dtype=x0.dtype)
    state = SlidingState(X=x0, Y=y0, P=p0, Q=q, M=mask, h=h, t=0)
    maps = AttentionMaps(p0=p0.detach(), bandwidth=h.detach()) if record_maps else None
    for _ in range(config.sliding_step):
        state, step_maps = sliding_step(state, params, epsilon=config.epsilon)
        if maps is not None:
            maps.steps.append(step_maps)
    return state.X, state.Y, maps
