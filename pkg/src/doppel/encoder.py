"""Alternating-attention pair encoder.

Patch tokens from both objects' views pass through repeated blocks of
three self-attention stages: single-view (tokens of one crop), multiview
(all tokens of one object), and global (all tokens of both objects).
Learned frame/object embeddings and fixed cosine positional embeddings
are added to the tokens before every stage. Final-layer tokens are
averaged across an object's real views (padding excluded), flattened,
and unit-normalized; similarity is the clamped dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import PatchFeatureTensor, ShapeError
from .types import DoppelError


class ViewCountError(DoppelError):
    """A view list is empty or exceeds the configured maximum."""


class DimMismatchError(DoppelError):
    """Embeddings or tokens disagree in dimensionality."""


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 1
    embed_dim: int = 256
    n_heads: int = 8
    max_views: int = 5
    use_frame_embeddings: bool = True
    use_object_embeddings: bool = True
    input_dim: int = 384
    mlp_ratio: float = 4.0
    # Average scores over both feed orders instead of canonical ordering.
    symmetrize: bool = False
    # Bypass attention and embeddings; tokens go straight to aggregation.
    diagnostic_identity: bool = False

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 (2D positional code)")
        if self.max_views < 1:
            raise ValueError("max_views must be >= 1")


@dataclass
class ObjectEmbedding:
    """Flattened, unit-normalized aggregated patch features of one object."""

    features: Tensor

    def __post_init__(self):
        norm = float(self.features.norm())
        if abs(norm - 1.0) > 1e-5:
            raise DimMismatchError(f"embedding norm {norm} is not 1 within 1e-5")


@dataclass(frozen=True)
class SimilarityResult:
    """Similarity score and derived distance for one pair."""

    score: float
    distance: float
    pair: tuple[str, str]

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.distance != 1.0 - self.score:
            raise ValueError("distance must equal 1 - score exactly")

    @classmethod
    def from_score(cls, score: float, pair: tuple[str, str]) -> "SimilarityResult":
        score = float(min(1.0, max(0.0, score)))
        return cls(score, 1.0 - score, pair)


def cosine_position_embedding(grid_shape: tuple[int, int], dim: int) -> Tensor:
    """Fixed 2D sine/cosine positional code, (rows*cols, dim)."""
    rows, cols = grid_shape
    half = dim // 2
    yy = torch.arange(rows, dtype=torch.float32).repeat_interleave(cols)
    xx = torch.arange(cols, dtype=torch.float32).repeat(rows)

    def axis_code(pos: Tensor, width: int) -> Tensor:
        quarter = width // 2
        freq = torch.exp(
            -math.log(10000.0) * torch.arange(quarter, dtype=torch.float32) / quarter
        )
        args = pos[:, None] * freq[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    return torch.cat([axis_code(yy, half), axis_code(xx, dim - half)], dim=1)


class AttentionLayer(nn.Module):
    """Pre-norm self-attention + MLP with residuals."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + attn_out
        return x + self.mlp(self.norm2(x))


class AlternatingBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.frame = AttentionLayer(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio)
        self.object = AttentionLayer(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio)
        self.global_ = AttentionLayer(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio)


class PairEncoder(nn.Module):
    """Encodes the views of an object pair into two comparable embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(cfg.input_dim, cfg.embed_dim)
        self.frame_embed = nn.Parameter(
            torch.randn(cfg.max_views, cfg.embed_dim) * 0.02
        )
        self.object_embed = nn.Parameter(torch.randn(2, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            AlternatingBlock(cfg) for _ in range(cfg.n_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self._pos_cache: dict[tuple[int, int], Tensor] = {}

    def _positions(self, grid_shape: tuple[int, int]) -> Tensor:
        if grid_shape not in self._pos_cache:
            self._pos_cache[grid_shape] = cosine_position_embedding(
                grid_shape, self.cfg.embed_dim
            )
        return self._pos_cache[grid_shape]

    def _stage_bias(self, grid_shape, k) -> Tensor:
        """Embeddings re-added before each stage: positional + frame + object."""
        e = self.cfg.embed_dim
        bias = self._positions(grid_shape).view(1, 1, 1, -1, e)
        if self.cfg.use_frame_embeddings:
            bias = bias + self.frame_embed[:k].view(1, 1, k, 1, e)
        if self.cfg.use_object_embeddings:
            bias = bias + self.object_embed.view(1, 2, 1, 1, e)
        return bias

    def forward(
        self,
        tokens: Tensor,
        view_mask: Tensor,
        grid_shape: tuple[int, int],
    ) -> Tensor:
        """Encode padded pair batches.

        tokens: (B, 2, K, N_p, input_dim); view_mask: (B, 2, K) with True
        marking real views (>=1 per object). Returns unit-normalized
        embeddings (B, 2, N_p * embed_dim).
        """
        if tokens.ndim != 5 or tokens.shape[1] != 2:
            raise ShapeError(f"expected (B, 2, K, N_p, D), got {tuple(tokens.shape)}")
        if tokens.shape[-1] != self.cfg.input_dim:
            raise ShapeError(
                f"token dim {tokens.shape[-1]} != input_dim {self.cfg.input_dim}"
            )
        b, _, k, n_p, _ = tokens.shape
        if k > self.cfg.max_views:
            raise ViewCountError(f"{k} view slots exceed max_views {self.cfg.max_views}")
        counts = view_mask.sum(dim=2)
        if (counts < 1).any():
            raise ViewCountError("every object needs at least one real view")

        x = self.in_proj(tokens)
        e = self.cfg.embed_dim
        if not self.cfg.diagnostic_identity:
            bias = self._stage_bias(grid_shape, k)
            pad_keys = ~view_mask  # True where padded
            for block in self.blocks:
                x = x + bias
                x = block.frame(x.reshape(b * 2 * k, n_p, e)).view(b, 2, k, n_p, e)
                x = x + bias
                kpm = pad_keys.reshape(b * 2, k).repeat_interleave(n_p, dim=1)
                x = block.object(x.reshape(b * 2, k * n_p, e), kpm)
                x = x.view(b, 2, k, n_p, e)
                x = x + bias
                kpm = pad_keys.reshape(b, 2 * k).repeat_interleave(n_p, dim=1)
                x = block.global_(x.reshape(b, 2 * k * n_p, e), kpm)
                x = x.view(b, 2, k, n_p, e)
            x = self.final_norm(x)

        weights = view_mask.to(x.dtype)[:, :, :, None, None]
        pooled = (x * weights).sum(dim=2) / weights.sum(dim=2)  # (B, 2, N_p, E)
        return F.normalize(pooled.flatten(2), dim=-1)


def _stack_views(views: list[PatchFeatureTensor], k: int) -> tuple[Tensor, Tensor]:
    grids = {v.grid_shape for v in views}
    dims = {v.feature_dim for v in views}
    if len(grids) != 1 or len(dims) != 1:
        raise ShapeError(f"views disagree in grid {grids} or feature dim {dims}")
    stacked = torch.stack([v.patches for v in views])
    n, d = stacked.shape[1], stacked.shape[2]
    padded = stacked.new_zeros((k, n, d))
    padded[: len(views)] = stacked
    mask = torch.zeros(k, dtype=torch.bool)
    mask[: len(views)] = True
    return padded, mask


def encode_pair(
    views_a: list[PatchFeatureTensor],
    views_b: list[PatchFeatureTensor],
    encoder: PairEncoder,
) -> tuple[ObjectEmbedding, ObjectEmbedding]:
    """Encode one pair given per-view patch features."""
    cfg = encoder.cfg
    for views in (views_a, views_b):
        if not views:
            raise ViewCountError("view list is empty")
        if len(views) > cfg.max_views:
            raise ViewCountError(
                f"{len(views)} views exceed max_views {cfg.max_views}"
            )
    k = max(len(views_a), len(views_b))
    ta, ma = _stack_views(views_a, k)
    tb, mb = _stack_views(views_b, k)
    if views_a[0].grid_shape != views_b[0].grid_shape:
        raise ShapeError("objects disagree in patch grid")
    tokens = torch.stack([ta, tb]).unsqueeze(0)
    mask = torch.stack([ma, mb]).unsqueeze(0)
    out = encoder(tokens, mask, views_a[0].grid_shape)
    return ObjectEmbedding(out[0, 0]), ObjectEmbedding(out[0, 1])


def similarity_score(fa: Tensor, fb: Tensor) -> Tensor:
    """Differentiable clamped dot product of two embedding tensors."""
    if fa.shape != fb.shape:
        raise DimMismatchError(f"embedding shapes differ: {fa.shape} vs {fb.shape}")
    return torch.clamp((fa * fb).sum(-1), 0.0, 1.0)


def similarity(
    ea: ObjectEmbedding, eb: ObjectEmbedding, pair: tuple[str, str] = ("a", "b")
) -> SimilarityResult:
    """Similarity score s in [0, 1] and distance d = 1 - s for one pair."""
    s = similarity_score(ea.features, eb.features)
    return SimilarityResult.from_score(float(s), pair)
