"""Pair scorer: backbone + encoder glued together, plus checkpoint I/O."""

from __future__ import annotations

import os
import warnings
from dataclasses import asdict
from pathlib import Path

import torch
from torch import Tensor, nn

from .backbone import (
    Backbone,
    BackboneConfig,
    build_backbone,
    preprocess,
)
from .encoder import (
    EncoderConfig,
    PairEncoder,
    SimilarityResult,
    similarity_score,
)
from .manifest import select_top_views
from .types import ObjectInstance, canonical_pair

CHECKPOINT_FORMAT = "doppel-checkpoint-1"


class PairScorer(nn.Module):
    """Backbone feature extraction followed by the pair encoder."""

    def __init__(self, backbone: Backbone, encoder: PairEncoder):
        super().__init__()
        if backbone.cfg.output_dim != encoder.cfg.input_dim:
            raise ValueError(
                f"backbone output_dim {backbone.cfg.output_dim} != encoder "
                f"input_dim {encoder.cfg.input_dim}"
            )
        self.backbone = backbone
        self.encoder = encoder

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.backbone.grid_shape

    def object_tokens(self, obj: ObjectInstance, k: int) -> Tensor:
        """Backbone tokens for the top-k views of one object, (V, N_p, D)."""
        views = select_top_views(obj, k)
        images = torch.stack(
            [preprocess(v, self.backbone.cfg)[0] for v in views]
        )
        return self.backbone(images)

    def score_tokens(self, tokens_a: Tensor, tokens_b: Tensor) -> Tensor:
        """Score one pair from per-view token tensors (V, N_p, D)."""
        pairs = [((tokens_a, tokens_b))]
        return self.score_token_pairs(pairs)[0]

    def score_token_pairs(self, pairs: list[tuple[Tensor, Tensor]]) -> Tensor:
        """Batched scoring of (tokens_a, tokens_b) pairs; returns (B,) scores.

        Pads every object to the largest view count in the batch; the
        encoder's view mask keeps padded slots out of attention keys and
        out of the aggregation mean.
        """
        k = max(max(a.shape[0], b.shape[0]) for a, b in pairs)
        b_n = len(pairs)
        n_p, d = pairs[0][0].shape[1], pairs[0][0].shape[2]
        tokens = pairs[0][0].new_zeros((b_n, 2, k, n_p, d))
        mask = torch.zeros((b_n, 2, k), dtype=torch.bool)
        for i, (ta, tb) in enumerate(pairs):
            tokens[i, 0, : ta.shape[0]] = ta
            tokens[i, 1, : tb.shape[0]] = tb
            mask[i, 0, : ta.shape[0]] = True
            mask[i, 1, : tb.shape[0]] = True
        emb = self.encoder(tokens, mask, self.grid_shape)
        return similarity_score(emb[:, 0], emb[:, 1])


def score_pair(
    a: ObjectInstance, b: ObjectInstance, model: PairScorer, k: int = 5
) -> SimilarityResult:
    """Score one object pair end to end (single-view inference via k=1).

    Objects are fed in canonical order (smaller object_id first) so the
    result is reproducible even with order-sensitive object embeddings;
    the encoder's symmetrize flag averages both orders instead.
    """
    if a.semantic_class != b.semantic_class:
        warnings.warn(
            f"scoring cross-class pair ({a.object_id}, {b.object_id}): "
            f"{a.semantic_class!r} vs {b.semantic_class!r}"
        )
    first, second = (a, b) if a.object_id <= b.object_id else (b, a)
    model.eval()
    with torch.no_grad():
        ta = model.object_tokens(first, k)
        tb = model.object_tokens(second, k)
        s = float(model.score_tokens(ta, tb))
        if model.encoder.cfg.symmetrize:
            s = 0.5 * (s + float(model.score_tokens(tb, ta)))
    return SimilarityResult.from_score(
        s, canonical_pair(a.object_id, b.object_id)
    )


def build_model(
    backbone_cfg: BackboneConfig,
    encoder_cfg: EncoderConfig,
    vit: nn.Module | None = None,
    seed: int | None = None,
) -> PairScorer:
    if seed is not None:
        torch.manual_seed(seed)
    backbone = build_backbone(backbone_cfg, vit=vit)
    return PairScorer(backbone, PairEncoder(encoder_cfg))


def atomic_torch_save(obj, path: str | os.PathLike) -> None:
    """Write-temp-then-rename so a crash never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    path: str | os.PathLike, model: PairScorer, extra: dict | None = None
) -> None:
    """Self-describing checkpoint: configs, parameters, format version.

    Frozen foundation weights are not stored; they are re-fetched (or
    injected) when loading.
    """
    state = {
        k: v
        for k, v in model.state_dict().items()
        if not k.startswith("backbone.vit.")
    }
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "backbone_config": asdict(model.backbone.cfg),
        "encoder_config": asdict(model.encoder.cfg),
        "state_dict": state,
        "extra": extra or {},
    }
    atomic_torch_save(payload, path)


def _coerce_backbone_config(doc: dict) -> BackboneConfig:
    doc = dict(doc)
    doc["intermediate_layers"] = tuple(doc["intermediate_layers"])
    for key in ("pixel_mean", "pixel_std"):
        if doc.get(key) is not None:
            doc[key] = tuple(doc[key])
    return BackboneConfig(**doc)


def load_checkpoint(
    path: str | os.PathLike, vit: nn.Module | None = None
) -> tuple[PairScorer, dict]:
    """Rebuild a PairScorer from a checkpoint; returns (model, extra)."""
    payload = torch.load(path, weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"unsupported checkpoint format {payload.get('format_version')!r}"
        )
    backbone_cfg = _coerce_backbone_config(payload["backbone_config"])
    encoder_cfg = EncoderConfig(**payload["encoder_config"])
    model = PairScorer(
        build_backbone(backbone_cfg, vit=vit), PairEncoder(encoder_cfg)
    )
    missing, unexpected = model.load_state_dict(
        payload["state_dict"], strict=False
    )
    stray = [k for k in missing if not k.startswith("backbone.vit.")]
    if stray or unexpected:
        raise ValueError(
            f"checkpoint mismatch: missing {stray}, unexpected {unexpected}"
        )
    return model, payload["extra"]
