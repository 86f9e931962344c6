"""Training pipeline: augmentation, anchor-centric batching, optimization.

All randomness is derived from (seed, epoch, batch) seed sequences, so a
run is reproducible and a checkpoint can resume mid-epoch by replaying
the batch schedule and skipping consumed batches.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageEnhance
from torch import Tensor

from .backbone import preprocess_arrays
from .classifier import Thresholds
from .losses import AnchorNeighborhood, Margins, alignment_loss, total_loss, triplet_loss
from .manifest import select_top_views
from .model import PairScorer, save_checkpoint
from .types import DatasetManifest, DoppelError, PairLabel, PairRecord

NEGATIVE_LABELS = (PairLabel.SIMILAR, PairLabel.DIFFERENT)


class EmptyDatasetError(DoppelError):
    """No identical anchor pairs to train on."""


class DivergenceError(DoppelError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class AugmentationFlags:
    rotation: bool = True
    hflip: bool = True
    color_jitter: bool = True
    crop: bool = True

    @classmethod
    def none(cls) -> "AugmentationFlags":
        return cls(False, False, False, False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    batch_pairs_max: int = 128
    k_views: int = 5
    seed: int = 0
    augmentations: AugmentationFlags = field(default_factory=AugmentationFlags)
    # Augmentation magnitudes (the named transforms come with no stated
    # strengths; these are artifact defaults).
    rotation_degrees: float = 30.0
    jitter_strength: float = 0.2
    crop_scale: tuple[float, float] = (0.8, 1.0)
    # Scale losses to per-anchor / per-pair means for batch-size-stable steps.
    normalize_losses: bool = True
    # View-count ablation: probability of dropping each non-top view.
    view_dropout: float = 0.0
    checkpoint_every: int = 0  # batches; 0 = only at epoch ends
    margins: Margins = field(default_factory=Margins)
    thresholds: Thresholds = field(default_factory=Thresholds)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_pairs_max < 2:
            raise ValueError("batch_pairs_max must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


# ---------------------------------------------------------------------------
# Augmentation


def rotate_pair(
    image: Image.Image, mask: Image.Image, angle: float
) -> tuple[Image.Image, Image.Image]:
    """Rotate image (bilinear) and mask (nearest) identically, zero fill."""
    return (
        image.rotate(angle, resample=Image.BILINEAR, fillcolor=(0, 0, 0)),
        mask.rotate(angle, resample=Image.NEAREST, fillcolor=0),
    )


def augment(
    image: Image.Image,
    mask: Image.Image,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Image.Image, Image.Image]:
    """Geometric transforms applied to image and mask alike; jitter to image only."""
    flags = cfg.augmentations
    if flags.rotation:
        angle = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
        image, mask = rotate_pair(image, mask, angle)
    if flags.crop:
        w, h = image.size
        area = float(rng.uniform(*cfg.crop_scale))
        side = max(1, int(round(np.sqrt(area) * min(w, h))))
        x0 = int(rng.integers(0, w - side + 1))
        y0 = int(rng.integers(0, h - side + 1))
        box = (x0, y0, x0 + side, y0 + side)
        image, mask = image.crop(box), mask.crop(box)
    if flags.hflip and rng.random() < 0.5:
        image = image.transpose(Image.FLIP_LEFT_RIGHT)
        mask = mask.transpose(Image.FLIP_LEFT_RIGHT)
    if flags.color_jitter:
        s = cfg.jitter_strength
        for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast,
                         ImageEnhance.Color):
            factor = float(rng.uniform(1.0 - s, 1.0 + s))
            image = enhancer(image).enhance(factor)
    return image, mask


# ---------------------------------------------------------------------------
# Batch sampling

BatchPair = tuple[str, PairRecord]  # (scene_id, record)


def _scene_negatives(scene_pairs, anchor_ids) -> list[PairRecord]:
    return [
        p
        for p in scene_pairs
        if p.label in NEGATIVE_LABELS and (set(p.key) & anchor_ids)
    ]


def _fill_batch(
    manifest: DatasetManifest,
    anchor_queue: list[BatchPair],
    cap: int,
    rng: np.random.Generator,
) -> list[BatchPair]:
    """Greedy anchor-centric batch: Id pairs plus their same-anchor negatives.

    Consumes anchors from the front of anchor_queue. Every Identical pair
    admitted to the batch gets at least one same-anchor negative when the
    scene offers one.
    """
    scenes = manifest.scene_map()
    batch: list[BatchPair] = []
    seen: set[tuple[str, tuple[str, str]]] = set()
    while anchor_queue:
        scene_id, pair = anchor_queue[0]
        negatives = _scene_negatives(scenes[scene_id].pairs, set(pair.key))
        fresh = [n for n in negatives if (scene_id, n.key) not in seen]
        has_neg_in_batch = any(
            (scene_id, n.key) in seen for n in negatives
        )
        needed = 1 if (has_neg_in_batch or not fresh) else 2
        if cap - len(batch) < needed:
            break
        anchor_queue.pop(0)
        batch.append((scene_id, pair))
        seen.add((scene_id, pair.key))
        order = rng.permutation(len(fresh))
        for i in order:
            if len(batch) >= cap:
                break
            batch.append((scene_id, fresh[i]))
            seen.add((scene_id, fresh[i].key))
    return batch


def sample_batch(
    manifest: DatasetManifest, cfg: TrainConfig, rng: np.random.Generator
) -> list[BatchPair]:
    """One anchor-centric batch of (scene_id, PairRecord), at most cap pairs."""
    anchors = [
        (s.scene_id, p)
        for s in manifest.scenes
        for p in s.pairs
        if p.label is PairLabel.IDENTICAL
    ]
    if not anchors:
        raise EmptyDatasetError("manifest holds no Identical pairs to anchor on")
    queue = [anchors[i] for i in rng.permutation(len(anchors))]
    return _fill_batch(manifest, queue, cfg.batch_pairs_max, rng)


# ---------------------------------------------------------------------------
# Training loop


class _CropCache:
    """Keeps decoded PIL crops in memory across epochs."""

    def __init__(self):
        self._images: dict = {}

    def get(self, view) -> tuple[Image.Image, Image.Image]:
        key = (view.image_ref, view.mask_ref)
        if key not in self._images:
            self._images[key] = (
                Image.open(view.image_ref).convert("RGB"),
                Image.open(view.mask_ref).convert("L"),
            )
        return self._images[key]


@dataclass
class TrainState:
    epoch: int
    step: int
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    checkpoint_path: Path | None = None


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1013, epoch]))


def _batch_rng(seed: int, epoch: int, batch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 2371, epoch, batch]))


def _epoch_batches(
    manifest: DatasetManifest, cfg: TrainConfig, epoch: int
) -> list[list[BatchPair]]:
    """Deterministic batch schedule covering all Identical anchors once."""
    rng = _epoch_rng(cfg.seed, epoch)
    anchors = [
        (s.scene_id, p)
        for s in manifest.scenes
        for p in s.pairs
        if p.label is PairLabel.IDENTICAL
    ]
    if not anchors:
        raise EmptyDatasetError("manifest holds no Identical pairs to anchor on")
    queue = [anchors[i] for i in rng.permutation(len(anchors))]
    batches = []
    while queue:
        batch = _fill_batch(manifest, queue, cfg.batch_pairs_max, rng)
        if not batch:
            raise RuntimeError("batch assembly stalled; cap below anchor closure")
        batches.append(batch)
    return batches


def _object_tokens_for_batch(
    model: PairScorer,
    manifest: DatasetManifest,
    batch: list[BatchPair],
    cfg: TrainConfig,
    rng: np.random.Generator,
    cache: _CropCache,
    train_mode: bool,
) -> dict[tuple[str, str], Tensor]:
    """Augment + preprocess + backbone for every object in the batch."""
    scenes = manifest.scene_map()
    wanted = sorted({(sid, oid) for sid, p in batch for oid in p.key})
    tokens: dict[tuple[str, str], Tensor] = {}
    for sid, oid in wanted:
        obj = scenes[sid].object_map()[oid]
        views = select_top_views(obj, cfg.k_views)
        if train_mode and cfg.view_dropout > 0.0 and len(views) > 1:
            keep = [views[0]] + [
                v for v in views[1:] if rng.random() >= cfg.view_dropout
            ]
            views = keep
        images = []
        for view in views:
            image, mask = cache.get(view)
            if train_mode:
                image, mask = augment(image, mask, cfg, rng)
            x, _ = preprocess_arrays(
                np.asarray(image), np.asarray(mask), model.backbone.cfg
            )
            images.append(x)
        tokens[(sid, oid)] = model.backbone(torch.stack(images))
    return tokens


def _batch_loss(
    model: PairScorer,
    batch: list[BatchPair],
    tokens: dict[tuple[str, str], Tensor],
    cfg: TrainConfig,
) -> tuple[Tensor, Tensor, Tensor]:
    """Score the batch and assemble triplet + alignment losses."""
    pair_tokens = [
        (tokens[(sid, p.object_a)], tokens[(sid, p.object_b)]) for sid, p in batch
    ]
    scores = model.score_token_pairs(pair_tokens)
    distances = 1.0 - scores

    by_object: dict[tuple[str, str], dict[PairLabel, list[Tensor]]] = {}
    anchor_objects: list[tuple[str, str]] = []
    for i, (sid, pair) in enumerate(batch):
        for oid in pair.key:
            slot = by_object.setdefault(
                (sid, oid), {label: [] for label in PairLabel}
            )
            slot[pair.label].append(distances[i])
        if pair.label is PairLabel.IDENTICAL:
            for oid in pair.key:
                if (sid, oid) not in anchor_objects:
                    anchor_objects.append((sid, oid))

    neighborhoods = []
    for key in anchor_objects:
        slot = by_object[key]
        neighborhoods.append(
            AnchorNeighborhood(
                anchor=key[1],
                d_id=torch.stack(slot[PairLabel.IDENTICAL]),
                d_sim=torch.stack(slot[PairLabel.SIMILAR])
                if slot[PairLabel.SIMILAR]
                else (),
                d_diff=torch.stack(slot[PairLabel.DIFFERENT])
                if slot[PairLabel.DIFFERENT]
                else (),
            )
        )
    trip = triplet_loss(neighborhoods, cfg.margins, normalize=cfg.normalize_losses)
    align = alignment_loss(
        [(p.label, scores[i]) for i, (_, p) in enumerate(batch)],
        t1=cfg.thresholds.t1,
        t2=cfg.thresholds.t2,
    )
    if cfg.normalize_losses:
        align = align / len(batch)
    return trip, align, total_loss(trip, align)


def _save_train_checkpoint(path, model, optimizer, epoch, batch_in_epoch, step):
    save_checkpoint(
        path,
        model,
        extra={
            "optimizer": optimizer.state_dict(),
            "epoch": epoch,
            "batch_in_epoch": batch_in_epoch,
            "step": step,
        },
    )


def train(
    manifest: DatasetManifest,
    model: PairScorer,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainState:
    """Optimize the model on a train manifest.

    Epoch = one pass over all annotated Identical pairs as anchors.
    Writes checkpoint.pt and loss_log.csv under out_dir when given.
    Raises DivergenceError if the loss goes non-finite; the last good
    checkpoint (if any) is kept on disk.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    start_epoch, start_batch, step = 0, 0, 0
    if resume_from is not None:
        payload = torch.load(resume_from, weights_only=True)
        model.load_state_dict(payload["state_dict"], strict=False)
        optimizer.load_state_dict(payload["extra"]["optimizer"])
        start_epoch = payload["extra"]["epoch"]
        start_batch = payload["extra"]["batch_in_epoch"]
        step = payload["extra"]["step"]

    cache = _CropCache()
    state = TrainState(epoch=start_epoch, step=step)
    ckpt_path = out_dir / "checkpoint.pt" if out_dir is not None else None
    log_path = out_dir / "loss_log.csv" if out_dir is not None else None
    log_fh = None
    if log_path is not None:
        fresh = not log_path.exists() or resume_from is None
        log_fh = open(log_path, "w" if fresh else "a", newline="")
        log = csv.writer(log_fh)
        if fresh:
            log.writerow(["step", "triplet", "align", "total"])

    model.train()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            batches = _epoch_batches(manifest, cfg, epoch)
            first = start_batch if epoch == start_epoch else 0
            for b_idx in range(first, len(batches)):
                rng = _batch_rng(cfg.seed, epoch, b_idx)
                batch = batches[b_idx]
                tokens = _object_tokens_for_batch(
                    model, manifest, batch, cfg, rng, cache, train_mode=True
                )
                trip, align, loss = _batch_loss(model, batch, tokens, cfg)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at step {step}; last good checkpoint: "
                        f"{state.checkpoint_path}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                state.step = step
                row = (
                    step,
                    float(trip.detach()),
                    float(align.detach()),
                    float(loss.detach()),
                )
                state.history.append(row)
                if log_fh is not None:
                    log.writerow(list(row))
                if (
                    ckpt_path is not None
                    and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0
                ):
                    _save_train_checkpoint(
                        ckpt_path, model, optimizer, epoch, b_idx + 1, step
                    )
                    state.checkpoint_path = ckpt_path
            state.epoch = epoch + 1
            if ckpt_path is not None:
                _save_train_checkpoint(
                    ckpt_path, model, optimizer, epoch + 1, 0, step
                )
                state.checkpoint_path = ckpt_path
    finally:
        if log_fh is not None:
            log_fh.close()
    return state
