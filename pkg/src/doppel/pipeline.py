"""End-to-end prediction and evaluation plumbing over manifests."""

from __future__ import annotations

import itertools
import json
from pathlib import Path

import numpy as np
import torch

from .classifier import SceneGrouping, Thresholds, group_scene, prediction_doc
from .encoder import SimilarityResult
from .evaluator import (
    IoUReport,
    PairConfusion,
    aggregate_confusions,
    associate_instances,
    confusion_from_labels,
    iou_from_confusion,
    pair_iou,
    project_predictions,
)
from .model import PairScorer
from .types import (
    DatasetManifest,
    PairLabel,
    SceneManifest,
    canonical_pair,
)


def enumerate_intra_class_pairs(scene: SceneManifest) -> list[tuple[str, str]]:
    """All unordered same-class object pairs of a scene, sorted."""
    pairs = []
    for a, b in itertools.combinations(sorted(scene.objects, key=lambda o: o.object_id), 2):
        if a.semantic_class == b.semantic_class:
            pairs.append(canonical_pair(a.object_id, b.object_id))
    return sorted(pairs)


def predict_scene(
    model: PairScorer,
    scene: SceneManifest,
    k: int = 5,
    thresholds: Thresholds = Thresholds(),
    chunk: int = 64,
) -> tuple[list[SimilarityResult], SceneGrouping, dict]:
    """Score every intra-class pair of a scene and group the results.

    Object tokens are extracted once per object; pairs are scored in
    batches. Pairs are fed in canonical order for reproducibility.
    """
    model.eval()
    keys = enumerate_intra_class_pairs(scene)
    objects = scene.object_map()
    results: list[SimilarityResult] = []
    with torch.no_grad():
        tokens = {}
        for oid in sorted({oid for key in keys for oid in key}):
            tokens[oid] = model.object_tokens(objects[oid], k)
        for start in range(0, len(keys), chunk):
            block = keys[start : start + chunk]
            pair_tokens = [(tokens[a], tokens[b]) for a, b in block]
            scores = model.score_token_pairs(pair_tokens)
            if model.encoder.cfg.symmetrize:
                flipped = model.score_token_pairs(
                    [(tb, ta) for ta, tb in pair_tokens]
                )
                scores = 0.5 * (scores + flipped)
            results.extend(
                SimilarityResult.from_score(float(s), key)
                for key, s in zip(block, scores)
            )
    grouping = group_scene(results, thresholds)
    return results, grouping, prediction_doc(scene.scene_id, results, grouping, thresholds)


def predict_manifest(
    model: PairScorer,
    manifest: DatasetManifest,
    out_dir: str | Path,
    k: int = 5,
    thresholds: Thresholds = Thresholds(),
) -> list[Path]:
    """Write one prediction document per scene; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for scene in manifest.scenes:
        _, _, doc = predict_scene(model, scene, k=k, thresholds=thresholds)
        path = out_dir / f"{scene.scene_id}.json"
        path.write_text(json.dumps(doc, indent=2) + "\n")
        written.append(path)
    return written


def gt_pair_labels(scene: SceneManifest) -> dict[tuple[str, str], PairLabel]:
    """Annotated (non-synthetic) pair labels of a scene."""
    return {p.key: p.label for p in scene.pairs if not p.synthetic}


def load_prediction_labels(path: str | Path) -> dict[tuple[str, str], PairLabel]:
    doc = json.loads(Path(path).read_text())
    return {
        canonical_pair(p["a"], p["b"]): PairLabel(p["label"]) for p in doc["pairs"]
    }


def evaluate_gt_instances(
    manifest: DatasetManifest, pred_dir: str | Path, per_scene: bool = False
) -> dict[str, IoUReport]:
    """IoU of per-scene prediction documents against manifest labels.

    Returns {"aggregate": report} plus per-scene reports when requested;
    pairs are pooled across scenes for the aggregate (micro counts).
    """
    pred_dir = Path(pred_dir)
    confusions: list[PairConfusion] = []
    reports: dict[str, IoUReport] = {}
    for scene in manifest.scenes:
        gt = gt_pair_labels(scene)
        pred = load_prediction_labels(pred_dir / f"{scene.scene_id}.json")
        confusion = confusion_from_labels(gt, pred)
        confusions.append(confusion)
        if per_scene:
            reports[scene.scene_id] = iou_from_confusion(confusion)
    reports["aggregate"] = iou_from_confusion(aggregate_confusions(confusions))
    return reports


def evaluate_with_overlaps(
    manifest: DatasetManifest,
    pred_dir: str | Path,
    overlaps_doc: dict,
    threshold: float = 0.5,
    per_scene: bool = False,
) -> dict[str, IoUReport]:
    """Predicted-instance protocol: associate instances, then unknown-aware IoU.

    overlaps_doc: {"scenes": [{"scene_id", "pred_ids", "gt_ids", "overlaps"}]}
    with overlaps[i][j] the mask IoU of pred_ids[i] against gt_ids[j].
    """
    pred_dir = Path(pred_dir)
    by_scene = {s["scene_id"]: s for s in overlaps_doc["scenes"]}
    reports: dict[str, IoUReport] = {}
    pooled_gt: dict = {}
    pooled_pred: dict = {}
    for scene in manifest.scenes:
        entry = by_scene[scene.scene_id]
        association = associate_instances(
            np.asarray(entry["overlaps"], dtype=float), threshold=threshold
        )
        gt_to_pred = {
            entry["gt_ids"][g]: entry["pred_ids"][p]
            for p, g in association.pred_to_gt.items()
        }
        gt = gt_pair_labels(scene)
        pred = load_prediction_labels(pred_dir / f"{scene.scene_id}.json")
        projected = project_predictions(gt, pred, gt_to_pred)
        if per_scene:
            reports[scene.scene_id] = pair_iou(gt, projected)
        for key, value in gt.items():
            pooled_gt[(scene.scene_id, key)] = value
            pooled_pred[(scene.scene_id, key)] = projected[key]
    reports["aggregate"] = pair_iou(pooled_gt, pooled_pred)
    return reports
