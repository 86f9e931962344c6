"""Dataset manifest loading, validation, saving, and pair completion.

The on-disk manifest is a single JSON document with crop/mask paths
relative to the manifest file, so datasets stay portable and diffable:

    {"split": "train",
     "scenes": [{"scene_id": ...,
                 "objects": [{"object_id", "semantic_class",
                              "views": [{"image", "mask", "visibility",
                                         "source_frame_id"}]}],
                 "pairs": [{"a", "b", "label", "similarity_types",
                            "synthetic"}]}]}
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .types import (
    DatasetManifest,
    InvariantError,
    MissingFileError,
    ObjectInstance,
    PairLabel,
    PairRecord,
    SceneManifest,
    SchemaError,
    SimilarityType,
    ViewCrop,
    canonical_pair,
    view_sort_key,
)

SPLITS = ("train", "val")


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise SchemaError(f"missing field {key!r} in {where}")
    return doc[key]


def _parse_view(doc: dict, base: Path, where: str) -> ViewCrop:
    if not isinstance(doc, dict):
        raise SchemaError(f"view entry in {where} is not an object")
    image = base / _require(doc, "image", where)
    mask = base / _require(doc, "mask", where)
    visibility = _require(doc, "visibility", where)
    if not isinstance(visibility, (int, float)) or isinstance(visibility, bool):
        raise SchemaError(f"visibility in {where} is not a number")
    frame = str(_require(doc, "source_frame_id", where))
    for p in (image, mask):
        if not p.is_file():
            raise MissingFileError(f"{where}: referenced file {p} does not exist")
    return ViewCrop(image.resolve(), mask.resolve(), float(visibility), frame)


def _parse_object(doc: dict, base: Path, scene_id: str) -> ObjectInstance:
    oid = str(_require(doc, "object_id", f"object in scene {scene_id!r}"))
    where = f"object {oid!r} in scene {scene_id!r}"
    cls = str(_require(doc, "semantic_class", where))
    views_doc = _require(doc, "views", where)
    if not isinstance(views_doc, list) or not views_doc:
        raise SchemaError(f"{where}: views must be a non-empty list")
    views = sorted(
        (_parse_view(v, base, where) for v in views_doc), key=view_sort_key
    )
    return ObjectInstance(oid, cls, tuple(views))


def _parse_pair(doc: dict, scene_id: str) -> PairRecord:
    where = f"pair in scene {scene_id!r}"
    a = str(_require(doc, "a", where))
    b = str(_require(doc, "b", where))
    label = PairLabel.from_str(str(_require(doc, "label", where)))
    types = frozenset(
        SimilarityType.from_str(t) for t in doc.get("similarity_types", [])
    )
    synthetic = bool(doc.get("synthetic", False))
    try:
        return PairRecord(*canonical_pair(a, b), label, types, synthetic)
    except InvariantError as e:
        raise InvariantError(f"scene {scene_id!r}: {e}") from None


def validate_scene(scene: SceneManifest) -> None:
    """Check pair/object cross-references and pair invariants for one scene."""
    objects = scene.object_map()
    if len(objects) != len(scene.objects):
        dupes = [o.object_id for o in scene.objects]
        raise InvariantError(
            f"scene {scene.scene_id!r}: duplicate object ids "
            f"{sorted(set(x for x in dupes if dupes.count(x) > 1))}"
        )
    seen: set[tuple[str, str]] = set()
    for pair in scene.pairs:
        name = f"pair ({pair.object_a}, {pair.object_b})"
        for oid in pair.key:
            if oid not in objects:
                raise InvariantError(
                    f"scene {scene.scene_id!r}: {name} references unknown object {oid!r}"
                )
        if pair.key in seen:
            raise InvariantError(f"scene {scene.scene_id!r}: duplicate {name}")
        seen.add(pair.key)
        cls_a = objects[pair.object_a].semantic_class
        cls_b = objects[pair.object_b].semantic_class
        # Synthetic negatives are sampled across classes by construction.
        if cls_a != cls_b and not pair.synthetic:
            raise InvariantError(
                f"scene {scene.scene_id!r}: cross-class pair {name} "
                f"({cls_a!r} vs {cls_b!r})"
            )


def validate_manifest(manifest: DatasetManifest) -> None:
    if manifest.split not in SPLITS:
        raise SchemaError(f"split must be one of {SPLITS}, got {manifest.split!r}")
    ids = [s.scene_id for s in manifest.scenes]
    if len(set(ids)) != len(ids):
        raise InvariantError("duplicate scene_ids in manifest")
    for scene in manifest.scenes:
        validate_scene(scene)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Load and validate a manifest document.

    Crop/mask paths are resolved relative to the manifest file and must
    exist. Views are re-sorted by descending visibility on ingestion.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"manifest {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError("manifest root must be an object")
    base = path.parent
    split = str(_require(doc, "split", "manifest root"))
    scenes = []
    for scene_doc in _require(doc, "scenes", "manifest root"):
        scene_id = str(_require(scene_doc, "scene_id", "scene entry"))
        objects = tuple(
            _parse_object(o, base, scene_id)
            for o in _require(scene_doc, "objects", f"scene {scene_id!r}")
        )
        pairs = tuple(
            _parse_pair(p, scene_id)
            for p in _require(scene_doc, "pairs", f"scene {scene_id!r}")
        )
        scenes.append(SceneManifest(scene_id, objects, pairs))
    manifest = DatasetManifest(split, tuple(scenes))
    validate_manifest(manifest)
    return manifest


def manifest_to_doc(manifest: DatasetManifest, base: Path) -> dict:
    """Serialize with paths relative to base (the manifest's directory)."""

    def rel(p: Path) -> str:
        return os.path.relpath(p, base)

    return {
        "split": manifest.split,
        "scenes": [
            {
                "scene_id": s.scene_id,
                "objects": [
                    {
                        "object_id": o.object_id,
                        "semantic_class": o.semantic_class,
                        "views": [
                            {
                                "image": rel(v.image_ref),
                                "mask": rel(v.mask_ref),
                                "visibility": v.visibility,
                                "source_frame_id": v.source_frame_id,
                            }
                            for v in o.views
                        ],
                    }
                    for o in s.objects
                ],
                "pairs": [
                    {
                        "a": p.object_a,
                        "b": p.object_b,
                        "label": p.label.value,
                        "similarity_types": sorted(
                            t.value for t in p.similarity_types
                        ),
                        "synthetic": p.synthetic,
                    }
                    for p in s.pairs
                ],
            }
            for s in manifest.scenes
        ],
    }


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    doc = manifest_to_doc(manifest, path.parent)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def select_top_views(obj: ObjectInstance, k: int) -> list[ViewCrop]:
    """The min(k, |views|) most visible crops, deterministically ordered.

    Ties in visibility break by ascending source_frame_id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return list(sorted(obj.views, key=view_sort_key)[:k])


@dataclass(frozen=True)
class CompletionReport:
    """Outcome of complete_negative_pairs.

    uncompleted lists (scene_id, anchor_object_id) for anchors that
    needed a synthetic negative but had no out-of-class candidate.
    """

    manifest: DatasetManifest
    added: tuple[tuple[str, PairRecord], ...]
    uncompleted: tuple[tuple[str, str], ...]


def complete_negative_pairs(
    manifest: DatasetManifest, seed: int
) -> CompletionReport:
    """Add synthetic Different pairs so every Identical anchor has a negative.

    For each member of an annotated Identical pair that has no Similar or
    Different pair of its own, one Different pair to a random object of
    another class in the same scene is added (flagged synthetic).
    Deterministic given seed; annotated records are never touched.
    """
    rng = np.random.default_rng(seed)
    new_scenes = []
    added: list[tuple[str, PairRecord]] = []
    uncompleted: list[tuple[str, str]] = []
    for scene in manifest.scenes:
        objects = scene.object_map()
        existing = {p.key for p in scene.pairs}
        has_negative: set[str] = set()
        partners: dict[str, set[str]] = {o: set() for o in objects}
        for p in scene.pairs:
            partners[p.object_a].add(p.object_b)
            partners[p.object_b].add(p.object_a)
            if p.label in (PairLabel.SIMILAR, PairLabel.DIFFERENT):
                has_negative.update(p.key)
        extra: list[PairRecord] = []
        for pair in scene.pairs:
            if pair.label is not PairLabel.IDENTICAL:
                continue
            for anchor in pair.key:
                if anchor in has_negative:
                    continue
                own_class = objects[anchor].semantic_class
                candidates = sorted(
                    oid
                    for oid, obj in objects.items()
                    if obj.semantic_class != own_class
                    and oid not in partners[anchor]
                )
                if not candidates:
                    uncompleted.append((scene.scene_id, anchor))
                    continue
                partner = candidates[int(rng.integers(len(candidates)))]
                record = PairRecord.make(
                    anchor, partner, PairLabel.DIFFERENT, synthetic=True
                )
                if record.key in existing:
                    continue
                existing.add(record.key)
                partners[anchor].add(partner)
                partners[partner].add(anchor)
                has_negative.add(anchor)
                extra.append(record)
                added.append((scene.scene_id, record))
        new_scenes.append(
            replace(scene, pairs=scene.pairs + tuple(extra)) if extra else scene
        )
    completed = DatasetManifest(manifest.split, tuple(new_scenes))
    return CompletionReport(completed, tuple(added), tuple(uncompleted))
