"""Threshold classification of similarity scores and scene-level grouping."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .encoder import SimilarityResult
from .types import DoppelError, PairLabel
from .unionfind import UnionFind


class DomainError(DoppelError):
    """A similarity score lies outside [0, 1]."""


class DuplicatePairError(DoppelError):
    """The same unordered pair was scored more than once."""


@dataclass(frozen=True)
class Thresholds:
    """Score cut points: Diff below t1, Sim in [t1, t2), Id from t2 up."""

    t1: float = 0.33
    t2: float = 0.66

    def __post_init__(self):
        if not (0.0 < self.t1 < self.t2 < 1.0):
            raise ValueError(f"need 0 < t1 < t2 < 1, got ({self.t1}, {self.t2})")


def classify(s: float, t: Thresholds = Thresholds()) -> PairLabel:
    """Half-open interval semantics: [t2, 1] -> Id, [t1, t2) -> Sim, [0, t1) -> Diff."""
    if not (0.0 <= s <= 1.0):
        raise DomainError(f"score {s} outside [0, 1]")
    if s >= t.t2:
        return PairLabel.IDENTICAL
    if s >= t.t1:
        return PairLabel.SIMILAR
    return PairLabel.DIFFERENT


@dataclass(frozen=True)
class SceneGrouping:
    """Disjoint groups of identical objects plus surviving similar pairs."""

    identical_groups: tuple[frozenset, ...]
    similar_pairs: tuple[tuple[str, str], ...]

    def group_of(self, object_id: str) -> frozenset | None:
        for group in self.identical_groups:
            if object_id in group:
                return group
        return None


def group_scene(
    results: list[SimilarityResult], t: Thresholds = Thresholds()
) -> SceneGrouping:
    """Transitively merge Id-classified pairs; keep Sim pairs across groups.

    Sim-classified pairs whose members end up inside the same identical
    component are absorbed (a pair cannot be both). Output ordering is
    deterministic: groups by smallest member, pairs sorted.
    """
    seen = set()
    for r in results:
        if r.pair in seen:
            raise DuplicatePairError(f"pair {r.pair} scored twice")
        seen.add(r.pair)

    uf = UnionFind()
    labeled = []
    for r in results:
        label = classify(r.score, t)
        labeled.append((r, label))
        uf.add(r.pair[0])
        uf.add(r.pair[1])
        if label is PairLabel.IDENTICAL:
            uf.union(*r.pair)

    similar = sorted(
        r.pair
        for r, label in labeled
        if label is PairLabel.SIMILAR and not uf.same(*r.pair)
    )
    return SceneGrouping(tuple(uf.groups(min_size=2)), tuple(similar))


def prediction_doc(
    scene_id: str,
    results: list[SimilarityResult],
    grouping: SceneGrouping,
    t: Thresholds = Thresholds(),
) -> dict:
    """Per-scene prediction document (the external output schema)."""
    return {
        "scene_id": scene_id,
        "pairs": [
            {
                "a": r.pair[0],
                "b": r.pair[1],
                "score": r.score,
                "label": classify(r.score, t).value,
            }
            for r in results
        ],
        "identical_groups": [sorted(g) for g in grouping.identical_groups],
        "similar_pairs": [list(p) for p in grouping.similar_pairs],
    }


def write_predictions(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_predictions(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
