"""Event-sourced annotation state for pair labeling.

Every mutation is one line in an append-only log (fsync on append);
state is a pure fold over the log, so rebuilding from disk always
reproduces the same labels and identical-object groups. Identical labels
merge object groups, and pairs whose members already share a group are
auto-resolved without annotator input.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .classifier import Thresholds
from .types import (
    DoppelError,
    PairLabel,
    PairRecord,
    SceneManifest,
    SimilarityType,
    canonical_pair,
)
from .unionfind import UnionFind


class ValidationError(DoppelError):
    """A submitted label violates the annotation rules."""


class ConflictError(DoppelError):
    """The pair was already resolved (first write wins)."""


class NoPairsRemainingError(DoppelError):
    """Every pair in the scene is labeled or auto-resolved."""


class NothingToUndoError(DoppelError):
    """No surviving label/merge event to undo."""


EVENT_KINDS = ("label", "merge", "undo")


@dataclass(frozen=True)
class AnnotationEvent:
    event_id: int
    timestamp: float
    kind: str
    payload: dict

    def to_line(self) -> str:
        return json.dumps(
            {
                "event_id": self.event_id,
                "timestamp": self.timestamp,
                "kind": self.kind,
                "payload": self.payload,
            },
            sort_keys=True,
        )

    @classmethod
    def from_line(cls, line: str) -> "AnnotationEvent":
        doc = json.loads(line)
        if doc["kind"] not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {doc['kind']!r}")
        return cls(doc["event_id"], doc["timestamp"], doc["kind"], doc["payload"])


class EventLog:
    """Append-only, fsync-on-append, line-delimited event store."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.events: list[AnnotationEvent] = []
        if self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self.events.append(AnnotationEvent.from_line(line))
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.event_id <= prev.event_id:
                raise ValueError("event ids are not strictly increasing")
        self._fh = open(self.path, "a")

    def next_id(self) -> int:
        return self.events[-1].event_id + 1 if self.events else 1

    def append(self, kind: str, payload: dict) -> AnnotationEvent:
        event = AnnotationEvent(self.next_id(), time.time(), kind, payload)
        self._fh.write(event.to_line() + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.events.append(event)
        return event

    def close(self) -> None:
        self._fh.close()


def surviving_events(events: list[AnnotationEvent]) -> list[AnnotationEvent]:
    """Label/merge events that are not cancelled by a later undo."""
    undone: set[int] = set()
    active: list[AnnotationEvent] = []
    for event in events:
        if event.kind == "undo":
            if active:
                undone.add(active.pop().event_id)
        else:
            active.append(event)
    return [e for e in events if e.kind != "undo" and e.event_id not in undone]


@dataclass
class SceneState:
    """Fold of surviving events for one scene."""

    labels: dict[tuple[str, str], tuple[PairLabel, frozenset[SimilarityType]]] = field(
        default_factory=dict
    )
    groups: UnionFind = field(default_factory=UnionFind)


class AnnotationStore:
    """Annotation sessions over a dataset manifest, backed by one event log.

    All appends are serialized through a lock; readers see atomically
    applied states. Queue order per scene defaults to manifest pair
    order; a review queue (most threshold-ambiguous predictions first)
    can override it.
    """

    def __init__(
        self,
        scenes: dict[str, SceneManifest],
        log: EventLog,
        queue_order: dict[str, list[tuple[str, str]]] | None = None,
    ):
        self.scenes = scenes
        self.log = log
        self.queue_order = queue_order or {}
        self._lock = threading.Lock()
        self._attempts: dict[tuple, int] = {}
        self._rebuild()

    @classmethod
    def open(cls, scenes, log_path, queue_order=None) -> "AnnotationStore":
        return cls(scenes, EventLog(log_path), queue_order)

    # -- state fold ---------------------------------------------------------

    def _rebuild(self) -> None:
        states = {sid: SceneState() for sid in self.scenes}
        for scene_id, scene in self.scenes.items():
            for obj in scene.objects:
                states[scene_id].groups.add(obj.object_id)
        for event in surviving_events(self.log.events):
            scene_state = states[event.payload["scene_id"]]
            if event.kind == "label":
                key = canonical_pair(event.payload["a"], event.payload["b"])
                label = PairLabel(event.payload["label"])
                types = frozenset(
                    SimilarityType(t)
                    for t in event.payload.get("similarity_types", [])
                )
                scene_state.labels[key] = (label, types)
                if label is PairLabel.IDENTICAL:
                    scene_state.groups.union(*key)
            elif event.kind == "merge":
                scene_state.groups.union(
                    event.payload["a"], event.payload["b"]
                )
        self.states = states

    # -- queries ------------------------------------------------------------

    def _queue(self, scene_id: str) -> list[tuple[str, str]]:
        if scene_id in self.queue_order:
            return self.queue_order[scene_id]
        return [p.key for p in self.scenes[scene_id].pairs]

    def is_auto_resolved(self, scene_id: str, key: tuple[str, str]) -> bool:
        state = self.states[scene_id]
        return key not in state.labels and state.groups.same(*key)

    def resolved_label(self, scene_id: str, key: tuple[str, str]):
        """Explicit or transitively implied label for a pair, if any."""
        state = self.states[scene_id]
        if key in state.labels:
            return state.labels[key]
        if state.groups.same(*key):
            return (PairLabel.IDENTICAL, frozenset())
        return None

    def pending_pairs(self, scene_id: str) -> list[tuple[str, str]]:
        return [
            key
            for key in self._queue(scene_id)
            if self.resolved_label(scene_id, key) is None
        ]

    def next_pair(self, scene_id: str) -> dict:
        """Presentation for the first unresolved pair in the scene queue."""
        if scene_id not in self.scenes:
            raise KeyError(f"unknown scene {scene_id!r}")
        pending = self.pending_pairs(scene_id)
        if not pending:
            raise NoPairsRemainingError(f"scene {scene_id!r} fully annotated")
        a, b = pending[0]
        scene = self.scenes[scene_id]
        objects = scene.object_map()
        groups = self.states[scene_id].groups

        def present(oid: str) -> dict:
            views = objects[oid].views
            return {
                "object_id": oid,
                "semantic_class": objects[oid].semantic_class,
                "crops": [str(v.image_ref) for v in views[:3]],
                "context_frames": [v.source_frame_id for v in views],
                "all_crops": [str(v.image_ref) for v in views],
                "group_size": groups.size[groups.find(oid)],
            }

        return {
            "scene_id": scene_id,
            "a": present(a),
            "b": present(b),
            "progress": self.progress()[scene_id],
        }

    def progress(self) -> dict[str, dict]:
        out = {}
        for scene_id, scene in self.scenes.items():
            total = len(scene.pairs)
            explicit = auto = 0
            for pair in scene.pairs:
                if pair.key in self.states[scene_id].labels:
                    explicit += 1
                elif self.is_auto_resolved(scene_id, pair.key):
                    auto += 1
            out[scene_id] = {
                "total": total,
                "labeled": explicit,
                "auto_resolved": auto,
                "remaining": total - explicit - auto,
            }
        return out

    # -- mutations ----------------------------------------------------------

    def submit_label(
        self,
        scene_id: str,
        a: str,
        b: str,
        label: PairLabel,
        types: frozenset[SimilarityType] = frozenset(),
        attempt_id: str | None = None,
    ) -> AnnotationEvent:
        """Record a label; Identical labels merge the two objects' groups.

        First write wins: a pair that is already labeled (or implied
        Identical by the group structure) raises ConflictError. Repeated
        submissions with the same attempt_id return the original event.
        """
        if scene_id not in self.scenes:
            raise KeyError(f"unknown scene {scene_id!r}")
        key = canonical_pair(a, b)
        if types and label is not PairLabel.SIMILAR:
            raise ValidationError(
                f"similarity types only apply to Similar labels, got {label.value}"
            )
        scene_keys = {p.key for p in self.scenes[scene_id].pairs}
        if key not in scene_keys:
            raise ValidationError(f"pair {key} is not a pair of scene {scene_id!r}")
        with self._lock:
            attempt_key = (scene_id, key, attempt_id)
            if attempt_id is not None and attempt_key in self._attempts:
                event_id = self._attempts[attempt_key]
                return next(
                    e for e in self.log.events if e.event_id == event_id
                )
            if self.resolved_label(scene_id, key) is not None:
                raise ConflictError(
                    f"pair {key} in scene {scene_id!r} is already resolved"
                )
            event = self.log.append(
                "label",
                {
                    "scene_id": scene_id,
                    "a": key[0],
                    "b": key[1],
                    "label": label.value,
                    "similarity_types": sorted(t.value for t in types),
                },
            )
            state = self.states[scene_id]
            state.labels[key] = (label, frozenset(types))
            if label is PairLabel.IDENTICAL:
                state.groups.union(*key)
            if attempt_id is not None:
                self._attempts[attempt_key] = event.event_id
            return event

    def merge(self, scene_id: str, a: str, b: str) -> AnnotationEvent:
        """Directly merge two objects' identical groups."""
        if scene_id not in self.scenes:
            raise KeyError(f"unknown scene {scene_id!r}")
        objects = self.scenes[scene_id].object_map()
        for oid in (a, b):
            if oid not in objects:
                raise ValidationError(f"unknown object {oid!r} in {scene_id!r}")
        with self._lock:
            event = self.log.append(
                "merge", {"scene_id": scene_id, "a": a, "b": b}
            )
            self.states[scene_id].groups.union(a, b)
            return event

    def undo(self) -> AnnotationEvent:
        """Cancel the latest surviving label/merge; groups are rebuilt."""
        with self._lock:
            survivors = surviving_events(self.log.events)
            if not survivors:
                raise NothingToUndoError("no label or merge event to undo")
            target = survivors[-1]
            event = self.log.append("undo", {"target_event_id": target.event_id})
            self._rebuild()
            return event

    # -- export -------------------------------------------------------------

    def export_pairs(self, scene_id: str) -> list[PairRecord]:
        """Resolved labels (explicit + auto-resolved Identical) as records."""
        out = []
        for pair in self.scenes[scene_id].pairs:
            resolved = self.resolved_label(scene_id, pair.key)
            if resolved is None:
                continue
            label, types = resolved
            out.append(
                PairRecord.make(*pair.key, label, similarity_types=types)
            )
        return out

    def export_doc(self) -> dict:
        return {
            "scenes": [
                {
                    "scene_id": scene_id,
                    "pairs": [
                        {
                            "a": r.object_a,
                            "b": r.object_b,
                            "label": r.label.value,
                            "similarity_types": sorted(
                                t.value for t in r.similarity_types
                            ),
                            "synthetic": r.synthetic,
                        }
                        for r in self.export_pairs(scene_id)
                    ],
                }
                for scene_id in sorted(self.scenes)
            ]
        }


def review_queue(
    predictions: dict[tuple[str, str], float], t: Thresholds = Thresholds()
) -> list[tuple[str, str]]:
    """Pairs ordered most-ambiguous-first: by score distance to a threshold."""
    def ambiguity(item):
        key, score = item
        return (min(abs(score - t.t1), abs(score - t.t2)), key)

    return [key for key, _ in sorted(predictions.items(), key=ambiguity)]
