"""Core domain types for lookalike pair datasets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path


class DoppelError(Exception):
    """Base class for all package errors."""


class MissingFileError(DoppelError):
    """A manifest, crop, or mask path does not resolve to a readable file."""


class SchemaError(DoppelError):
    """A document does not conform to the expected schema."""


class InvariantError(DoppelError):
    """A structural invariant of the data model is violated."""


class PairLabel(enum.Enum):
    """Annotation outcome for one unordered intra-class object pair."""

    IDENTICAL = "identical"
    SIMILAR = "similar"
    DIFFERENT = "different"
    UNKNOWN = "unknown"

    @classmethod
    def from_str(cls, value: str) -> "PairLabel":
        try:
            return cls(value)
        except ValueError:
            raise SchemaError(f"unknown pair label {value!r}") from None


# Ordering used by monotonicity checks: Diff < Sim < Id.
LABEL_RANK = {PairLabel.DIFFERENT: 0, PairLabel.SIMILAR: 1, PairLabel.IDENTICAL: 2}


class SimilarityType(enum.Enum):
    """How a Similar pair differs (attached only to Similar pairs)."""

    SHAPE = "shape"
    ARTICULATED = "articulated"
    MIRRORED = "mirrored"
    DEFORMABLE = "deformable"
    TEXTURE_COLOR = "texture_color"

    @classmethod
    def from_str(cls, value: str) -> "SimilarityType":
        try:
            return cls(value)
        except ValueError:
            raise SchemaError(f"unknown similarity type {value!r}") from None


@dataclass(frozen=True)
class ViewCrop:
    """One cropped observation of an object in a source frame.

    image_ref/mask_ref are resolved absolute paths after manifest loading.
    visibility is the fraction of the object's surface visible in the
    source frame, in [0, 1]; views are ranked by it.
    """

    image_ref: Path
    mask_ref: Path
    visibility: float
    source_frame_id: str

    def __post_init__(self):
        if not (0.0 <= self.visibility <= 1.0):
            raise InvariantError(
                f"visibility {self.visibility} outside [0, 1] "
                f"(frame {self.source_frame_id})"
            )


@dataclass(frozen=True)
class ObjectInstance:
    """An object in a scene with its multiview crops.

    views are kept sorted by descending visibility (ties broken by
    ascending source_frame_id) so top-k selection is a prefix.
    """

    object_id: str
    semantic_class: str
    views: tuple[ViewCrop, ...]

    def __post_init__(self):
        if not self.views:
            raise InvariantError(f"object {self.object_id!r} has no views")


def view_sort_key(view: ViewCrop) -> tuple[float, str]:
    return (-view.visibility, view.source_frame_id)


def canonical_pair(a: str, b: str) -> tuple[str, str]:
    """Unordered pair key: lexicographically smaller id first."""
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class PairRecord:
    """A labeled unordered object pair within one scene.

    Stored in canonical order (object_a < object_b). synthetic marks
    records added by negative-pair completion rather than annotation;
    only synthetic records may cross semantic classes.
    """

    object_a: str
    object_b: str
    label: PairLabel
    similarity_types: frozenset[SimilarityType] = frozenset()
    synthetic: bool = False

    def __post_init__(self):
        if self.object_a == self.object_b:
            raise InvariantError(f"self-pair ({self.object_a}, {self.object_b})")
        if self.object_a > self.object_b:
            raise InvariantError(
                f"pair ({self.object_a}, {self.object_b}) not in canonical order"
            )
        if self.similarity_types and self.label is not PairLabel.SIMILAR:
            raise InvariantError(
                f"pair ({self.object_a}, {self.object_b}): similarity types "
                f"attached to label {self.label.value!r}"
            )

    @classmethod
    def make(
        cls,
        a: str,
        b: str,
        label: PairLabel,
        similarity_types=(),
        synthetic: bool = False,
    ) -> "PairRecord":
        """Build a record from an unordered pair, canonicalizing the order."""
        a, b = canonical_pair(a, b)
        return cls(a, b, label, frozenset(similarity_types), synthetic)

    @property
    def key(self) -> tuple[str, str]:
        return (self.object_a, self.object_b)


@dataclass(frozen=True)
class SceneManifest:
    """All objects and labeled pairs of one scene."""

    scene_id: str
    objects: tuple[ObjectInstance, ...]
    pairs: tuple[PairRecord, ...]

    def object_map(self) -> dict[str, ObjectInstance]:
        return {o.object_id: o for o in self.objects}


@dataclass(frozen=True)
class DatasetManifest:
    """A collection of scenes with a named split."""

    split: str
    scenes: tuple[SceneManifest, ...] = field(default_factory=tuple)

    def scene_map(self) -> dict[str, SceneManifest]:
        return {s.scene_id: s for s in self.scenes}
