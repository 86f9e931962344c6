"""Part-label transfer between similar objects.

Rigid alignment uses point-to-point ICP seeded from several yaw
rotations about the vertical (+z) axis of the canonical object frame;
the initialization with the lowest final residual wins. Labels then move
from source to target via a majority vote over k nearest neighbors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .types import DoppelError


class DegenerateGeometryError(DoppelError):
    """A point cloud has no spatial extent."""


@dataclass(frozen=True)
class LabeledPointCloud:
    """Points in the canonical object frame, with part labels on sources."""

    points: np.ndarray  # (N, 3) float64
    labels: np.ndarray | None = None  # (N,) int64 part ids

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be (N, 3) with N >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (pts.shape[0],):
                raise ValueError(
                    f"labels shape {labels.shape} does not match {pts.shape[0]} points"
                )
            object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3, 3) and translation (3,)")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def rotation_angle_deg(self) -> float:
        cos = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def yaw_rotation(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form rigid fit via cross-covariance SVD (reflection-safe)."""
    cs, ct = source.mean(axis=0), target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, ct - r @ cs)


def _run_icp(
    source: np.ndarray,
    target_tree: cKDTree,
    target: np.ndarray,
    init: RigidTransform,
    max_iters: int,
    tol: float,
) -> tuple[RigidTransform, float]:
    transform = init
    moved = transform.apply(source)
    dists, idx = target_tree.query(moved)
    history = [float(dists.mean())]
    for _ in range(max_iters):
        step = _kabsch(moved, target[idx])
        transform = step.compose(transform)
        moved = transform.apply(source)
        dists, idx = target_tree.query(moved)
        history.append(float(dists.mean()))
        if history[-2] - history[-1] < tol:
            break
    return transform, history


def icp_align(
    source: LabeledPointCloud,
    target: LabeledPointCloud,
    yaw_bins: int = 8,
    max_iters: int = 50,
    tol: float = 1e-7,
) -> tuple[RigidTransform, float]:
    """Best rigid source-to-target alignment over binned yaw initializations.

    Every initialization rotates the source about the vertical axis
    through its centroid and shifts centroids together, then refines with
    point-to-point ICP; the lowest final mean-correspondence residual is
    returned.
    """
    if yaw_bins < 1:
        raise ValueError("yaw_bins must be >= 1")
    src, tgt = source.points, target.points
    if np.allclose(np.ptp(src, axis=0), 0.0) or np.allclose(np.ptp(tgt, axis=0), 0.0):
        raise DegenerateGeometryError("all points coincide; alignment undefined")
    tree = cKDTree(tgt)
    centroid_src, centroid_tgt = src.mean(axis=0), tgt.mean(axis=0)
    best: tuple[RigidTransform, float] | None = None
    for b in range(yaw_bins):
        r0 = yaw_rotation(2.0 * np.pi * b / yaw_bins)
        t0 = centroid_tgt - r0 @ centroid_src
        init = RigidTransform(r0, t0)
        transform, history = _run_icp(src, tree, tgt, init, max_iters, tol)
        if best is None or history[-1] < best[1]:
            best = (transform, history[-1])
    return best


def transfer_labels(
    source: LabeledPointCloud,
    target: LabeledPointCloud,
    transform: RigidTransform,
    k: int = 5,
) -> np.ndarray:
    """Majority-vote label per target point from k nearest source points.

    Ties break toward the smallest label id, making the result
    independent of point ordering.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if source.labels is None:
        raise ValueError("source cloud has no labels to transfer")
    moved = transform.apply(source.points)
    tree = cKDTree(moved)
    k_eff = min(k, moved.shape[0])
    _, idx = tree.query(target.points, k=k_eff)
    neighbor_labels = source.labels[idx.reshape(target.points.shape[0], k_eff)]
    out = np.empty(target.points.shape[0], dtype=np.int64)
    offset = int(neighbor_labels.min()) if neighbor_labels.size else 0
    for i, row in enumerate(neighbor_labels - offset):
        out[i] = np.bincount(row).argmax() + offset  # argmax picks smallest on ties
    return out


# ---------------------------------------------------------------------------
# Point cloud I/O: columnar text ("x y z [label]") and a binary container.

_MAGIC = b"DPPC"
_BINARY_VERSION = 1


def save_pointcloud_txt(cloud: LabeledPointCloud, path: str | Path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            line = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            fh.write(line + "\n")


def load_pointcloud_txt(path: str | Path) -> LabeledPointCloud:
    points, labels = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts:
                continue
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 'x y z [label]'")
            points.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if not points:
        raise ValueError(f"{path}: empty point cloud")
    if labels and len(labels) != len(points):
        raise ValueError(f"{path}: labels present on only some lines")
    return LabeledPointCloud(
        np.array(points), np.array(labels) if labels else None
    )


def save_pointcloud_binary(cloud: LabeledPointCloud, path: str | Path) -> None:
    has_labels = cloud.labels is not None
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQ", _BINARY_VERSION, int(has_labels),
                             cloud.points.shape[0]))
        fh.write(cloud.points.astype("<f8").tobytes())
        if has_labels:
            fh.write(cloud.labels.astype("<i8").tobytes())


def load_pointcloud_binary(path: str | Path) -> LabeledPointCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a point cloud container")
        version, has_labels, n = struct.unpack("<IIQ", fh.read(16))
        if version != _BINARY_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        points = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3)
        labels = None
        if has_labels:
            labels = np.frombuffer(fh.read(8 * n), dtype="<i8")
    return LabeledPointCloud(points.copy(), None if labels is None else labels.copy())


def load_pointcloud(path: str | Path) -> LabeledPointCloud:
    """Dispatch on the container magic, falling back to the text format."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == _MAGIC:
        return load_pointcloud_binary(path)
    return load_pointcloud_txt(path)
