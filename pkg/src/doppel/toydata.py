"""Procedural toy dataset generator.

Renders desk-scale scenes of textured geometric objects so the whole
pipeline (training, prediction, evaluation, annotation) runs without any
real captures or downloaded weights. Identical objects share a pattern
exactly; similar objects perturb one attribute (color or size) within a
small budget; different objects use distinct patterns. Each object gets
several views via random rotation/scale/shift/occlusion/noise, with the
occluded fraction recorded as visibility.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import load_manifest
from .types import DatasetManifest, PairLabel, PairRecord, SimilarityType

SILHOUETTES = ("circle", "square", "diamond", "triangle")
TEXTURES = ("solid", "stripes", "checker", "dots", "rings")

_GOLDEN_ANGLE = 137.50776405003785


@dataclass(frozen=True)
class Pattern:
    """Recipe for one toy object's appearance."""

    silhouette: str
    texture: str
    fg_hue: float  # degrees
    accent_hue: float
    size_frac: float  # silhouette radius as a fraction of half the canvas
    cell: int  # texture cell size in pixels


def _hue_rgb(hue: float, sat: float = 0.75, val: float = 0.85) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb((hue % 360.0) / 360.0, sat, val)
    return np.array([r, g, b]) * 255.0


def _silhouette_mask(kind: str, canvas: int, radius: float) -> np.ndarray:
    c = (canvas - 1) / 2.0
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    dx, dy = xx - c, yy - c
    if kind == "circle":
        return dx * dx + dy * dy <= radius * radius
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius * 1.2
    if kind == "triangle":
        inside = (dy >= -radius) & (dy <= radius)
        half_width = (dy + radius) / 2.0 * 1.1
        return inside & (np.abs(dx) <= half_width)
    raise ValueError(f"unknown silhouette {kind!r}")


def _texture_field(kind: str, canvas: int, cell: int) -> np.ndarray:
    """Boolean field selecting accent (True) vs foreground (False) pixels."""
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    if kind == "solid":
        return np.zeros((canvas, canvas), dtype=bool)
    if kind == "stripes":
        return (xx // cell) % 2 == 1
    if kind == "checker":
        return ((xx // cell) + (yy // cell)) % 2 == 1
    if kind == "dots":
        mx, my = xx % cell - cell / 2.0, yy % cell - cell / 2.0
        return mx * mx + my * my <= (cell * 0.32) ** 2
    if kind == "rings":
        c = (canvas - 1) / 2.0
        rr = np.sqrt((xx - c) ** 2 + (yy - c) ** 2)
        return (rr // cell) % 2 == 1
    raise ValueError(f"unknown texture {kind!r}")


def render_pattern(
    pattern: Pattern, canvas: int, bg: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Render a pattern onto a uniform background; returns (image, mask)."""
    radius = pattern.size_frac * canvas / 2.0
    mask = _silhouette_mask(pattern.silhouette, canvas, radius)
    accent = _texture_field(pattern.texture, canvas, pattern.cell)
    image = np.tile(bg, (canvas, canvas, 1)).astype(np.float64)
    fg = _hue_rgb(pattern.fg_hue)
    ac = _hue_rgb(pattern.accent_hue, sat=0.85, val=0.65)
    image[mask & ~accent] = fg
    image[mask & accent] = ac
    return image, mask


def _transform(
    image: np.ndarray,
    mask: np.ndarray,
    angle: float,
    scale: float,
    shift: tuple[int, int],
    bg: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    canvas = image.shape[0]
    bg_tuple = tuple(int(round(v)) for v in bg)
    img = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8))
    msk = Image.fromarray((mask * 255).astype(np.uint8))
    img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=bg_tuple)
    msk = msk.rotate(angle, resample=Image.NEAREST, fillcolor=0)
    side = max(8, int(round(canvas * scale)))
    img = img.resize((side, side), Image.BILINEAR)
    msk = msk.resize((side, side), Image.NEAREST)
    out_img = Image.new("RGB", (canvas, canvas), bg_tuple)
    out_msk = Image.new("L", (canvas, canvas), 0)
    ox = (canvas - side) // 2 + shift[0]
    oy = (canvas - side) // 2 + shift[1]
    out_img.paste(img, (ox, oy))
    out_msk.paste(msk, (ox, oy))
    return np.asarray(out_img, dtype=np.float64), np.asarray(out_msk) > 127


def render_view(
    pattern: Pattern, canvas: int, rng: np.random.Generator, occlude: bool
) -> tuple[np.ndarray, np.ndarray, float]:
    """One randomized view of a pattern; returns (image u8, mask bool, visibility)."""
    bg = np.array([200.0, 200.0, 200.0]) + rng.uniform(-10, 10, size=3)
    image, mask = render_pattern(pattern, canvas, bg)
    angle = rng.uniform(-12.0, 12.0)
    scale = rng.uniform(0.85, 1.05)
    shift = (int(rng.integers(-4, 5)), int(rng.integers(-4, 5)))
    image, mask = _transform(image, mask, angle, scale, shift, bg)
    full = max(int(mask.sum()), 1)
    if occlude and rng.random() < 0.8:
        frac = rng.uniform(0.12, 0.4)
        extent = int(round(canvas * frac))
        side = int(rng.integers(4))
        sl = {
            0: np.s_[:extent, :],
            1: np.s_[-extent:, :],
            2: np.s_[:, :extent],
            3: np.s_[:, -extent:],
        }[side]
        image[sl] = bg
        mask[sl] = False
    visibility = mask.sum() / full
    brightness = rng.uniform(0.95, 1.05)
    image = image * brightness + rng.normal(0.0, 2.5, size=image.shape)
    return np.clip(image, 0, 255).astype(np.uint8), mask, float(visibility)


def _sample_patterns(rng: np.random.Generator, count: int) -> list[Pattern]:
    """Distinct patterns: unique silhouette/texture combos, spaced hues."""
    combos = [(s, t) for s in SILHOUETTES for t in TEXTURES]
    order = rng.permutation(len(combos))
    base_hue = rng.uniform(0, 360)
    patterns = []
    for i in range(count):
        sil, tex = combos[order[i % len(combos)]]
        hue = (base_hue + i * _GOLDEN_ANGLE) % 360
        patterns.append(
            Pattern(
                silhouette=sil,
                texture=tex,
                fg_hue=hue,
                accent_hue=(hue + 150.0) % 360,
                size_frac=float(rng.uniform(0.55, 0.8)),
                cell=int(rng.integers(8, 15)),
            )
        )
    return patterns


def _similar_variant(
    pattern: Pattern, rng: np.random.Generator
) -> tuple[Pattern, SimilarityType]:
    """Perturb exactly one attribute within a small budget.

    The budget sits well below the distance between distinct patterns
    (hues are spaced by the golden angle, and silhouettes/textures differ),
    so similar stays separable from both identical and different.
    """
    if rng.random() < 0.5:
        shift = rng.uniform(40.0, 60.0) * (1 if rng.random() < 0.5 else -1)
        variant = replace(pattern, fg_hue=(pattern.fg_hue + shift) % 360)
        return variant, SimilarityType.TEXTURE_COLOR
    factor = 0.72 if rng.random() < 0.5 else 1.35
    new_size = float(np.clip(pattern.size_frac * factor, 0.35, 0.95))
    return replace(pattern, size_frac=new_size), SimilarityType.SHAPE


_CLASS_NAMES = ("mug", "chair", "lamp", "box", "plant", "vase", "stool", "bin")


def make_toy_dataset(
    out_dir: str | Path,
    n_scenes: int,
    seed: int,
    split: str = "train",
    views_per_object: int = 6,
    canvas: int = 96,
) -> DatasetManifest:
    """Generate scenes, write crops/masks/manifest, return the loaded manifest.

    Each scene holds two semantic classes: one with an identical pair, a
    similar object, and a different object; one with an identical pair
    and a different object. All intra-class pairs are annotated, giving
    at least 2 identical, 2 similar, and 7 different pairs per scene.
    Deterministic given (n_scenes, seed).
    """
    if n_scenes < 1:
        raise ValueError(f"n_scenes must be >= 1, got {n_scenes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    scenes_doc = []
    for scene_idx in range(n_scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, scene_idx]))
        scene_id = f"scene{scene_idx:03d}"
        name_ids = rng.choice(len(_CLASS_NAMES), size=2, replace=False)
        cls_a, cls_b = (_CLASS_NAMES[i] for i in name_ids)
        patterns = _sample_patterns(rng, 4)
        sim_pattern, sim_type = _similar_variant(patterns[0], rng)

        # (object_id, class, pattern); identical objects share the pattern.
        roster = [
            (f"{cls_a}00", cls_a, patterns[0]),
            (f"{cls_a}01", cls_a, patterns[0]),
            (f"{cls_a}02", cls_a, sim_pattern),
            (f"{cls_a}03", cls_a, patterns[1]),
            (f"{cls_b}00", cls_b, patterns[2]),
            (f"{cls_b}01", cls_b, patterns[2]),
            (f"{cls_b}02", cls_b, patterns[3]),
        ]
        labels = {
            (f"{cls_a}00", f"{cls_a}01"): (PairLabel.IDENTICAL, frozenset()),
            (f"{cls_a}00", f"{cls_a}02"): (PairLabel.SIMILAR, frozenset([sim_type])),
            (f"{cls_a}01", f"{cls_a}02"): (PairLabel.SIMILAR, frozenset([sim_type])),
            (f"{cls_a}00", f"{cls_a}03"): (PairLabel.DIFFERENT, frozenset()),
            (f"{cls_a}01", f"{cls_a}03"): (PairLabel.DIFFERENT, frozenset()),
            (f"{cls_a}02", f"{cls_a}03"): (PairLabel.DIFFERENT, frozenset()),
            (f"{cls_b}00", f"{cls_b}01"): (PairLabel.IDENTICAL, frozenset()),
            (f"{cls_b}00", f"{cls_b}02"): (PairLabel.DIFFERENT, frozenset()),
            (f"{cls_b}01", f"{cls_b}02"): (PairLabel.DIFFERENT, frozenset()),
        }

        img_dir = out_dir / "images" / scene_id
        msk_dir = out_dir / "masks" / scene_id
        img_dir.mkdir(parents=True, exist_ok=True)
        msk_dir.mkdir(parents=True, exist_ok=True)

        objects_doc = []
        for object_id, semantic_class, pattern in roster:
            views_doc = []
            for j in range(views_per_object):
                image, mask, visibility = render_view(
                    pattern, canvas, rng, occlude=j > 0
                )
                img_rel = f"images/{scene_id}/{object_id}_v{j}.png"
                msk_rel = f"masks/{scene_id}/{object_id}_v{j}.png"
                Image.fromarray(image).save(out_dir / img_rel)
                Image.fromarray((mask * 255).astype(np.uint8)).save(
                    out_dir / msk_rel
                )
                views_doc.append(
                    {
                        "image": img_rel,
                        "mask": msk_rel,
                        "visibility": round(visibility, 4),
                        "source_frame_id": f"{scene_id}_f{j:02d}",
                    }
                )
            objects_doc.append(
                {
                    "object_id": object_id,
                    "semantic_class": semantic_class,
                    "views": views_doc,
                }
            )

        pairs_doc = [
            {
                "a": a,
                "b": b,
                "label": label.value,
                "similarity_types": sorted(t.value for t in types),
                "synthetic": False,
            }
            for (a, b), (label, types) in sorted(labels.items())
        ]
        # Self-check against the generator contract before writing.
        for rec in pairs_doc:
            PairRecord.make(rec["a"], rec["b"], PairLabel(rec["label"]))
        scenes_doc.append(
            {"scene_id": scene_id, "objects": objects_doc, "pairs": pairs_doc}
        )

    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(
        json.dumps({"split": split, "scenes": scenes_doc}, indent=2) + "\n"
    )
    return load_manifest(manifest_path)
