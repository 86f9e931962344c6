"""Toy generator: composition guarantees, determinism, preconditions."""

import hashlib
from pathlib import Path

import pytest

from doppel.toydata import make_toy_dataset
from doppel.types import PairLabel


def label_counts(scene):
    counts = {label: 0 for label in PairLabel}
    for pair in scene.pairs:
        counts[pair.label] += 1
    return counts


def test_composition_guarantees(toy_dataset):
    for scene in toy_dataset.scenes:
        counts = label_counts(scene)
        assert counts[PairLabel.IDENTICAL] >= 2
        assert counts[PairLabel.SIMILAR] >= 1
        assert counts[PairLabel.DIFFERENT] >= 2


def test_every_object_has_enough_views(toy_dataset):
    for scene in toy_dataset.scenes:
        for obj in scene.objects:
            assert len(obj.views) >= 5
            for view in obj.views:
                assert view.image_ref.is_file()
                assert view.mask_ref.is_file()


def test_similar_pairs_carry_types(toy_dataset):
    for scene in toy_dataset.scenes:
        for pair in scene.pairs:
            if pair.label is PairLabel.SIMILAR:
                assert len(pair.similarity_types) >= 1
            else:
                assert not pair.similarity_types


def test_deterministic_manifest_bytes(tmp_path):
    make_toy_dataset(tmp_path / "a", n_scenes=1, seed=3)
    make_toy_dataset(tmp_path / "b", n_scenes=1, seed=3)
    ha = hashlib.sha256((tmp_path / "a" / "manifest.json").read_bytes())
    hb = hashlib.sha256((tmp_path / "b" / "manifest.json").read_bytes())
    assert ha.hexdigest() == hb.hexdigest()
    images_a = sorted((tmp_path / "a" / "images").rglob("*.png"))
    images_b = sorted((tmp_path / "b" / "images").rglob("*.png"))
    assert len(images_a) == len(images_b) > 0
    for pa, pb in zip(images_a, images_b):
        assert pa.read_bytes() == pb.read_bytes()


def test_different_seeds_differ(tmp_path):
    make_toy_dataset(tmp_path / "a", n_scenes=1, seed=3)
    make_toy_dataset(tmp_path / "b", n_scenes=1, seed=4)
    assert (tmp_path / "a" / "manifest.json").read_text() != (
        tmp_path / "b" / "manifest.json"
    ).read_text()


def test_zero_scenes_rejected(tmp_path):
    with pytest.raises(ValueError):
        make_toy_dataset(tmp_path, n_scenes=0, seed=0)


def test_all_intra_class_pairs_annotated(toy_dataset):
    for scene in toy_dataset.scenes:
        by_class = {}
        for obj in scene.objects:
            by_class.setdefault(obj.semantic_class, []).append(obj.object_id)
        expected = sum(
            len(ids) * (len(ids) - 1) // 2 for ids in by_class.values()
        )
        assert len(scene.pairs) == expected


def test_masks_align_with_images(toy_dataset):
    from PIL import Image

    view = toy_dataset.scenes[0].objects[0].views[0]
    img = Image.open(view.image_ref)
    msk = Image.open(view.mask_ref)
    assert img.size == msk.size
    assert msk.mode == "L"
