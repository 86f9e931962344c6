"""Run configuration: one JSON document wiring all module configs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig
from .classifier import Thresholds
from .encoder import EncoderConfig
from .losses import Margins
from .trainer import AugmentationFlags, TrainConfig


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.toy)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1))
    thresholds: Thresholds = field(default_factory=Thresholds)
    margins: Margins = field(default_factory=Margins)


def _build(cls, doc: dict, defaults=None, **coerce):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = dict(doc)
    for key, fn in coerce.items():
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = fn(kwargs[key])
    if defaults is not None:
        merged = {f.name: getattr(defaults, f.name) for f in fields(cls)}
        merged.update(kwargs)
        kwargs = merged
    return cls(**kwargs)


def run_config_from_doc(doc: dict) -> RunConfig:
    backbone = _build(
        BackboneConfig,
        doc.get("backbone", {"kind": "toy", "input_size": 64, "patch_size": 16,
                             "output_dim": 96}),
        intermediate_layers=tuple,
        pixel_mean=tuple,
        pixel_std=tuple,
    )
    encoder_doc = dict(doc.get("encoder", {}))
    encoder_doc.setdefault("input_dim", backbone.output_dim)
    encoder = _build(EncoderConfig, encoder_doc)
    train_doc = dict(doc.get("train", {}))
    train_doc.setdefault("epochs", 1)
    aug_doc = train_doc.pop("augmentations", None)
    margins = _build(Margins, doc.get("margins", {}))
    thresholds = _build(Thresholds, doc.get("thresholds", {}))
    train_doc["margins"] = margins
    train_doc["thresholds"] = thresholds
    if aug_doc is not None:
        train_doc["augmentations"] = _build(AugmentationFlags, aug_doc)
    train = _build(TrainConfig, train_doc, crop_scale=tuple)
    return RunConfig(backbone, encoder, train, thresholds, margins)


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Load a run config file; overrides (e.g. CLI flags) win over the file."""
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
    if overrides:
        for section, values in overrides.items():
            merged = dict(doc.get(section, {}))
            merged.update({k: v for k, v in values.items() if v is not None})
            doc[section] = merged
    return run_config_from_doc(doc)
