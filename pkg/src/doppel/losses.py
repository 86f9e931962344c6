"""Multi-class triplet loss with hard mining, and the score-alignment loss.

Both losses operate on feature distances/similarities that may be plain
numbers or autograd tensors; plain inputs are promoted to float64 so
hand-computed reference values match bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor

from .types import PairLabel


@dataclass(frozen=True)
class Margins:
    """Separation margins for Id-Sim, Sim-Diff, and Id-Diff hinges."""

    alpha1: float = 0.4
    alpha2: float = 0.4
    alpha3: float = 0.8

    def __post_init__(self):
        for name, value in (("alpha1", self.alpha1), ("alpha2", self.alpha2),
                            ("alpha3", self.alpha3)):
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} outside [0, 1]")


def _as_distances(values) -> Tensor:
    if isinstance(values, Tensor):
        t = values
    else:
        t = torch.as_tensor(list(values), dtype=torch.float64)
    if t.numel() and (t.min() < 0.0 or t.max() > 1.0):
        raise ValueError("distances must lie in [0, 1]")
    return t


@dataclass
class AnchorNeighborhood:
    """Distances from one anchor object to its in-batch partners by class."""

    anchor: str
    d_id: Tensor
    d_sim: Tensor
    d_diff: Tensor

    def __init__(self, anchor: str, d_id=(), d_sim=(), d_diff=()):
        self.anchor = anchor
        self.d_id = _as_distances(d_id)
        self.d_sim = _as_distances(d_sim)
        self.d_diff = _as_distances(d_diff)


@dataclass
class MinedDistances:
    """Hard-mined operands for the three hinge terms; absent if no partner."""

    d_id_max: Tensor | None
    d_sim_min: Tensor | None
    d_sim_max: Tensor | None
    d_diff_min: Tensor | None


def mine_hard(n: AnchorNeighborhood) -> MinedDistances:
    """Hardest distances per category: max Id, min/max Sim, min Diff."""
    return MinedDistances(
        d_id_max=n.d_id.max() if n.d_id.numel() else None,
        d_sim_min=n.d_sim.min() if n.d_sim.numel() else None,
        d_sim_max=n.d_sim.max() if n.d_sim.numel() else None,
        d_diff_min=n.d_diff.min() if n.d_diff.numel() else None,
    )


def _hinge(lhs: Tensor | None, rhs: Tensor | None, margin: float):
    # Terms with an absent operand contribute nothing.
    if lhs is None or rhs is None:
        return None
    return torch.clamp(lhs - rhs + margin, min=0.0)


def triplet_loss(
    batch: Sequence[AnchorNeighborhood],
    margins: Margins = Margins(),
    normalize: bool = True,
) -> Tensor:
    """Sum over anchors of the three hard-mined hinge terms.

    Per anchor: max(0, dId* - dSim*_min + a1) + max(0, dSim*_max - dDiff* + a2)
    + max(0, dId* - dDiff* + a3). With normalize the sum is divided by the
    number of anchors.
    """
    if not batch:
        raise ValueError("triplet_loss requires a non-empty batch")
    total = None
    for neighborhood in batch:
        mined = mine_hard(neighborhood)
        for term in (
            _hinge(mined.d_id_max, mined.d_sim_min, margins.alpha1),
            _hinge(mined.d_sim_max, mined.d_diff_min, margins.alpha2),
            _hinge(mined.d_id_max, mined.d_diff_min, margins.alpha3),
        ):
            if term is not None:
                total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    if normalize:
        total = total / len(batch)
    return total


def alignment_loss(
    pairs: Iterable[tuple[PairLabel, float | Tensor]],
    t1: float = 0.33,
    t2: float = 0.66,
    hinged: bool = False,
) -> Tensor:
    """Signed alignment of Id scores toward 1 and Diff scores toward 0.

    Identical contributes (t2 - s) + (1 - s); Different contributes
    (s - t1) + s; Similar and Unknown contribute nothing (the triplet
    loss places the Sim bin). The signed form follows the printed
    formula; the hinged variant clamps each term at zero for ablations.
    """
    if not (0.0 < t1 < t2 < 1.0):
        raise ValueError(f"need 0 < t1 < t2 < 1, got ({t1}, {t2})")
    total = None
    for label, s in pairs:
        if not isinstance(s, Tensor):
            s = torch.as_tensor(s, dtype=torch.float64)
        if label is PairLabel.IDENTICAL:
            a, b = t2 - s, 1.0 - s
        elif label is PairLabel.DIFFERENT:
            a, b = s - t1, s
        else:
            continue
        if hinged:
            a, b = torch.clamp(a, min=0.0), torch.clamp(b, min=0.0)
        term = a + b
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total


def total_loss(triplet: float | Tensor, align: float | Tensor) -> Tensor:
    """Unweighted sum of the two components."""
    if not isinstance(triplet, Tensor):
        triplet = torch.as_tensor(triplet, dtype=torch.float64)
    return triplet + align
