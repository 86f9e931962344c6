"""Loss oracles: hand-computed fixed cases, finite-difference gradients."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from doppel.losses import (
    AnchorNeighborhood,
    Margins,
    alignment_loss,
    mine_hard,
    total_loss,
    triplet_loss,
)
from doppel.types import PairLabel

Id, Sim, Diff, Unk = (
    PairLabel.IDENTICAL,
    PairLabel.SIMILAR,
    PairLabel.DIFFERENT,
    PairLabel.UNKNOWN,
)


# ---------------------------------------------------------------------------
# Independent reference implementation (plain python floats, same op order).


def ref_mined(d_id, d_sim, d_diff):
    return (
        max(d_id) if d_id else None,
        min(d_sim) if d_sim else None,
        max(d_sim) if d_sim else None,
        min(d_diff) if d_diff else None,
    )


def ref_triplet(neighborhoods, margins=(0.4, 0.4, 0.8), normalize=True):
    a1, a2, a3 = margins
    total = 0.0
    for d_id, d_sim, d_diff in neighborhoods:
        did, dsmin, dsmax, ddmin = ref_mined(d_id, d_sim, d_diff)
        if did is not None and dsmin is not None:
            total = total + max(0.0, did - dsmin + a1)
        if dsmax is not None and ddmin is not None:
            total = total + max(0.0, dsmax - ddmin + a2)
        if did is not None and ddmin is not None:
            total = total + max(0.0, did - ddmin + a3)
    return total / len(neighborhoods) if normalize else total


def ref_alignment(pairs, t1=0.33, t2=0.66):
    total = 0.0
    for label, s in pairs:
        if label is Id:
            total = total + (t2 - s) + (1.0 - s)
        elif label is Diff:
            total = total + (s - t1) + s
    return total


def make_batch(neighborhoods):
    return [
        AnchorNeighborhood(f"a{i}", d_id, d_sim, d_diff)
        for i, (d_id, d_sim, d_diff) in enumerate(neighborhoods)
    ]


# ---------------------------------------------------------------------------
# mine_hard


def test_mine_hard_worked_example():
    mined = mine_hard(AnchorNeighborhood("a", [0.1, 0.3], [0.4, 0.6], [0.7]))
    assert float(mined.d_id_max) == 0.3
    assert float(mined.d_sim_min) == 0.4
    assert float(mined.d_sim_max) == 0.6
    assert float(mined.d_diff_min) == 0.7


def test_mine_hard_absent_and_singleton():
    mined = mine_hard(AnchorNeighborhood("a", [0.2], [], [0.5]))
    assert mined.d_sim_min is None and mined.d_sim_max is None
    assert float(mined.d_id_max) == 0.2
    assert float(mined.d_diff_min) == 0.5
    singleton = mine_hard(AnchorNeighborhood("a", [0.3], [0.4], [0.9]))
    assert float(singleton.d_sim_min) == float(singleton.d_sim_max) == 0.4


def test_distances_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        AnchorNeighborhood("a", [1.2], [], [])
    with pytest.raises(ValueError):
        AnchorNeighborhood("a", [], [-0.1], [])


# ---------------------------------------------------------------------------
# triplet_loss fixed cases

# (d_id, d_sim, d_diff) per anchor; expected values from ref_triplet, with
# hand-checked values noted where the arithmetic is simple.
FIXED_NEIGHBORHOODS = [
    [([0.1], [0.3], [0.9])],                       # spec example: 0.2 + 0 + 0
    [([0.0], [0.5], [1.0])],                       # all hinges slack: 0
    [([0.3], [], [])],                             # only Id present: 0
    [([], [0.2], [0.9])],                          # no Id: term2 only
    [([0.1, 0.3], [0.4, 0.6], [0.7])],             # mined (0.3, 0.4, 0.6, 0.7)
    [([0.5], [0.5], [0.5])],                       # all hinges at margin
    [([0.9], [0.1], [0.05])],                      # inverted ordering, all active
    [([0.0], [0.0], [0.0])],
    [([1.0], [1.0], [1.0])],
    [([0.2, 0.4, 0.6], [0.5], [0.8, 0.9])],
    [([0.1], [0.3], [0.9]), ([0.0], [0.5], [1.0])],  # two anchors
    [([0.1], [], [0.2])],                          # Id-Diff term only
    [([], [], [0.4])],                             # Diff alone: 0
    [([], [0.4], [])],                             # Sim alone: 0
    [([0.25], [0.35], [0.45])],
    [([0.6, 0.2], [0.7, 0.65], [0.71])],
    [([0.05], [0.5, 0.1], [0.95, 0.6])],
    [([0.33], [0.33], [0.99])],
    [([0.4], [0.9], [0.1])],                       # Sim farther than Diff
    [([0.15, 0.18], [0.22], [0.3, 0.28, 0.26])],
    [([0.1], [0.3], [0.9]), ([0.9], [0.1], [0.05]), ([0.3], [], [])],
]


@pytest.mark.parametrize("neighborhoods", FIXED_NEIGHBORHOODS)
@pytest.mark.parametrize("normalize", [True, False])
def test_triplet_matches_reference_exactly(neighborhoods, normalize):
    got = triplet_loss(make_batch(neighborhoods), normalize=normalize)
    want = ref_triplet(neighborhoods, normalize=normalize)
    assert float(got) == want


def test_triplet_spec_worked_examples():
    # max(0, 0.1 - 0.3 + 0.4) = 0.2; other hinges slack
    loss = triplet_loss(make_batch([([0.1], [0.3], [0.9])]), normalize=False)
    assert float(loss) == pytest.approx(0.2, abs=1e-12)
    # 0 - 0.5 + 0.4 < 0; 0.5 - 1 + 0.4 < 0; 0 - 1 + 0.8 < 0
    loss = triplet_loss(make_batch([([0.0], [0.5], [1.0])]), normalize=False)
    assert float(loss) == 0.0
    # anchor with only d_id contributes nothing
    loss = triplet_loss(make_batch([([0.3], [], [])]), normalize=False)
    assert float(loss) == 0.0


def test_triplet_custom_margins():
    m = Margins(0.1, 0.2, 0.3)
    got = triplet_loss(make_batch([([0.5], [0.4], [0.3])]), m, normalize=False)
    want = max(0.0, 0.5 - 0.4 + 0.1) + max(0.0, 0.4 - 0.3 + 0.2) + max(
        0.0, 0.5 - 0.3 + 0.3
    )
    assert float(got) == want


def test_triplet_empty_batch_rejected():
    with pytest.raises(ValueError):
        triplet_loss([])


def test_margins_validation():
    with pytest.raises(ValueError):
        Margins(alpha1=-0.1)
    with pytest.raises(ValueError):
        Margins(alpha3=1.5)
    assert Margins() == Margins(0.4, 0.4, 0.8)


def test_triplet_nonnegative_on_random_batches():
    rng = np.random.default_rng(3)
    for _ in range(50):
        neighborhoods = []
        for _ in range(rng.integers(1, 5)):
            neighborhoods.append(
                tuple(
                    list(rng.uniform(0, 1, rng.integers(0, 4)))
                    for _ in range(3)
                )
            )
        loss = triplet_loss(make_batch(neighborhoods))
        assert float(loss) >= 0.0
        assert float(loss) == ref_triplet(neighborhoods)


@settings(max_examples=60, deadline=None)
@given(
    d_id=st.floats(0, 1), d_sim_min=st.floats(0, 1), d_diff=st.floats(0, 1),
    bump=st.floats(0, 1),
)
def test_triplet_monotonicity(d_id, d_sim_min, d_diff, bump):
    # The mined operands are what the invariant speaks about: d_sim_max is
    # pinned at 1 so raising the minimum Sim distance moves only term 1.
    base = float(
        triplet_loss(make_batch([([d_id], [d_sim_min, 1.0], [d_diff])]))
    )
    wider_sim = min(1.0, d_sim_min + bump)
    after = float(
        triplet_loss(make_batch([([d_id], [wider_sim, 1.0], [d_diff])]))
    )
    assert after <= base + 1e-12
    # increasing the Id distance never decreases the loss
    wider_id = min(1.0, d_id + bump)
    after = float(
        triplet_loss(make_batch([([wider_id], [d_sim_min, 1.0], [d_diff])]))
    )
    assert after >= base - 1e-12


# ---------------------------------------------------------------------------
# alignment_loss


FIXED_ALIGNMENT_CASES = [
    [(Id, 0.9)],                      # spec example: -0.14
    [(Diff, 0.2)],                    # spec example: 0.07
    [(Sim, 0.5)],                     # similar contributes nothing
    [(Unk, 0.5)],
    [(Id, 1.0)],                      # minimum for Id: t2 - 1
    [(Diff, 0.0)],                    # minimum for Diff: -t1
    [(Id, 0.0)],
    [(Diff, 1.0)],
    [(Id, 0.9), (Diff, 0.2), (Sim, 0.44)],
    [(Id, 0.66), (Id, 0.67)],
    [(Diff, 0.33), (Diff, 0.32)],
    [(Id, 0.5), (Diff, 0.5), (Unk, 0.1)],
]


@pytest.mark.parametrize("pairs", FIXED_ALIGNMENT_CASES)
def test_alignment_matches_reference_exactly(pairs):
    assert float(alignment_loss(pairs)) == ref_alignment(pairs)


def test_alignment_spec_worked_examples():
    assert float(alignment_loss([(Id, 0.9)])) == pytest.approx(-0.14, abs=1e-12)
    assert float(alignment_loss([(Diff, 0.2)])) == pytest.approx(0.07, abs=1e-12)
    assert float(alignment_loss([(Sim, 0.123)])) == 0.0


def test_alignment_minima_at_extremes():
    # Identical is minimized exactly at s = 1 with value t2 - 1 = -0.34
    at_one = float(alignment_loss([(Id, 1.0)]))
    assert at_one == pytest.approx(-0.34, abs=1e-12)
    for s in (0.0, 0.3, 0.9, 0.999):
        assert float(alignment_loss([(Id, s)])) > at_one
    # Different is minimized exactly at s = 0 with value -t1
    at_zero = float(alignment_loss([(Diff, 0.0)]))
    assert at_zero == pytest.approx(-0.33, abs=1e-12)
    for s in (0.001, 0.2, 1.0):
        assert float(alignment_loss([(Diff, s)])) > at_zero


def test_alignment_threshold_validation():
    with pytest.raises(ValueError):
        alignment_loss([(Id, 0.5)], t1=0.7, t2=0.3)
    with pytest.raises(ValueError):
        alignment_loss([(Id, 0.5)], t1=0.0, t2=0.5)


def test_alignment_hinged_variant():
    # Hinged clamps each term at zero: an Id pair already above t2 only
    # keeps the (1 - s) pull.
    got = float(alignment_loss([(Id, 0.9)], hinged=True))
    assert got == max(0.0, 0.66 - 0.9) + max(0.0, 1.0 - 0.9)
    got = float(alignment_loss([(Diff, 0.2)], hinged=True))
    assert got == max(0.0, 0.2 - 0.33) + 0.2


# ---------------------------------------------------------------------------
# total_loss


def test_total_loss_addition():
    assert float(total_loss(0.2, -0.14)) == 0.2 + -0.14
    assert float(total_loss(0.0, 0.0)) == 0.0


def test_total_loss_gradient_linearity():
    s = torch.tensor([0.4, 0.7], dtype=torch.float64, requires_grad=True)
    trip = triplet_loss(
        [AnchorNeighborhood("a", 1.0 - s[:1], 1.0 - s[1:], [0.9])]
    )
    align = alignment_loss([(Id, s[0]), (Diff, s[1])])
    total = total_loss(trip, align)
    g_total = torch.autograd.grad(total, s, retain_graph=True)[0]
    g_trip = torch.autograd.grad(trip, s, retain_graph=True, allow_unused=True)[0]
    g_align = torch.autograd.grad(align, s, allow_unused=True)[0]
    combined = (g_trip if g_trip is not None else 0) + (
        g_align if g_align is not None else 0
    )
    assert torch.allclose(g_total, combined, atol=0, rtol=0)


# ---------------------------------------------------------------------------
# analytic gradients vs central finite differences


def _fd_grad(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat = x.flatten()
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        grad.flatten()[i] = (up - down) / (2 * h)
    return grad


def _rel_close(a: torch.Tensor, b: torch.Tensor, rtol: float = 1e-3) -> bool:
    denom = torch.maximum(
        torch.maximum(a.abs(), b.abs()), torch.tensor(1e-8, dtype=a.dtype)
    )
    return bool(((a - b).abs() / denom <= rtol).all())


def _away_from_kinks(d_id, d_sim, d_diff, margins, eps=1e-2):
    did, dsmin, dsmax, ddmin = ref_mined(d_id, d_sim, d_diff)
    args = []
    if did is not None and dsmin is not None:
        args.append(did - dsmin + margins.alpha1)
    if dsmax is not None and ddmin is not None:
        args.append(dsmax - ddmin + margins.alpha2)
    if did is not None and ddmin is not None:
        args.append(did - ddmin + margins.alpha3)
    if any(abs(a) <= eps for a in args):
        return False
    # mining max/min must also be unambiguous under the FD step
    for vals in (d_id, d_sim, d_diff):
        su = sorted(vals)
        if any(b - a <= eps for a, b in zip(su, su[1:])):
            return False
    return True


def test_triplet_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    margins = Margins()
    checked = 0
    while checked < 100:
        sizes = rng.integers(0, 4, size=3)
        if sizes.sum() == 0:
            continue
        d_id, d_sim, d_diff = (
            sorted(rng.uniform(0.02, 0.98, n)) for n in sizes
        )
        if not _away_from_kinks(d_id, d_sim, d_diff, margins):
            continue
        values = torch.tensor(
            d_id + d_sim + d_diff, dtype=torch.float64, requires_grad=True
        )
        n1, n2 = len(d_id), len(d_id) + len(d_sim)

        def loss_of(v):
            return triplet_loss(
                [AnchorNeighborhood("a", v[:n1], v[n1:n2], v[n2:])],
                margins,
            )

        loss = loss_of(values)
        if loss.grad_fn is None:  # no active term touches the inputs
            analytic = torch.zeros_like(values)
        else:
            analytic = torch.autograd.grad(
                loss, values, allow_unused=True
            )[0]
            if analytic is None:
                analytic = torch.zeros_like(values)
        with torch.no_grad():
            fd = _fd_grad(loss_of, values.detach().clone())
        assert _rel_close(analytic, fd), (d_id, d_sim, d_diff)
        checked += 1


def test_alignment_gradients_match_finite_differences():
    rng = np.random.default_rng(29)
    labels = [Id, Diff, Sim]
    for _ in range(100):
        n = int(rng.integers(1, 6))
        chosen = [labels[i] for i in rng.integers(0, 3, n)]
        s = torch.tensor(
            rng.uniform(0.05, 0.95, n), dtype=torch.float64, requires_grad=True
        )

        def loss_of(v):
            return alignment_loss(list(zip(chosen, v)))

        loss = loss_of(s)
        if loss.grad_fn is None:
            analytic = torch.zeros_like(s)
        else:
            analytic = torch.autograd.grad(loss, s, allow_unused=True)[0]
            if analytic is None:
                analytic = torch.zeros_like(s)
        with torch.no_grad():
            fd = _fd_grad(loss_of, s.detach().clone())
        assert _rel_close(analytic, fd)
