"""IoU metric, instance association, and the unknown-class protocol."""

import numpy as np
import pytest

from doppel.evaluator import (
    PairConfusion,
    UniverseMismatchError,
    associate_instances,
    evaluate_predicted_instances,
    iou_from_confusion,
    pair_iou,
)
from doppel.types import PairLabel

Id, Sim, Diff, Unk = (
    PairLabel.IDENTICAL,
    PairLabel.SIMILAR,
    PairLabel.DIFFERENT,
    PairLabel.UNKNOWN,
)


# ---------------------------------------------------------------------------
# pair_iou


def test_pair_iou_worked_example():
    gt = {"p1": Id, "p2": Sim, "p3": Diff}
    pred = {"p1": Id, "p2": Diff, "p3": Diff}
    report = pair_iou(gt, pred)
    assert report.iou_id == 1.0
    assert report.iou_sim == 0.0
    assert report.iou_diff == 0.5  # intersection {p3}, union {p2, p3}
    assert report.overall == pytest.approx(0.5)
    assert report.n_pairs == 3


def test_pair_iou_perfect():
    gt = {"a": Id, "b": Sim, "c": Diff, "d": Diff}
    report = pair_iou(gt, dict(gt))
    assert (report.iou_id, report.iou_sim, report.iou_diff) == (1.0, 1.0, 1.0)
    assert report.overall == 1.0
    assert report.empty_classes == ()


def test_pair_iou_universe_mismatch():
    with pytest.raises(UniverseMismatchError):
        pair_iou({"a": Id}, {"b": Id})
    with pytest.raises(UniverseMismatchError):
        pair_iou({"a": Id, "b": Sim}, {"a": Id})


def test_pair_iou_empty_class_convention():
    gt = {"a": Id, "b": Id}
    pred = {"a": Id, "b": Id}
    report = pair_iou(gt, pred)
    assert report.iou_sim == 1.0 and report.iou_diff == 1.0
    assert set(report.empty_classes) == {"similar", "different"}


def _confusion_for_per_class_iou():
    """Synthetic confusion reproducing the published per-class IoUs.

    Per class c: intersection a_c, union u_c, with the slack pairs sent
    to predicted-unknown so they count in exactly one union.
    Id: 13/20 = 0.65, Sim: 9/50 = 0.18, Diff: 13/20 = 0.65.
    """
    c = PairConfusion()
    c.add(Id, Id, 13)
    c.add(Id, Unk, 7)
    c.add(Sim, Sim, 9)
    c.add(Sim, Unk, 41)
    c.add(Diff, Diff, 13)
    c.add(Diff, Unk, 7)
    return c


def test_overall_matches_published_macro_mean():
    report = iou_from_confusion(_confusion_for_per_class_iou())
    assert report.iou_id == pytest.approx(0.65, abs=1e-12)
    assert report.iou_sim == pytest.approx(0.18, abs=1e-12)
    assert report.iou_diff == pytest.approx(0.65, abs=1e-12)
    assert report.overall == pytest.approx(0.49, abs=0.005)


def test_overall_matches_published_macro_mean_second_row():
    # 0.06, 0.13, 0.47 -> 0.22
    c = PairConfusion()
    c.add(Id, Id, 6)
    c.add(Id, Unk, 94)
    c.add(Sim, Sim, 13)
    c.add(Sim, Unk, 87)
    c.add(Diff, Diff, 47)
    c.add(Diff, Unk, 53)
    report = iou_from_confusion(c)
    assert (report.iou_id, report.iou_sim, report.iou_diff) == (0.06, 0.13, 0.47)
    assert report.overall == pytest.approx(0.22, abs=0.005)


def brute_force_iou(gt, pred):
    out = {}
    for cls in (Id, Sim, Diff):
        inter = sum(1 for k in gt if gt[k] is cls and pred[k] is cls)
        union = sum(1 for k in gt if gt[k] is cls or pred[k] is cls)
        out[cls] = inter / union if union else 1.0
    return out


def test_pair_iou_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    labels = [Id, Sim, Diff, Unk]
    for _ in range(25):
        n = int(rng.integers(1, 10_000))
        keys = [f"p{i}" for i in range(n)]
        gt = {k: labels[i] for k, i in zip(keys, rng.integers(0, 3, n))}
        pred = {k: labels[i] for k, i in zip(keys, rng.integers(0, 4, n))}
        report = pair_iou(gt, pred)
        want = brute_force_iou(gt, pred)
        assert report.iou_id == pytest.approx(want[Id])
        assert report.iou_sim == pytest.approx(want[Sim])
        assert report.iou_diff == pytest.approx(want[Diff])
        assert report.overall == pytest.approx(
            (want[Id] + want[Sim] + want[Diff]) / 3
        )


def test_pair_iou_permutation_invariant():
    rng = np.random.default_rng(11)
    keys = [f"p{i}" for i in range(50)]
    labels = [Id, Sim, Diff]
    gt = {k: labels[i] for k, i in zip(keys, rng.integers(0, 3, 50))}
    pred = {k: labels[i] for k, i in zip(keys, rng.integers(0, 3, 50))}
    base = pair_iou(gt, pred)
    shuffled = list(keys)
    rng.shuffle(shuffled)
    assert pair_iou({k: gt[k] for k in shuffled},
                    {k: pred[k] for k in shuffled}) == base


# ---------------------------------------------------------------------------
# associate_instances


def test_associate_simple():
    assoc = associate_instances(np.array([[0.9, 0.1], [0.2, 0.6]]))
    assert assoc.pred_to_gt == {0: 0, 1: 1}
    assert assoc.unmatched_gt == ()


def test_associate_below_threshold():
    assoc = associate_instances(np.array([[0.4]]))
    assert assoc.pred_to_gt == {}
    assert assoc.unmatched_gt == (0,)
    assert assoc.unmatched_pred == (0,)


def test_associate_greedy_conflict():
    # 0.9 claims (p0, g0); p1's only leftover is g1 at 0.1 < 0.5
    assoc = associate_instances(np.array([[0.9, 0.8], [0.85, 0.1]]))
    assert assoc.pred_to_gt == {0: 0}
    assert assoc.unmatched_gt == (1,)
    assert assoc.unmatched_pred == (1,)


def test_associate_one_to_one_and_thresholded():
    rng = np.random.default_rng(3)
    for _ in range(50):
        overlaps = rng.uniform(0, 1, size=(rng.integers(1, 8), rng.integers(1, 8)))
        assoc = associate_instances(overlaps)
        gts = list(assoc.pred_to_gt.values())
        assert len(gts) == len(set(gts))
        for p, g in assoc.pred_to_gt.items():
            assert overlaps[p, g] >= 0.5


def test_associate_optimal_flag():
    # Greedy picks 0.9 then leaves p1 unmatched; optimal pairs 0.8 + 0.85.
    overlaps = np.array([[0.9, 0.8], [0.85, 0.1]])
    greedy = associate_instances(overlaps)
    optimal = associate_instances(overlaps, optimal=True)
    assert greedy.pred_to_gt == {0: 0}
    assert optimal.pred_to_gt == {0: 1, 1: 0}


# ---------------------------------------------------------------------------
# evaluate_predicted_instances


def test_predicted_instances_perfect():
    gt = {("a", "b"): Id, ("a", "c"): Sim, ("b", "c"): Diff}
    pred = {("pa", "pb"): Id, ("pa", "pc"): Sim, ("pb", "pc"): Diff}
    mapping = {"a": "pa", "b": "pb", "c": "pc"}
    report = evaluate_predicted_instances(gt, pred, mapping)
    assert report.overall == 1.0


def test_predicted_instances_unknown_accounting():
    # Three GT pairs, one per class; the Id pair loses a member to a failed
    # association. iou_id = 0/1, others 1 -> overall 2/3.
    gt = {("a", "b"): Id, ("c", "d"): Sim, ("e", "f"): Diff}
    pred = {("pc", "pd"): Sim, ("pe", "pf"): Diff}
    mapping = {"a": "pa", "c": "pc", "d": "pd", "e": "pe", "f": "pf"}  # b missing
    report = evaluate_predicted_instances(gt, pred, mapping)
    assert report.iou_id == 0.0
    assert report.iou_sim == 1.0
    assert report.iou_diff == 1.0
    assert report.overall == pytest.approx(2 / 3)


def test_predicted_instances_empty_mapping():
    gt = {("a", "b"): Id, ("c", "d"): Sim, ("e", "f"): Diff}
    report = evaluate_predicted_instances(gt, {}, {})
    assert (report.iou_id, report.iou_sim, report.iou_diff) == (0.0, 0.0, 0.0)


def test_predicted_instances_extra_predictions_ignored():
    gt = {("a", "b"): Id}
    pred = {("pa", "pb"): Id, ("px", "py"): Diff}
    mapping = {"a": "pa", "b": "pb"}
    report = evaluate_predicted_instances(gt, pred, mapping)
    assert report.iou_id == 1.0
    assert report.n_pairs == 1
