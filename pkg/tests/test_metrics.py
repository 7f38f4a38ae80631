import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from forgeloc import metrics as M


def brute_force(pred, gt):
    """Per-pixel loop, written independently of the module."""
    tp = fp = fn = tn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    iou_e = 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)
    iou_a = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    if tp + fp + fn == 0:
        f = 1.0
    elif tp == 0:
        f = 0.0
    else:
        f = 2 * tp / (2 * tp + fp + fn)
    return (iou_e + iou_a) / 2, f


def test_hand_case_half_overlap():
    gt = np.zeros((4, 4), np.uint8)
    gt[:2] = 1
    pred = np.zeros_like(gt)
    pred[:, :2] = 1
    c = M.confusion(pred, gt)
    assert (c.tp, c.fp, c.fn, c.tn) == (4, 4, 4, 4)
    assert M.miou(c) == pytest.approx(1 / 3)
    assert M.f1(c) == pytest.approx(0.5)


def test_perfect_and_inverted():
    gt = np.eye(5, dtype=np.uint8)
    assert M.miou(M.confusion(gt, gt)) == 1.0
    assert M.f1(M.confusion(gt, gt)) == 1.0
    inv = M.confusion(1 - gt, gt)
    assert M.miou(inv) == 0.0 and M.f1(inv) == 0.0


def test_empty_conventions():
    z = np.zeros((3, 3), np.uint8)
    c = M.confusion(z, z)
    assert M.class_ious(c) == (1.0, 1.0) and M.f1(c) == 1.0
    # predicting edits on a clean image
    c = M.confusion(np.ones_like(z), z)
    assert M.class_ious(c) == (0.0, 0.0) and M.f1(c) == 0.0
    assert M.precision_recall(c) == (0.0, 1.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        M.confusion(np.zeros((2, 2)), np.zeros((3, 3)))


@given(arrays(np.uint8, (16, 16), elements=st.integers(0, 1)), arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
@settings(max_examples=200, deadline=None)
def test_matches_brute_force(pred, gt):
    c = M.confusion(pred, gt)
    m, f = brute_force(pred, gt)
    assert abs(M.miou(c) - m) < 1e-12
    assert abs(M.f1(c) - f) < 1e-12


@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 1)), arrays(np.uint8, (8, 8), elements=st.integers(0, 1)))
@settings(max_examples=100, deadline=None)
def test_properties(pred, gt):
    c = M.confusion(pred, gt)
    assert c.total == 64
    assert 0.0 <= M.miou(c) <= 1.0 and 0.0 <= M.f1(c) <= 1.0
    # swapping both class labels swaps the two IoUs
    e, a = M.class_ious(c)
    e2, a2 = M.class_ious(M.confusion(1 - pred, 1 - gt))
    assert (e, a) == (a2, e2)
    # F1 is symmetric in pred and gt
    assert M.f1(c) == pytest.approx(M.f1(M.confusion(gt, pred)))


def test_evaluate_split_per_image_vs_pooled():
    gts = {"a": np.array([[1, 0], [0, 0]]), "b": np.zeros((2, 2), int)}
    preds = {"a": np.array([[1, 0], [0, 0]]), "b": np.array([[1, 1], [0, 0]])}
    rep = M.evaluate_split(preds, gts, "x")
    assert [m.id for m in rep.per_image] == ["a", "b"]
    # a: perfect (1.0); b: edited IoU 0, authentic 2/4 -> 0.25
    assert rep.aggregate["miou"] == pytest.approx((1.0 + 0.25) / 2)
    pooled = M.evaluate_split(preds, gts, "x", mode="pooled")
    # pooled counts tp=1 fp=2 fn=0 tn=5
    assert pooled.aggregate["miou"] == pytest.approx((1 / 3 + 5 / 7) / 2)
    assert pooled.aggregate["f1"] == pytest.approx(0.5)


def test_evaluate_split_id_mismatch():
    with pytest.raises(M.MissingSampleError):
        M.evaluate_split({"a": np.zeros((2, 2))}, {"a": np.zeros((2, 2)), "b": np.zeros((2, 2))})
    with pytest.raises(ValueError):
        M.evaluate_split({"a": np.zeros((2, 2))}, {"a": np.zeros((2, 2))}, mode="median")


def test_report_to_dict():
    rep = M.evaluate_split({"a": np.ones((2, 2))}, {"a": np.ones((2, 2))}, "seen")
    d = rep.to_dict()
    assert d["split"] == "seen" and d["mode"] == "per-image"
    assert d["per_image"][0]["id"] == "a" and d["aggregate"]["miou"] == 1.0
