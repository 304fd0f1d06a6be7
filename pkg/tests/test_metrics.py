import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from etrnlp.metrics import (MetricRecord, MetricStructureError, classification_metrics,
                            cka_matrix, delta_p, dense_metrics, heatmap_text, linear_cka)

from oracles import hsic_cka, prf_loop


def rec(*tasks):
    return MetricRecord.from_lists(tasks)


# ---------------------------------------------------------------------------
# delta_p


def test_delta_p_dense_table_row():
    # segmentation mIoU (higher better) and depth absolute error (lower better)
    base = rec([("miou", 56.57, True)], [("abs_err", 0.0170, False)])
    etr = rec([("miou", 61.22, True)], [("abs_err", 0.0141, False)])
    assert delta_p(etr, base) == pytest.approx(12.6, abs=0.05)


def test_delta_p_attribute_table_row():
    base = rec([("precision", 67.7, True), ("recall", 59.8, True)])
    etr = rec([("precision", 72.0, True), ("recall", 63.6, True)])
    assert delta_p(etr, base) == pytest.approx(6.4, abs=0.1)


def test_delta_p_identity_and_errors():
    r = rec([("a", 3.0, True), ("b", 0.2, False)], [("c", 7.0, True)])
    assert delta_p(r, r) == 0.0
    with pytest.raises(MetricStructureError):
        delta_p(r, rec([("a", 3.0, True)]))
    with pytest.raises(MetricStructureError):
        delta_p(rec([("a", 1.0, True)]), rec([("a", 1.0, False)]))
    with pytest.raises(ZeroDivisionError):
        delta_p(rec([("a", 1.0, True)]), rec([("a", 0.0, True)]))


def test_delta_p_averages_within_then_across_tasks():
    base = rec([("a", 1.0, True), ("b", 1.0, True)], [("c", 1.0, False)])
    m = rec([("a", 1.2, True), ("b", 1.0, True)], [("c", 0.5, False)])
    # task 1: (20 + 0) / 2 = 10; task 2: +50
    assert delta_p(m, base) == pytest.approx(30.0)


def test_record_json_round_trip():
    r = rec([("a", 1.5, True)], [("b", 0.25, False), ("c", 2.0, True)])
    assert MetricRecord.from_json(r.to_json()) == r


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 100), st.booleans()), min_size=1, max_size=6),
       st.integers(0, 2 ** 16))
def test_delta_p_antisymmetric_to_first_order(metrics, seed):
    rng = np.random.default_rng(seed)
    base = rec([(f"m{i}", v, hb) for i, (v, hb) in enumerate(metrics)])
    pert = rec([(f"m{i}", v * (1 + 1e-3 * rng.uniform(-1, 1)), hb)
                for i, (v, hb) in enumerate(metrics)])
    assert delta_p(base, base) == 0.0
    assert abs(delta_p(pert, base) + delta_p(base, pert)) < 1e-4


# ---------------------------------------------------------------------------
# CKA


def test_cka_self_and_scale():
    x = np.random.default_rng(0).normal(size=(10, 6))
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-9)
    for alpha in (-3.0, 1e-3, 42.0):
        assert linear_cka(x, alpha * x) == pytest.approx(1.0, abs=1e-9)


def test_cka_matches_hsic_oracle():
    rng = np.random.default_rng(7)
    x, y = rng.normal(size=(8, 5)), rng.normal(size=(8, 7))
    assert abs(linear_cka(x, y) - hsic_cka(x, y)) < 1e-10


def test_cka_degenerate_and_errors():
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert linear_cka(x, np.ones((5, 4))) == 0.0
    with pytest.raises(ValueError):
        linear_cka(x, np.ones((4, 3)))


def test_cka_invariant_to_orthogonal_transforms():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(12, 6)), rng.normal(size=(12, 4))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    r, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    base = linear_cka(x, y)
    assert abs(linear_cka(x @ q, y) - base) < 1e-8
    assert abs(linear_cka(x, y @ r) - base) < 1e-8


def test_cka_bounded_on_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        v = linear_cka(rng.normal(size=(n, int(rng.integers(1, 6)))),
                       rng.normal(size=(n, int(rng.integers(1, 6)))))
        assert -1e-12 <= v <= 1 + 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (6, 2), elements=st.floats(-10, 10)))
def test_cka_property_matches_oracle(x, y):
    ours = linear_cka(x, y)
    assert 0.0 <= ours <= 1.0 + 1e-9
    xc, yc = x - x.mean(0), y - y.mean(0)
    # below this scale the oracle's Gram-matrix route loses all precision
    if np.linalg.norm(xc) > 1e-3 and np.linalg.norm(yc) > 1e-3:
        assert abs(ours - hsic_cka(x, y)) < 1e-6


def test_cka_survives_subnormal_residuals():
    x = np.full((6, 3), 1.29292644e-297)
    x[0, 0] *= 1.0 + 2 ** -52
    y = np.full((6, 2), 1.29292644e-297)
    y[1, 1] *= 1.0 - 2 ** -52
    v = linear_cka(x, y)
    assert np.isfinite(v) and 0.0 <= v <= 1.0 + 1e-9


def test_cka_matrix_is_symmetric_with_unit_diagonal():
    rng = np.random.default_rng(0)
    samples = [rng.normal(size=(6, 4)) for _ in range(4)]
    m = cka_matrix(samples)
    assert np.array_equal(np.diag(m), np.ones(4))
    assert np.max(np.abs(m - m.T)) < 1e-9
    assert m[0, 1] == pytest.approx(linear_cka(samples[1], samples[0]), abs=1e-12)


def test_heatmap_text_layout():
    text = heatmap_text(np.array([[1.0, 0.25], [0.25, 1.0]]), ["a", "b"])
    lines = text.splitlines()
    assert len(lines) == 3 and "0.250" in lines[1] and lines[2].startswith("b ")


# ---------------------------------------------------------------------------
# classification


def _logits(pred):
    return np.where(pred, 2.0, -2.0)


def test_perfect_predictions():
    labels = np.array([[1, 0], [0, 1], [1, 1]])
    m = classification_metrics(_logits(labels > 0), labels)
    assert np.array_equal(m["f"], [1, 1]) and m["macro_f"] == 1.0
    assert m["macro_precision"] == m["macro_recall"] == 1.0


def test_all_negative_predictions():
    labels = np.array([[1], [0], [1]])
    m = classification_metrics(np.full((3, 1), -5.0), labels)
    assert (m["precision"][0], m["recall"][0], m["f"][0]) == (0.0, 0.0, 0.0)


def test_handcrafted_two_task_case():
    # task 1: TP=2 FP=1 FN=2 (recall 1/2); task 2: TP=3 FP=0 FN=3
    pred = np.zeros((8, 2), bool)
    truth = np.zeros((8, 2), bool)
    pred[[0, 1, 2], 0] = True
    truth[[0, 1, 3, 4], 0] = True
    pred[[0, 1, 2], 1] = True
    truth[:6, 1] = True
    m = classification_metrics(_logits(pred), truth.astype(float))
    np.testing.assert_allclose(m["precision"], [2 / 3, 1.0])
    np.testing.assert_allclose(m["recall"], [0.5, 0.5])
    np.testing.assert_allclose(m["f"], [4 / 7, 2 / 3])
    assert m["f"][0] == pytest.approx(0.571, abs=5e-4) and m["f"][1] == pytest.approx(0.667, abs=5e-4)
    assert m["macro_f"] == pytest.approx(0.619, abs=5e-4)


def test_macro_f_is_mean_of_task_f_not_f_of_means():
    pred = np.array([[1, 1], [1, 0], [0, 0], [0, 0]], bool)
    truth = np.array([[1, 1], [0, 1], [0, 1], [1, 1]], bool)
    m = classification_metrics(_logits(pred), truth)
    mp, mr = m["macro_precision"], m["macro_recall"]
    assert m["macro_f"] == pytest.approx(np.mean(m["f"]))
    assert m["macro_f"] != pytest.approx(2 * mp * mr / (mp + mr))


def test_threshold_is_strict_half():
    m = classification_metrics(np.array([[0.0], [1e-9]]), np.array([[1], [1]]))
    assert m["recall"][0] == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 2 ** 16))
def test_classification_matches_loop_oracle(n, t, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, t))
    labels = rng.integers(0, 2, size=(n, t))
    m = classification_metrics(logits, labels)
    ref = prf_loop(logits > 0, labels > 0)
    np.testing.assert_allclose(m["precision"], [r[0] for r in ref])
    np.testing.assert_allclose(m["recall"], [r[1] for r in ref])
    np.testing.assert_allclose(m["f"], [r[2] for r in ref])
    assert m["macro_f"] == pytest.approx(sum(r[2] for r in ref) / t)


# ---------------------------------------------------------------------------
# dense


def test_dense_exact_prediction():
    rng = np.random.default_rng(0)
    seg = rng.random((3, 4, 4)) > 0.5
    depth = rng.uniform(0.5, 1.0, (4, 4))
    m = dense_metrics(seg, seg, depth, depth)
    assert m["miou"] == 1.0 and m["pixel_acc"] == 1.0 and m["abs_err"] == m["rel_err"] == 0.0


def test_dense_disjoint_and_empty():
    a = np.zeros((2, 2, 2), bool)
    b = np.zeros((2, 2, 2), bool)
    a[0, 0, 0] = True
    b[0, 1, 1] = True
    m = dense_metrics(a, b, np.ones((2, 2)), np.ones((2, 2)))
    assert m["iou"].tolist() == [0.0, 1.0]


def test_dense_hand_example():
    pred = np.zeros((1, 2, 2), bool)
    gt = np.zeros((1, 2, 2), bool)
    pred[0, 0, 0] = True
    gt[0, 0, 0] = gt[0, 0, 1] = True
    d = np.array([[1.0, 2.0], [0.5, 4.0]])
    m = dense_metrics(pred, gt, d * 1.1, d)
    assert m["miou"] == 0.5
    assert m["rel_err"] == pytest.approx(0.1)
    assert m["abs_err"] == pytest.approx(0.1 * d.mean())
    assert m["pixel_acc"] == 0.75


def test_dense_errors():
    with pytest.raises(ValueError):
        dense_metrics(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)), np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        dense_metrics(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.ones((2, 2)),
                      np.array([[1.0, 0.0], [1.0, 1.0]]))
