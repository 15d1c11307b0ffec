import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbmil import evaluation as ev
from oracles import concordance, diagonal_curve


# ---------------------------------------------------------------- ROC

def test_perfect_separation():
    c = ev.roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert ((c.sensitivity == 1) & (c.specificity == 1)).any()
    assert ev.auroc(c) == 1.0
    assert ev.pauc_ratio(c) == 1.0
    assert ev.specificity_at_sensitivity(c) == 1.0


def test_all_equal_scores_degenerate():
    c = ev.roc_curve([0.5] * 4, [1, 0, 1, 0])
    pts = sorted(set(zip(c.sensitivity.tolist(), c.specificity.tolist())))
    assert pts == [(0.0, 1.0), (1.0, 0.0)]
    assert ev.auroc(c) == 0.5


def test_single_class_names_missing():
    with pytest.raises(ValueError, match="negative"):
        ev.roc_curve([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError, match="positive"):
        ev.roc_curve([0.1, 0.2], [0, 0])


def test_auroc_hand_case():
    assert ev.auroc(ev.roc_curve([0.9, 0.8, 0.3, 0.1], [1, 0, 1, 0])) == pytest.approx(0.75, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_roc_matches_brute_force_sweep(seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 15, 50) / 10
    labels = rng.integers(0, 2, 50)
    labels[:2] = [0, 1]
    c = ev.roc_curve(scores, labels)
    for t, tp, fp in zip(c.thresholds, c.tp, c.fp):
        assert tp == ((scores >= t) & (labels == 1)).sum()
        assert fp == ((scores >= t) & (labels == 0)).sum()
    assert set(c.thresholds[1:-1]) == set(scores)
    assert (np.diff(c.sensitivity) <= 0).all() and (np.diff(c.specificity) >= 0).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auroc_equals_concordance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    scores = rng.integers(0, 8, n).astype(float)
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    assert abs(ev.auroc(ev.roc_curve(scores, labels)) - concordance(scores, labels)) <= 1e-12


def test_auroc_chance_level():
    rng = np.random.default_rng(0)
    n = 4000
    a = ev.auroc(ev.roc_curve(rng.random(n), rng.integers(0, 2, n)))
    assert abs(a - 0.5) < 3 / np.sqrt(n)


def test_pauc_and_op_on_diagonal():
    c = diagonal_curve()
    assert abs(ev.pauc_ratio(c) - 0.1) < 1e-9
    assert abs(ev.specificity_at_sensitivity(c, 0.85) - 0.15) < 1e-9
    assert abs(ev.auroc(c) - 0.5) < 1e-12


def test_pauc_zero_specificity_in_band():
    # every positive scores below every negative
    c = ev.roc_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
    assert ev.pauc_ratio(c) == 0.0


def test_op_exact_point_takes_best_specificity():
    # 20 positives; sensitivity 0.85 reached exactly at two operating points
    scores = np.concatenate([np.arange(20) + 10.0, [9.5, 1.0]])
    labels = np.concatenate([np.ones(20), [0, 0]]).astype(int)
    scores[:3] = [0.0, 0.5, 0.6]  # three lowest positives
    c = ev.roc_curve(scores, labels)
    assert ev.specificity_at_sensitivity(c, 0.85) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=40)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    a = ev.roc_curve(scores, labels)
    b = ev.roc_curve(np.exp(3 * scores) + 1, labels)
    assert ev.pauc_ratio(a) == ev.pauc_ratio(b)
    assert ev.specificity_at_sensitivity(a) == ev.specificity_at_sensitivity(b)
    assert ev.auroc(a) == ev.auroc(b)


def test_threshold_at_sensitivity():
    scores = np.arange(20.0)
    labels = np.ones(20, int)
    labels[:5] = 0
    thr = ev.threshold_at_sensitivity(scores, labels, 0.85)
    assert ((scores >= thr) & (labels == 1)).sum() / 15 >= 0.85
    assert ((scores > thr) & (labels == 1)).sum() / 15 < 0.85


# ---------------------------------------------------------------- IoM

def test_iom_hand_cases():
    assert ev.iom((0, 0, 224, 224), (50, 60, 10, 10)) == 1.0
    assert ev.iom((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0
    assert ev.iom((0, 0, 224, 224), (112, 112, 224, 224)) == 12544 / 50176 == 0.25


def test_iom_zero_area_errors():
    with pytest.raises(ValueError):
        ev.iom((0, 0, 0, 5), (0, 0, 5, 5))


@settings(max_examples=80, deadline=None)
@given(r=st.tuples(st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 30), st.integers(1, 30)),
       c=st.tuples(st.integers(-20, 20), st.integers(-20, 20), st.integers(1, 30), st.integers(1, 30)),
       dx=st.integers(-100, 100), dy=st.integers(-100, 100))
def test_iom_symmetry_translation_and_matrix(r, c, dx, dy):
    v = ev.iom(r, c)
    assert 0 <= v <= 1
    assert v == ev.iom(c, r)
    assert v == ev.iom((r[0] + dx, r[1] + dy, r[2], r[3]), (c[0] + dx, c[1] + dy, c[2], c[3]))
    assert ev.iom_matrix(np.array([r]), np.array([c]))[0, 0] == pytest.approx(v, abs=1e-15)


# ---------------------------------------------------------------- FROC

def brute_froc(images, thresholds, iom_thr=0.5):
    rec, fps = [], []
    for t in thresholds:
        found, fp = 0, 0
        for im in images:
            hit = False
            for s, box in zip(im.scores, im.bboxes):
                if s < t:
                    continue
                if any(ev.iom(box, les) >= iom_thr for les in im.lesions):
                    hit = True
                else:
                    fp += 1
            found += hit
        rec.append(found / len(images))
        fps.append(fp / len(images))
    return np.array(rec), np.array(fps)


def hand_images():
    boxes = np.array([[0, 0, 10, 10], [10, 0, 10, 10], [0, 10, 10, 10], [10, 10, 10, 10]])
    return [
        ev.LocalizedImage("a", np.array([0.9, 0.2, 0.1, 0.4]), boxes, np.array([[1, 1, 4, 4]])),
        ev.LocalizedImage("b", np.array([0.3, 0.8, 0.7, 0.1]), boxes, np.array([[2, 12, 5, 5]])),
        ev.LocalizedImage("c", np.array([0.5, 0.5, 0.6, 0.95]), boxes, np.array([[30, 30, 4, 4]])),
    ]


def test_froc_matches_brute_force():
    images = hand_images()
    curve = ev.froc(images)
    rec, fps = brute_froc(images, curve.thresholds)
    np.testing.assert_array_equal(curve.recall, rec)
    np.testing.assert_array_equal(curve.fp_per_image, fps)
    assert curve.recall[0] == pytest.approx(2 / 3)  # image c has no covering region
    assert curve.recall[-1] == 0 and curve.fp_per_image[-1] == 0
    assert (np.diff(curve.recall) <= 0).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_froc_random_vs_brute_force(seed):
    rng = np.random.default_rng(seed)
    images = []
    for j in range(int(rng.integers(1, 5))):
        m = int(rng.integers(1, 8))
        boxes = np.column_stack([rng.integers(0, 40, (m, 2)), np.full((m, 2), 16)])
        lesions = np.column_stack([rng.integers(0, 50, (2, 2)), rng.integers(2, 12, (2, 2))])
        images.append(ev.LocalizedImage(str(j), rng.integers(0, 6, m) / 5, boxes, lesions))
    curve = ev.froc(images)
    rec, fps = brute_froc(images, curve.thresholds)
    np.testing.assert_array_equal(curve.recall, rec)
    np.testing.assert_array_equal(curve.fp_per_image, fps)
    covering = np.mean([im.correct().any() for im in images])
    assert curve.recall[0] == covering


def test_froc_recall_at():
    c = ev.froc(hand_images())
    assert c.recall_at(0.0) == 0.0  # image c's wrong box outranks every hit
    assert c.recall_at(1 / 3) == pytest.approx(1 / 3)
    assert c.recall_at(100) == pytest.approx(2 / 3)


def test_froc_empty_errors():
    with pytest.raises(ValueError):
        ev.froc([])


# ---------------------------------------------------------------- aggregation

def test_mean_std_reference():
    s = ev.mean_std([0.7, 0.7, 0.75, 0.7, 0.75])
    assert s["mean"] == pytest.approx(0.72, abs=1e-12)
    assert s["std"] == pytest.approx(0.0274, abs=5e-5)
    assert ev.mean_std([0.8] * 5)["std"] == 0.0


def test_curve_csv(tmp_path):
    c = ev.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    ev.write_curve_csv(tmp_path / "roc.csv", c.rows())
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,x,y" and len(lines) == len(c.thresholds) + 1
