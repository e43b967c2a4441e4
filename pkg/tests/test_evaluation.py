import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import count_detections
from posegraph import evaluation
from posegraph.data import Annotation
from posegraph.evaluation import EvalError


def ann(joints, height=10.0, visible=None, image_id=""):
    return Annotation(np.asarray(joints, float), (0.0, 0.0, 5.0, height), visible, image_id=image_id)


def test_perfect_predictions():
    anns = [ann(np.random.default_rng(i).uniform(0, 30, (3, 2)), image_id=str(i)) for i in range(4)]
    curve = evaluation.detection_rate([a.joints for a in anns], anns)
    assert np.all(curve.rates == 1.0)


def test_single_image_step_at_half():
    a = ann([[10.0, 10.0]], height=8.0)
    pred = [np.array([[10.0, 14.0]])]  # error 4 = 0.5 torso heights
    curve = evaluation.detection_rate(pred, [a], radii=[0.0, 0.45, 0.4999, 0.5, 0.55])
    assert curve.rates[0].tolist() == [0.0, 0.0, 0.0, 1.0, 1.0]


def test_four_images_counting():
    errs = [0.1, 0.2, 0.4, 0.8]
    anns = [ann([[0.0, 0.0]], height=10.0) for _ in errs]
    preds = [np.array([[10.0 * e, 0.0]]) for e in errs]
    assert evaluation.detection_rate(preds, anns, radii=[0.25]).rate_at(0.25) == 0.5


def test_invisible_joints_excluded():
    anns = [ann([[0, 0], [0, 0]], visible=[True, False]), ann([[0, 0], [0, 0]], visible=[True, True])]
    preds = [np.array([[0, 0], [100, 100]]), np.array([[100, 100], [0, 0]])]
    curve = evaluation.detection_rate(preds, anns, radii=[0.1])
    np.testing.assert_array_equal(curve.rates[:, 0], [0.5, 1.0])
    assert curve.counts.tolist() == [2, 1]


def test_mapping_by_id_and_mismatch():
    anns = [ann([[1, 1]], image_id="a"), ann([[2, 2]], image_id="b")]
    curve = evaluation.detection_rate({"b": [[2, 2]], "a": [[1, 1]]}, anns, radii=[0.0])
    assert curve.rates[0, 0] == 1.0
    with pytest.raises(EvalError, match="'b'"):
        evaluation.detection_rate({"a": [[1, 1]], "c": [[2, 2]]}, anns)
    with pytest.raises(EvalError):
        evaluation.detection_rate([[[1, 1]]], anns)


def random_set(rng):
    n, j = rng.integers(1, 12), rng.integers(1, 6)
    anns, preds = [], []
    for i in range(n):
        gt = rng.uniform(0, 64, (j, 2))
        h = rng.uniform(2, 20)
        vis = rng.random(j) > 0.25
        anns.append(ann(gt, height=h, visible=vis, image_id=str(i)))
        preds.append(gt + rng.normal(0, rng.uniform(0.5, 8), (j, 2)))
    return anns, preds


@pytest.mark.parametrize("seed", range(100))
def test_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    anns, preds = random_set(rng)
    radii = np.round(np.arange(0, 0.55, 0.05), 2)
    curve = evaluation.detection_rate(preds, anns, radii)
    errors = [[float(np.hypot(*(p[j] - a.joints[j]))) / a.torso_height for j in range(len(a.joints))] for a, p in zip(anns, preds)]
    vis = [a.visible.tolist() for a in anns]
    for ri, r in enumerate(radii):
        expect = count_detections(errors, vis, r)
        np.testing.assert_array_equal(curve.rates[:, ri], expect)
    finite = curve.rates[~np.isnan(curve.rates[:, 0])]
    assert np.all(np.diff(finite, axis=1) >= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_scale_invariance(seed, s):
    rng = np.random.default_rng(seed)
    anns, preds = random_set(rng)
    scaled = [Annotation(a.joints * s, tuple(np.array(a.torso_box) * s), a.visible, image_id=a.image_id) for a in anns]
    radii = [0.05, 0.1, 0.25, 0.5]
    a = evaluation.detection_rate(preds, anns, radii).rates
    b = evaluation.detection_rate([p * s for p in preds], scaled, radii).rates
    # identical up to ties within rounding distance of a radius
    assert np.nanmax(np.abs(a - b), initial=0.0) <= 1.0 / len(anns) + 1e-12
    errs = np.array([np.linalg.norm(p - x.joints, axis=1) / x.torso_height for p, x in zip(preds, anns)])
    if np.all(np.abs(errs[:, :, None] - np.array(radii)) > 1e-9):
        np.testing.assert_array_equal(a, b)


def test_full_radius_is_one():
    rng = np.random.default_rng(1)
    anns, preds = random_set(rng)
    curve = evaluation.detection_rate(preds, anns, radii=[np.inf])
    assert np.all(curve.rates[~np.isnan(curve.rates)] == 1.0)


def test_emit_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    anns, preds = random_set(rng)
    curve = evaluation.detection_rate(preds, anns, evaluation.DEFAULT_RADII, model_tag="unified")
    path = tmp_path / "c.csv"
    evaluation.emit_curves(curve, path)
    back = evaluation.read_curves(path)
    np.testing.assert_array_equal(back.radii, curve.radii)
    np.testing.assert_array_equal(back.rates, curve.rates)
    assert back.model_tag == "unified"
    rows = path.read_text().splitlines()
    assert rows[0] == "radius,joint,rate,model_tag"
    assert len(rows) == 1 + len(curve.radii) * curve.rates.shape[0]


def test_emit_empty_and_single(tmp_path):
    empty = evaluation.DetectionCurve(np.array([]), np.zeros((2, 0)), ("a", "b"))
    evaluation.emit_curves(empty, tmp_path / "e.csv", "x")
    assert (tmp_path / "e.csv").read_text().splitlines() == ["radius,joint,rate,model_tag"]
    one = evaluation.DetectionCurve(np.array([0.25]), np.array([[0.5]]), ("head",))
    evaluation.emit_curves(one, tmp_path / "o.csv", "det")
    assert (tmp_path / "o.csv").read_text().splitlines()[1] == "0.25,head,0.5,det"


def test_emit_unwritable(tmp_path):
    curve = evaluation.DetectionCurve(np.array([0.1]), np.array([[1.0]]))
    with pytest.raises(EvalError):
        evaluation.emit_curves(curve, tmp_path / "missing" / "c.csv")
