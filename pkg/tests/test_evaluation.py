import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facetree.data import MeanShape, from_fractions, synthetic_dataset
from facetree.evaluation import (EvalReport, ProtocolError, afw_mask, ced_curve, decode_keypoints, heatmap_argmax,
                                 nme, pose_metrics, round_to_step, run_protocol, split_indices, yaw_bin)
from facetree.model import FaceTreeNet


def test_nme_cases():
    gt = np.array([[10.0, 10.0], [20.0, 20.0]])
    assert nme(gt, gt, [1, 1], 50) == 0.0
    pred = gt + np.array([[1.0, 0.0], [0.0, 3.0]])
    assert nme(pred, gt, [1, 1], 100) == pytest.approx(0.02)
    assert nme(pred, gt, [0, 1], 100) == pytest.approx(0.03)
    with pytest.warns(UserWarning):
        assert math.isnan(nme(pred, gt, [0, 0], 100))
    with pytest.raises(ValueError):
        nme(pred, gt, [1, 1], 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_nme_oracle_and_invariances(seed):
    r = np.random.default_rng(seed)
    L = int(r.integers(2, 22))
    gt, pred = r.uniform(0, 200, (L, 2)), r.uniform(0, 200, (L, 2))
    vis = r.integers(0, 2, L)
    vis[0] = 1
    size = r.uniform(20, 200)
    ref = sum(math.hypot(*(pred[i] - gt[i])) for i in range(L) if vis[i]) / vis.sum() / size
    assert nme(pred, gt, vis, size) == pytest.approx(ref, rel=1e-12)
    shift = r.normal(size=2) * 50
    assert nme(pred + shift, gt + shift, vis, size) == pytest.approx(ref, rel=1e-9)
    assert nme(pred, gt, vis, 2 * size) == pytest.approx(ref / 2, rel=1e-12)


def test_ced_cases():
    curve = dict(ced_curve([0.02, 0.04, 0.06], [0.0, 0.01, 0.05, 1.0]))
    assert curve[0.05] == pytest.approx(2 / 3)
    assert curve[0.01] == 0.0 and curve[1.0] == 1.0
    assert dict(ced_curve([0.05, math.nan], [0.05]))[0.05] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_ced_monotone_and_bounded(errors):
    fr = [f for _, f in ced_curve(errors, np.linspace(-0.1, 1.1, 50))]
    assert fr[0] == 0.0 and fr[-1] == 1.0
    assert all(0 <= a <= b <= 1 for a, b in zip(fr, fr[1:]))


def test_pose_rounding_and_accuracy():
    assert list(round_to_step([17.0, 20.0, -22.5, 7.4, 7.5])) == [15.0, 15.0, -30.0, 0.0, 15.0]
    mae, acc = pose_metrics([[20.0, 0, 0]], [[0.0, 0, 0]])
    assert mae[0] == 20.0 and acc[0] == 1.0
    mae, acc = pose_metrics([[5.0, 1, 2]], [[5.0, 1, 2]])
    assert np.all(mae == 0) and np.all(acc == 1)
    _, acc = pose_metrics([[40.0, 0, 0]], [[0.0, 0, 0]])
    assert acc[0] == 0.0


def test_yaw_bins():
    assert yaw_bin(45) == "[30,60]" and yaw_bin(-45) == "[30,60]"
    assert yaw_bin(0) == "[0,30]" and yaw_bin(29.99) == "[0,30]"
    assert yaw_bin(30) == "[30,60]" and yaw_bin(90) == "[60,90]"
    assert yaw_bin(95) is None


def test_afw_filter():
    boxes = np.array([[0, 0, 140, 200], [0, 0, 151, 160], [0, 0, 200, 150], [5, 5, 300, 300]])
    assert list(afw_mask(boxes)) == [False, True, False, True]


def test_split_is_deterministic():
    a = split_indices(100, 10, 3)
    b = split_indices(100, 10, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert len(a[1]) == 10 and set(a[0]).isdisjoint(a[1]) and len(a[0]) + len(a[1]) == 100
    assert not np.array_equal(split_indices(100, 10, 4)[1], a[1])
    with pytest.raises(ValueError):
        split_indices(5, 6, 0)


def test_heatmap_single_peak():
    logits = np.zeros((1, 4, 32, 32))
    logits[0, 2, 20, 10] = 1.0
    pts = heatmap_argmax(logits, 3)
    assert tuple(pts[0, 2]) == (10.0, 20.0)


def test_regression_zero_output_is_mean_shape():
    mean = MeanShape(np.linspace(0.2, 0.8, 10))
    pts, _ = decode_keypoints({"coords": np.zeros((2, 10))}, mean, "regression", 64, 5)
    np.testing.assert_allclose(pts[0], from_fractions(mean.coords, 64))
    with pytest.raises(ValueError):
        decode_keypoints({"coords": np.zeros((1, 10))}, None, "regression", 64, 5)
    with pytest.raises(ValueError):
        decode_keypoints({}, mean, "bogus", 64, 5)


def test_report_mean_matches_per_sample():
    errs = np.array([0.01, 0.03, math.nan])
    rep = EvalReport("full", errs, ced_curve(errs))
    assert rep.mean_nme == pytest.approx(0.02)
    assert "mean_nme_percent = 2.0000" in rep.to_text()
    assert rep.ced_csv().startswith("threshold,fraction\n")


def test_run_protocol(tiny_config):
    data = synthetic_dataset(6, tiny_config, 0)
    net = FaceTreeNet(tiny_config, seed=0)
    from facetree.training import dataset_mean_shape
    ms = dataset_mean_shape(data, 16)
    a = run_protocol(net, data, "pifa", ms)
    b = run_protocol(net, data, "PIFA", ms)
    assert np.array_equal(a.per_sample_nme, b.per_sample_nme)
    assert set(a.bins) == {"[0,30]", "[30,60]", "[60,90]"}
    assert a.pose_mae.shape == (3,)
    h = run_protocol(net, data, "full", ms, mode="heatmap")
    assert h.count == 6 and np.isfinite(h.mean_nme)
    # synthetic boxes are small: nothing survives the AFW size filter
    assert run_protocol(net, data, "afw", ms).count == 0
    data.poses[:] = np.nan
    with pytest.raises(ProtocolError):
        run_protocol(net, data, "pifa", ms)
    with pytest.raises(ProtocolError):
        run_protocol(net, data, "lfw", ms)
