"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Criteria 5 and 6 share a single staged training run (module fixture), which
takes a few minutes on one CPU core.
"""

import time

import numpy as np
import pytest

from oracles import count_detections
from posegraph import conv, detector, evaluation, nn, spatial, train
from posegraph.data import Annotation, SyntheticSceneConfig, generate_dataset
from posegraph.detector import DetectorConfig
from posegraph.spatial import JointSet, SpatialModelParams

GRAD_TOL = 1e-4
FFT_TOL = 1e-9
DENSE_TOL = 1e-6
BYPASS_TOL = 1e-10
RADIUS = 0.25
UNIFIED_SLACK = 0.01


# -- 1: gradient suite ----------------------------------------------------------


def _layer_cases(rng):
    return [
        ("conv", nn.ConvLayer(2, 3, 3, pad=1, rng=rng), rng.normal(size=(2, 2, 6, 6))),
        ("conv-valid", nn.ConvLayer(2, 2, 5, rng=rng), rng.normal(size=(1, 2, 7, 8))),
        ("maxpool", nn.MaxPool(), rng.normal(size=(2, 2, 6, 6))),
        ("relueps", nn.ReLUeps(0.01), rng.normal(size=(2, 2, 5, 5)) + 0.5),
        ("softplus", nn.SoftPlusBeta(0.7), rng.normal(size=(2, 2, 5, 5))),
        ("log", nn.LogStage(), rng.uniform(0.1, 2.0, size=(2, 2, 4, 4))),
        ("exp", nn.ExpStage(), rng.normal(size=(2, 2, 4, 4))),
        ("sum", nn.SumStage(2), rng.normal(size=(2, 4, 3, 3))),
        ("upsample", nn.Upsample(2), rng.normal(size=(2, 2, 3, 3))),
        ("lcn", nn.LCN(), rng.normal(size=(2, 1, 10, 11))),
    ]


def _spatial_case(rng, method):
    joints = JointSet(("a", "b", "c", "torso"), (False, False, False, True))
    p = SpatialModelParams(rng.normal(size=(3, 4, 5, 5)), rng.normal(size=(3, 4)), 1.3, 0.01, joints)
    return spatial.SpatialModel(p, method), rng.uniform(0.05, 1.0, size=(2, 4, 7, 7))


def test_criterion1_gradients(record_criterion):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(5):
        rng = np.random.default_rng(seed)
        cases = _layer_cases(rng)
        for method in ("direct", "fft"):
            net, x = _spatial_case(rng, method)
            cases.append((f"spatial-{method}", net, x))
        for name, layer, x in cases:
            if isinstance(layer, nn.ReLUeps):
                x = np.where(np.abs(x - 0.01) < 1e-3, x + 3e-3, x)
            err = nn.grad_check(layer, x, seed=seed, h=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < GRAD_TOL and elapsed < 60
    record_criterion(1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} networks x 5 seeds, {elapsed:.1f}s")
    assert ok, worst


# -- 2: FFT convolution oracle ------------------------------------------------------


def test_criterion2_fft_oracle(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    sizes = [3, 5, 7, 9, 11, 13, 17, 21, 25, 29, 33, 37, 41, 45, 49, 53, 57, 61, 63, 65]
    worst, bigger = 0.0, 0
    for k in sizes:
        h, w = rng.integers(8, 72, size=2)
        x = rng.normal(size=(h, w))
        kern = rng.normal(size=(k, k))
        fits = k <= min(h, w)
        bigger += not fits
        for pad in ("valid", "same", "full") if fits else ("same", "full"):
            diff = np.max(np.abs(conv.conv2d_fft(x, kern, pad) - conv.conv2d_direct(x, kern, pad)))
            worst = max(worst, float(diff))
    elapsed = time.perf_counter() - t0
    ok = worst < FFT_TOL and elapsed < 30 and bigger > 0
    record_criterion(2, ok, f"max abs diff {worst:.2e} over {len(sizes)} cases ({bigger} kernel > input), {elapsed:.1f}s")
    assert ok


# -- 3: dense vs sliding window ---------------------------------------------------------


def test_criterion3_dense_equals_sliding(record_criterion):
    t0 = time.perf_counter()
    cfg = DetectorConfig(num_joints=4, num_banks=1)
    worst = 0.0
    for seed in range(3):
        params = detector.init_params(cfg, seed)
        params["fc2.weight"] *= 10  # make outputs image dependent at a visible scale
        img = np.random.default_rng(100 + seed).uniform(size=(64, 64))
        dense = detector.dense_forward(detector.build_pyramid(img, 1), cfg, params).maps
        slide = detector.sliding_window_forward(img, cfg, params).maps
        assert dense.shape == slide.shape == (4, 16, 16)
        worst = max(worst, float(np.max(np.abs(dense - slide))))
    elapsed = time.perf_counter() - t0
    ok = worst < DENSE_TOL and elapsed < 120
    record_criterion(3, ok, f"max abs diff {worst:.2e} on 64x64, 3 seeds, {elapsed:.1f}s")
    assert ok


# -- 4: bypass mode vs unnormalized MRF product -----------------------------------------


def test_criterion4_bypass_matches_oracle(record_criterion):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        k = (3, 5, 7, 9, 5, 3, 7, 5, 9, 3)[seed]
        p = SpatialModelParams(rng.uniform(0.01, 1.0, size=(3, 3, k, k)), rng.uniform(0.01, 1.0, size=(3, 3)))
        x = rng.uniform(0.0, 1.0, size=(3, 8, 8))
        ours = spatial.spatial_forward(x, p, "direct", bypass=True).maps
        ref = spatial.mrf_oracle(x, p, normalize=False).marginals.maps
        worst = max(worst, float(np.max(np.abs(ours - ref) / np.abs(ref))))
    ok = worst < BYPASS_TOL
    record_criterion(4, ok, f"max rel err {worst:.2e} on 8x8 maps, 3 joints, 10 seeds")
    assert ok


# -- 5 and 6: trained models ------------------------------------------------------------


@pytest.fixture(scope="module")
def acceptance_run():
    scene = SyntheticSceneConfig(num_distractors=2)
    train_set = generate_dataset(scene, 500, seed=1)
    test_set = generate_dataset(scene, 200, seed=2)
    det_cfg = DetectorConfig(num_joints=7, num_banks=2, stages=((5, 8), (5, 16)), fc_features=32)
    scfg = train.SpatialConfig(kernel_size=15)
    tcfg = train.TrainConfig(
        learning_rate=0.03, spatial_learning_rate=0.1, unified_learning_rate=0.001, epochs=(12, 4, 2), radii=(RADIUS,), seed=0
    )
    t0 = time.perf_counter()
    result = train.train_staged(train_set, test_set, det_cfg, scfg, tcfg)
    return result, test_set, scfg, time.perf_counter() - t0


def _rate(result, test_set, det_params, sp_params, scfg):
    preds, _ = train.predict(test_set, result.detector_config, det_params, sp_params, scfg.use_torso, scfg.method)
    return evaluation.detection_rate(preds, test_set.annotations, (RADIUS,)).rate_at(RADIUS)


def test_criterion5_spatial_benefit(acceptance_run, record_criterion):
    result, test_set, scfg, elapsed = acceptance_run
    base = _rate(result, test_set, result.detector_stage1, None, scfg)
    with_sp = _rate(result, test_set, result.detector_stage1, result.spatial_stage2, scfg)
    margin = with_sp - base
    ok = margin > 0 and elapsed < 30 * 60
    record_criterion(
        5, ok, f"det rate @{RADIUS}: detector {base:.3f}, +spatial {with_sp:.3f}, margin {margin:+.3f}; training {elapsed:.0f}s"
    )
    assert ok


def test_criterion6_unified_no_regression(acceptance_run, record_criterion):
    result, *_ = acceptance_run
    key = f"det_rate@{RADIUS}"
    rows = {m["stage"]: m for m in result.metrics if m["split"] == "val"}  # last epoch wins
    val = {s: rows[s][key] for s in (2, 3)}
    delta = val[3] - val[2]
    ok = delta >= -UNIFIED_SLACK
    # the mse pair shows whether stage 3 actually fitted better rather than drifting
    record_criterion(
        6,
        ok,
        f"val det rate @{RADIUS}: stage 2 {val[2]:.3f}, stage 3 {val[3]:.3f}, delta {delta:+.3f}; "
        f"val mse {rows[2]['mse']:.4f} -> {rows[3]['mse']:.4f}",
    )
    assert ok


# -- 7: background bias rescues a missed part ---------------------------------------------


def test_criterion7_bias_rescue(record_criterion):
    eps, k, size = 0.01, 7, 16
    face, shoulder = (8, 5), (8, 8)
    pts = np.array([[face, shoulder]], dtype=float)
    params = spatial.init_params(pts, JointSet(("face", "shoulder")), k, 1.0, eps=eps)
    params.biases[:] = nn.softplus_inv(0.5)
    yy, xx = np.mgrid[0:size, 0:size]
    unary = np.zeros((2, size, size))
    unary[0] = np.exp(-((xx - face[0]) ** 2 + (yy - face[1]) ** 2) / 2.0)
    out = spatial.spatial_forward(unary, params).maps
    peak = float(out[0].max())
    at_face = np.unravel_index(np.argmax(out[0]), out[0].shape) == (face[1], face[0])
    ok = peak > 10 * eps and at_face
    record_criterion(7, ok, f"face marginal max {peak:.3g} vs threshold {10 * eps:g}, argmax at face: {at_face}")
    assert ok


# -- 8: detection-rate metric -------------------------------------------------------------


def test_criterion8_metric(record_criterion):
    mismatches, monotone = 0, True
    radii = np.round(np.linspace(0.0, 0.5, 21), 3)
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        n, j = int(rng.integers(1, 15)), int(rng.integers(1, 8))
        anns, preds = [], []
        for i in range(n):
            gt = rng.uniform(0, 64, (j, 2))
            anns.append(Annotation(gt, (0.0, 0.0, 5.0, rng.uniform(2, 20)), rng.random(j) > 0.2, image_id=str(i)))
            preds.append(gt + rng.normal(0, rng.uniform(0.5, 6), (j, 2)))
        curve = evaluation.detection_rate(preds, anns, radii)
        errors = [[float(np.hypot(*(p[q] - a.joints[q]))) / a.torso_height for q in range(j)] for a, p in zip(anns, preds)]
        visible = [a.visible.tolist() for a in anns]
        for ri, r in enumerate(radii):
            expect = np.array(count_detections(errors, visible, r))
            got = curve.rates[:, ri]
            same = (got == expect) | (np.isnan(got) & np.isnan(expect))
            mismatches += int(np.sum(~same))
        rows = curve.rates[~np.isnan(curve.rates[:, 0])]
        monotone &= bool(np.all(np.diff(rows, axis=1) >= 0))
    ok = mismatches == 0 and monotone
    record_criterion(8, ok, f"{mismatches} mismatches vs counting oracle over 100 sets, monotone: {monotone}")
    assert ok
