import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_map
from turbdet.metrics import (PSNR_CAP, UNAVAILABLE, ClipScores, Detection, EvalReport, GroundTruth, lpips_stub,
                             map_50_95, psnr, register_lpips_backend, ssim, summary_table,
                             unregister_lpips_backend)


def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP == 100.0
    assert psnr(a, a + 16) == pytest.approx(10 * math.log10(255 ** 2 / 256), abs=1e-12)
    assert psnr(a, a + 16) == pytest.approx(24.05, abs=5e-3)
    assert psnr(a, a + 255) == 0.0


def test_psnr_decreases_with_noise(rng):
    x = rng.integers(0, 256, (16, 16)).astype(float)
    n = rng.normal(size=x.shape)
    vals = [psnr(x, x + s * n) for s in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_properties(rng):
    x = rng.integers(0, 256, (24, 24, 3)).astype(float)
    y = np.clip(x + rng.normal(0, 20, x.shape), 0, 255)
    assert ssim(x, x) == pytest.approx(1.0)
    assert ssim(x, y) == pytest.approx(ssim(y, x))
    binary = (rng.random((20, 20)) > 0.5) * 255.0
    assert ssim(binary, 255 - binary) < 0
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 30)), np.zeros((8, 30)))


def test_ssim_constant_images_closed_form():
    a, k = 100.0, 30.0
    c1 = (0.01 * 255) ** 2
    expected = (2 * a * (a + k) + c1) / (a ** 2 + (a + k) ** 2 + c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), a + k)) == pytest.approx(expected, rel=1e-9)


def test_lpips_stub():
    assert lpips_stub(np.zeros(3), np.zeros(3)) == UNAVAILABLE
    register_lpips_backend("l2", lambda x, y: float(np.sum((np.asarray(x) - np.asarray(y)) ** 2)))
    try:
        x, y = np.arange(4.0), np.ones(4)
        assert lpips_stub(x, x, "l2") == 0
        assert lpips_stub(x, y, "l2") == lpips_stub(y, x, "l2")
        assert lpips_stub(x, y, "missing") == UNAVAILABLE
    finally:
        unregister_lpips_backend("l2")


GT = [GroundTruth("a", (0, 0, 10, 10), 0)]


def test_map_examples():
    assert map_50_95([Detection("a", (0, 0, 10, 10), 0, 1.0)], GT) == 1.0
    assert map_50_95([Detection("a", (0, 0, 10, 6), 0, 1.0)], GT) == pytest.approx(0.30, abs=1e-12)
    dets = [Detection("a", (50, 50, 60, 60), 0, 0.9), Detection("a", (0, 0, 10, 10), 0, 0.8)]
    assert map_50_95(dets, GT, thresholds=[0.5]) == pytest.approx(0.5, abs=1e-12)


def test_map_class_without_gt_excluded():
    dets = [Detection("a", (0, 0, 10, 10), 0, 1.0), Detection("a", (0, 0, 10, 10), 5, 0.9)]
    assert map_50_95(dets, GT) == 1.0
    assert map_50_95(dets, []) is None


def test_map_small_filter():
    big = GroundTruth("a", (0, 0, 40, 40), 0)
    assert map_50_95([Detection("a", (0, 0, 40, 40), 0, 1.0)], [big], "small") is None
    small = GroundTruth("a", (50, 50, 60, 60), 0)
    dets = [Detection("a", (0, 0, 40, 40), 0, 0.99), Detection("a", (50, 50, 60, 60), 0, 0.5)]
    # the large detection matches an ignored GT and is dropped
    assert map_50_95(dets, [big, small], "small") == 1.0
    assert map_50_95(dets, [big, small], "all") == 1.0
    with pytest.raises(ValueError):
        map_50_95(dets, [big], "medium")


coord = st.integers(0, 12)
box = st.tuples(coord, coord, st.integers(2, 8), st.integers(2, 8)).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))
det_s = st.builds(Detection, st.sampled_from(["a", "b"]), box, st.integers(0, 1),
                  st.sampled_from([0.2, 0.4, 0.6, 0.8, 0.9]))
gt_s = st.builds(GroundTruth, st.sampled_from(["a", "b"]), box, st.integers(0, 1))


@given(st.lists(det_s, max_size=4), st.lists(gt_s, min_size=1, max_size=3))
@settings(max_examples=400, deadline=None)
def test_map_matches_enumeration_oracle(dets, gts):
    got = map_50_95(dets, gts)
    want = oracle_map(dets, gts)
    assert got == pytest.approx(want, abs=1e-12)


def test_eval_report_roundtrip(tmp_path):
    r = EvalReport("dmat", [ClipScores("c0", 25.0, 0.8), ClipScores("c1", 27.0, 0.9)], 0.5, None)
    assert r.psnr == 26.0 and r.ssim == pytest.approx(0.85)
    r.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.to_dict() == r.to_dict()
    table = summary_table([r])
    assert "dmat" in table and "26.00" in table and UNAVAILABLE in table
