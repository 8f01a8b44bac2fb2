import itertools

import numpy as np
import pytest
import torch

from turbdet.models.detector import TIERS, Detector, DetectorConfig, detections_from_output, sine_position_encoding
from turbdet.models.matcher import match, match_cost_matrix, matching_cost


def small_detector(**kw):
    cfg = DetectorConfig.tier("tiny", **kw)
    return Detector(cfg)


def test_block_counts_all_tiers():
    for name in TIERS:
        det = Detector(DetectorConfig.tier(name))
        assert len(det.encoder) == 6
        assert len(det.decoder) == 3
    with pytest.raises(ValueError):
        DetectorConfig(encoder_blocks=5)
    with pytest.raises(ValueError):
        DetectorConfig(decoder_blocks=4)


def test_tier_monotonicity():
    t, s, m = (DetectorConfig.tier(n) for n in ("tiny", "small", "medium"))
    for f in ("embed_dim", "heads", "backbone_depth"):
        assert getattr(t, f) <= getattr(s, f) <= getattr(m, f)
    with pytest.raises(ValueError):
        DetectorConfig.tier("huge")


def test_backbone_strides():
    det = small_detector().eval()
    feats = det.extract_backbone_features(torch.rand(1, 3, 256, 256))
    assert [f.shape[-1] for f in feats] == [32, 16, 8]
    assert [f.shape[1] for f in feats] == list(det.backbone.out_channels)
    with pytest.raises(ValueError):
        det.extract_backbone_features(torch.rand(1, 3, 100, 100))


def test_backbone_eval_determinism_and_translation():
    det = small_detector().eval()
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:320, 0:320]
    scene = (np.sin(xx / 9.0) * np.cos(yy / 13.0) + (((xx // 40) + (yy // 40)) % 2)).astype(np.float32)
    img = torch.from_numpy(np.stack([scene] * 3))[None]
    with torch.no_grad():
        a = det.extract_backbone_features(img[..., :256, :256])
        b = det.extract_backbone_features(img[..., :256, :256])
        assert all(torch.equal(x, y) for x, y in zip(a, b))
        shifted = det.extract_backbone_features(img[..., :256, 32:288])[1]
        other = det.extract_backbone_features(torch.from_numpy(rng.random((1, 3, 256, 256), dtype=np.float32)))[1]
    ref = a[1][..., 2:]  # stride 16: 32 px = 2 cells
    cos = torch.nn.functional.cosine_similarity
    assert cos(ref.flatten(), shifted[..., :-2].flatten(), dim=0) > cos(ref.flatten(), other[..., 2:].flatten(), dim=0)


def test_token_count_with_registration_map():
    det = small_detector(reg_channels=8).eval()
    maps = det.token_maps(torch.rand(1, 3, 256, 256), torch.rand(1, 8, 256, 256))
    assert [m.shape[-2:] for m in maps] == [(16, 16), (16, 16)]
    tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)
    assert tokens.shape[1] == 512


def test_registration_pathway_is_live():
    det = small_detector(reg_channels=4, pyramid_width=4, token_stride=8).eval()
    frame = torch.rand(1, 3, 64, 64)
    pyr = [torch.rand(1, 4, 32, 32), torch.rand(1, 4, 16, 16), torch.rand(1, 4, 8, 8)]
    with torch.no_grad():
        a = det.encode(det.token_maps(frame, torch.rand(1, 4, 64, 64), pyr))
        b = det.encode(det.token_maps(frame, torch.zeros(1, 4, 64, 64), pyr))
    assert (a - b).abs().max() > 0


def test_encoder_permutation_equivariance():
    det = small_detector(norm="layer").eval()
    x = torch.randn(1, 8, 64)
    perm = torch.randperm(8)
    with torch.no_grad():
        def run(t):
            for blk in det.encoder:
                t = blk(t)
            return t
        torch.testing.assert_close(run(x)[:, perm], run(x[:, perm]), atol=1e-5, rtol=1e-5)
        a = det.encode([x.transpose(1, 2).reshape(1, 64, 2, 4)], use_pos=False)
        xp = x[:, perm]
        b = det.encode([xp.transpose(1, 2).reshape(1, 64, 2, 4)], use_pos=False)
    torch.testing.assert_close(a[:, perm], b, atol=1e-5, rtol=1e-5)


def test_position_encoding_shape():
    pe = sine_position_encoding(4, 6, 16)
    assert pe.shape == (24, 16)
    assert not torch.allclose(pe[0], pe[1])


@pytest.mark.parametrize("tier", list(TIERS))
def test_decode_shapes_and_bounds(tier):
    cfg = DetectorConfig.tier(tier, num_classes=3, num_queries=7, token_stride=32)
    det = Detector(cfg).eval()
    with torch.no_grad():
        out = det(torch.rand(2, 3, 64, 64))
    assert out["logits"].shape == (2, 7, 3)
    assert out["boxes"].shape == (2, 7, 4)
    assert torch.all((out["boxes"] > 0) & (out["boxes"] < 1))
    with torch.no_grad():
        again = det(torch.rand(2, 3, 64, 64) * 0 + 0.3)
        twice = det(torch.rand(2, 3, 64, 64) * 0 + 0.3)
    torch.testing.assert_close(again["logits"], twice["logits"], atol=1e-6, rtol=0)


def test_gradient_reaches_queries():
    det = small_detector(token_stride=32).train()
    out = det(torch.rand(2, 3, 64, 64))
    (out["logits"].sum() + out["boxes"].sum()).backward()
    assert det.query_embed.weight.grad.abs().sum() > 0
    assert det.query_pos.weight.grad.abs().sum() > 0


def test_predict_argmax_scale_invariance():
    det = small_detector()
    emb = torch.randn(1, 5, det.config.embed_dim)
    out = det.predict(emb)
    cls = out["logits"].argmax(-1)
    assert torch.equal((out["logits"] * 3.7).argmax(-1), cls)
    recs = detections_from_output(out)
    assert len(recs) == 1 and len(recs[0]) == 5
    assert all(0 <= r[5] <= 1 for r in recs[0])


def brute_force(cost):
    Q, G = cost.shape
    best, best_rows = None, None
    for rows in itertools.permutations(range(Q), G):
        c = sum(cost[r, g] for g, r in enumerate(rows))
        if best is None or c < best - 1e-12:
            best, best_rows = c, rows
    return best, best_rows


def test_matcher_brute_force(rng):
    for _ in range(100):
        Q = int(rng.integers(1, 6))
        G = int(rng.integers(0, Q + 1))
        cost = rng.random((Q, G))
        rows, cols = match_cost_matrix(cost)
        assert len(rows) == G and len(set(rows)) == G
        if G:
            best, _ = brute_force(cost)
            assert cost[rows, cols].sum() == pytest.approx(best, abs=1e-12)


def test_matcher_two_gt_three_queries():
    cost = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    rows, cols = match_cost_matrix(cost)
    assert dict(zip(cols.tolist(), rows.tolist())) == {0: 1, 1: 0}


def test_matcher_ties_lowest_query():
    rows, cols = match_cost_matrix(np.ones((4, 1)))
    assert rows.tolist() == [0]
    rows, cols = match_cost_matrix(np.ones((5, 2)))
    assert sorted(rows.tolist()) == [0, 1]


def test_match_on_predictions():
    probs = torch.tensor([[0.9, 0.1], [0.2, 0.7], [0.5, 0.5]])
    boxes = torch.tensor([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2], [0.5, 0.5, 0.9, 0.9]])
    gt_boxes = torch.tensor([[0.7, 0.7, 0.2, 0.2], [0.3, 0.3, 0.2, 0.2]])
    rows, cols = match(probs, boxes, torch.tensor([1, 0]), gt_boxes)
    assert rows.tolist() == [0, 1] and cols.tolist() == [1, 0]
    # N_pos + N_neg = Q
    assert len(rows) + (3 - len(rows)) == 3
    assert matching_cost(probs, boxes, torch.tensor([1, 0]), gt_boxes).shape == (3, 2)
    with pytest.raises(ValueError):
        match(probs, boxes, torch.zeros(4, dtype=torch.long), torch.rand(4, 4))
    r, c = match(probs, boxes, torch.zeros(0, dtype=torch.long), torch.zeros(0, 4))
    assert len(r) == len(c) == 0
