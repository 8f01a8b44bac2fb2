import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import exhaustive_windows
from turbdet.dataset import (CARPERSON, REFERENCE_CLIP_COUNTS, TOP10, AnnotatedImage, BoundingBox, DataError,
                             Manifest, ManifestEntry, ManifestError, build_dataset, crop_window,
                             filter_and_crop, load_clip, load_coco_corpus, make_clean_clip, read_manifest,
                             save_clip, select_subset, write_manifest)
from turbdet.fixtures import write_coco_fixture


def px_box(x0, y0, x1, y1, h, w, c=0):
    return BoundingBox((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h, c)


def image(h, w, boxes):
    return AnnotatedImage(np.zeros((h, w, 3), np.uint8), boxes, "img")


def test_reference_counts_and_subsets():
    assert REFERENCE_CLIP_COUNTS[("all", "train")] == 4594
    assert REFERENCE_CLIP_COUNTS[("all", "val")] == 503
    assert REFERENCE_CLIP_COUNTS[("top10", "train")] == 5000
    assert REFERENCE_CLIP_COUNTS[("top10", "val")] == 668
    assert REFERENCE_CLIP_COUNTS[("carperson", "train")] == 5000
    assert REFERENCE_CLIP_COUNTS[("carperson", "val")] == 831
    assert len(TOP10) == 10 and set(CARPERSON) <= set(TOP10)


def test_centered_box_center_crop():
    out = filter_and_crop(image(512, 512, [px_box(206, 206, 306, 306, 512, 512)]), 256)
    assert out.pixels.shape == (256, 256, 3)
    b = out.boxes[0]
    assert (b.cx, b.cy) == pytest.approx((0.5, 0.5))
    assert b.w == pytest.approx(100 / 256)


def test_identity_crop():
    img = AnnotatedImage(np.arange(256 * 256 * 3, dtype=np.uint8).reshape(256, 256, 3),
                         [px_box(0, 10, 256, 100, 256, 256)], "full")
    out = filter_and_crop(img, 256)
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert out.boxes[0] == pytest.approx(img.boxes[0]) or out.boxes == img.boxes


def test_far_apart_boxes_rejected():
    boxes = [px_box(0, 0, 50, 50, 512, 512), px_box(450, 450, 500, 500, 512, 512)]
    assert filter_and_crop(image(512, 512, boxes), 256) is None
    assert exhaustive_windows([(0, 0, 50, 50), (450, 450, 500, 500)], 512, 512, 256) == []


def test_too_small_image_rejected():
    assert filter_and_crop(image(200, 300, [px_box(0, 0, 10, 10, 200, 300)]), 256) is None


def test_malformed_box_logged_not_raised(caplog):
    bad = BoundingBox(1.0, 0.5, 0.5, 0.2, 0)
    with caplog.at_level(logging.WARNING):
        assert filter_and_crop(image(300, 300, [bad]), 256) is None
    assert "rejecting" in caplog.text


boxes_strategy = st.lists(st.tuples(st.integers(0, 39), st.integers(0, 39), st.integers(1, 16), st.integers(1, 16)),
                          min_size=1, max_size=3)


@given(st.integers(24, 40), st.integers(24, 40), st.integers(8, 24), boxes_strategy)
@settings(max_examples=200, deadline=None)
def test_crop_filter_sound_and_complete(h, w, s, raw):
    boxes_px = []
    for x, y, bw, bh in raw:
        x0, y0 = min(x, w - 1), min(y, h - 1)
        boxes_px.append((x0, y0, min(w, x0 + bw), min(h, y0 + bh)))
    boxes = [px_box(*b, h, w) for b in boxes_px]
    windows = exhaustive_windows(boxes_px, h, w, s)
    out = filter_and_crop(image(h, w, boxes), s)
    if min(h, w) < s:
        assert out is None
        return
    # completeness: a crop is returned exactly when one exists
    assert (out is not None) == bool(windows)
    if out is None:
        return
    # soundness: every box lies inside the crop
    for b in out.boxes:
        x0, y0, x1, y1 = b.xyxy()
        assert -1e-9 <= x0 and -1e-9 <= y0 and x1 <= 1 + 1e-9 and y1 <= 1 + 1e-9
    # placement: the valid window nearest the box centroid, smaller index on ties
    arr = np.array(boxes_px, dtype=float)
    cy = ((arr[:, 1] + arr[:, 3]) / 2).mean() - s / 2
    cx = ((arr[:, 0] + arr[:, 2]) / 2).mean() - s / 2
    rows = sorted({r for r, _ in windows}, key=lambda r: (abs(r - cy), r))
    cols = sorted({c for _, c in windows}, key=lambda c: (abs(c - cx), c))
    assert crop_window(arr, h, w, s) == (rows[0], cols[0])


def test_make_clean_clip():
    img = AnnotatedImage(np.random.default_rng(0).integers(0, 255, (8, 8, 3), dtype=np.uint8),
                         [BoundingBox(0.5, 0.5, 0.2, 0.2, 1)], "x")
    clip = make_clean_clip(img, 50)
    assert clip.frames.shape == (50, 8, 8, 3)
    assert all(np.array_equal(f, clip.frames[0]) for f in clip.frames)
    assert clip.boxes == img.boxes
    assert len(make_clean_clip(img, 1)) == 1
    with pytest.raises(ValueError):
        make_clean_clip(img, 0)


def test_clip_roundtrip(tmp_path):
    img = AnnotatedImage(np.full((8, 8, 3), 7, np.uint8), [BoundingBox(0.5, 0.5, 0.2, 0.2, 1)], "x")
    clip = make_clean_clip(img, 3)
    save_clip(clip, tmp_path / "c.npz")
    back = load_clip(tmp_path / "c.npz")
    np.testing.assert_array_equal(back.frames, clip.frames)
    assert back.boxes == clip.boxes and back.clip_id == "x"
    with pytest.raises(DataError):
        load_clip(tmp_path / "missing.npz")


def _manifest(tmp_path, n):
    entries = []
    for i in range(n):
        rel = f"clean/c{i}.npz"
        save_clip(make_clean_clip(AnnotatedImage(np.zeros((4, 4, 3), np.uint8), [], f"c{i}"), 2), tmp_path / rel)
        entries.append(ManifestEntry(f"c{i}", rel, None, [BoundingBox(0.5, 0.5, 0.1, 0.1, i % 2)], f"s{i}"))
    return Manifest("CarPerson", "train", ["car", "person"], entries, str(tmp_path))


@pytest.mark.parametrize("n", [0, 3])
def test_manifest_roundtrip(tmp_path, n):
    m = _manifest(tmp_path, n)
    write_manifest(m, tmp_path / "m.jsonl")
    back = read_manifest(tmp_path / "m.jsonl")
    assert back == m


def test_manifest_errors(tmp_path):
    m = _manifest(tmp_path, 2)
    path = tmp_path / "m.jsonl"
    write_manifest(m, path)
    (tmp_path / "clean" / "c1.npz").unlink()
    with pytest.raises(ManifestError, match="missing file"):
        read_manifest(path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]))
    with pytest.raises(ManifestError, match="schema version"):
        read_manifest(path, check_files=False)
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "nope.jsonl")


@pytest.fixture(scope="module")
def fixture_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_coco_fixture(root, n_images=200, seed=0)
    return root


def test_fixture_corpus_subsets(fixture_corpus):
    corpus = load_coco_corpus(fixture_corpus, "train")
    assert len(corpus) == 150
    m, kept = select_subset(list(CARPERSON), corpus, 256, "train", "CarPerson")
    assert 0 < len(m) < len(corpus)
    for e in m.entries:
        assert e.boxes and all(b.class_id in (0, 1) for b in e.boxes)
    with pytest.raises(DataError, match="unicorn"):
        select_subset(["unicorn"], corpus, 256, "train", "unicorn")


def test_dataset_counts_deterministic(fixture_corpus, tmp_path):
    corpus = load_coco_corpus(fixture_corpus, "train")
    a = build_dataset(corpus, "top10", "train", tmp_path / "a", frames=2, max_clips=10, seed=3)
    b = build_dataset(corpus, "top10", "train", tmp_path / "b", frames=2, max_clips=10, seed=3)
    assert [e.clip_id for e in a.entries] == [e.clip_id for e in b.entries]
    assert [e.boxes for e in a.entries] == [e.boxes for e in b.entries]
    assert (tmp_path / "a" / "manifest_top10_train.jsonl").read_text().replace(str(tmp_path / "a"), "") == \
        (tmp_path / "b" / "manifest_top10_train.jsonl").read_text().replace(str(tmp_path / "b"), "")
    m = read_manifest(tmp_path / "a" / "manifest_top10_train.jsonl")
    assert len(m) == 10
    clip = load_clip(m.resolve(m.entries[0].clean_path))
    assert clip.frames.shape == (2, 256, 256, 3)
