"""Deterministic synthetic corpora for tests, smoke runs and toy training."""
import json
from pathlib import Path

import numpy as np

from .dataset import AnnotatedImage, BoundingBox, make_clean_clip

FIXTURE_CATEGORIES = ("person", "car", "chair", "book", "bottle", "cup", "dining table", "bowl", "skis",
                      "handbag", "dog", "kite")

_PALETTE = np.array([
    [220, 40, 40], [40, 200, 60], [50, 80, 230], [230, 200, 30], [200, 60, 200], [30, 200, 210],
    [250, 140, 20], [120, 60, 20], [240, 240, 240], [20, 20, 20], [150, 150, 30], [90, 20, 140],
], dtype=np.float64)


def smooth_background(rng, h, w, cells=6):
    """Low-frequency colour texture in [40, 215]."""
    from scipy.ndimage import zoom

    coarse = rng.uniform(40, 215, size=(cells, cells, 3))
    bg = zoom(coarse, (h / cells, w / cells, 1), order=3, mode="nearest")[:h, :w]
    return np.clip(bg, 0, 255)


def draw_object(img, x0, y0, x1, y1, class_id, rng=None):
    """Paint a class-specific shape filling the pixel box [x0, x1) x [y0, y1)."""
    h, w = img.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    colour = _PALETTE[class_id % len(_PALETTE)]
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if class_id % 2 == 1:
        cx, cy = (x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2
        rx, ry = max((x1 - x0) / 2, 0.5), max((y1 - y0) / 2, 0.5)
        inside &= ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
        img[inside] = colour
    else:
        img[inside] = colour
        # a darker stripe pattern distinguishes even classes from flat discs
        stripe = inside & (((xs - x0) // 3) % 2 == 0)
        img[stripe] = colour * 0.45
    return img


def _place(rng, h, w, n, min_size, max_size):
    boxes = []
    for _ in range(n):
        bw = int(rng.integers(min_size, max_size + 1))
        bh = int(rng.integers(min_size, max_size + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        boxes.append((x0, y0, x0 + bw, y0 + bh))
    return boxes


def shape_scene(rng, h, w, n_objects, n_classes, min_size, max_size, source_id="scene"):
    img = smooth_background(rng, h, w)
    boxes = []
    for x0, y0, x1, y1 in _place(rng, h, w, n_objects, min_size, max_size):
        c = int(rng.integers(0, n_classes))
        draw_object(img, x0, y0, x1, y1, c, rng)
        boxes.append(BoundingBox((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h, c))
    return AnnotatedImage(np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes, source_id)


def write_coco_fixture(root, n_images=200, seed=0, val_fraction=0.25, categories=FIXTURE_CATEGORIES,
                       side_range=(200, 420), object_range=(8, 120), max_objects=4):
    """Write a small COCO-format corpus of shape scenes with varied sizes.

    With the default ranges (sides 200 to 420 px) some images are too small
    to crop, and object spreads vary so some have no whole-object 256 crop.
    """
    from PIL import Image

    root = Path(root)
    rng = np.random.default_rng(seed)
    n_val = int(round(n_images * val_fraction))
    splits = {"train": n_images - n_val, "val": n_val}
    next_id = 1
    ann_id = 1
    for split, count in splits.items():
        (root / split).mkdir(parents=True, exist_ok=True)
        images, anns = [], []
        for _ in range(count):
            h = int(rng.integers(side_range[0], side_range[1] + 1))
            w = int(rng.integers(side_range[0], side_range[1] + 1))
            n_obj = int(rng.integers(1, max_objects + 1))
            # a mix of small and larger objects
            top = min(object_range[1], h // 2, w // 2)
            scene = shape_scene(rng, h, w, n_obj, len(categories), min(object_range[0], top), top, str(next_id))
            fname = f"{next_id:06d}.png"
            Image.fromarray(scene.pixels).save(root / split / fname)
            images.append({"id": next_id, "file_name": fname, "height": h, "width": w})
            for b in scene.boxes:
                x0 = (b.cx - b.w / 2) * w
                y0 = (b.cy - b.h / 2) * h
                anns.append({"id": ann_id, "image_id": next_id, "category_id": b.class_id + 1,
                             "bbox": [x0, y0, b.w * w, b.h * h], "area": b.w * w * b.h * h, "iscrowd": 0})
                ann_id += 1
            next_id += 1
        cats = [{"id": i + 1, "name": n} for i, n in enumerate(categories)]
        (root / "annotations").mkdir(parents=True, exist_ok=True)
        (root / "annotations" / f"instances_{split}.json").write_text(
            json.dumps({"images": images, "annotations": anns, "categories": cats}))
    return root


def toy_clips(n_clips=8, size=64, frames=50, n_classes=2, seed=0, objects=(1, 2), min_size=12, max_size=24):
    """Static clean clips of shape scenes, the training set of the overfit checks."""
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        k = int(rng.integers(objects[0], objects[1] + 1))
        scene = shape_scene(rng, size, size, k, n_classes, min_size, max_size, f"toy{i:03d}")
        clips.append(make_clean_clip(scene, frames, scene.source_id))
    return clips
