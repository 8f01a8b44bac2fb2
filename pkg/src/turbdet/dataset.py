"""Corpus ingestion, whole-object crop filtering, clean clip assembly and manifests.

Corpus layout (COCO style)::

    <root>/annotations/instances_<split>.json
    <root>/<split>/<file_name>

Clips are stored as ``.npz`` archives holding ``frames`` (T, H, W, 3) uint8
and ``meta`` (a JSON string with clip_id, is_distorted and boxes). Manifests
are JSON-lines files: one header record followed by one record per clip.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "turbdet.manifest"
MANIFEST_VERSION = 1
CLIP_VERSION = 1
MIN_SIDE = 256

TOP10 = ("person", "car", "chair", "book", "bottle", "cup", "dining table", "bowl", "skis", "handbag")
CARPERSON = ("car", "person")
SUBSETS = {"all": None, "top10": TOP10, "carperson": CARPERSON}
SUBSET_NAMES = {"all": "All", "top10": "Top10", "carperson": "CarPerson"}

# Clip counts obtained on COCO2017 at full scale, kept for report comparison.
REFERENCE_CLIP_COUNTS = {
    ("all", "train"): 4594,
    ("top10", "train"): 5000,
    ("carperson", "train"): 5000,
    ("all", "val"): 503,
    ("top10", "val"): 668,
    ("carperson", "val"): 831,
}


class DataError(Exception):
    """Invalid corpus, clip or manifest content."""


class ManifestError(DataError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float
    class_id: int

    def xyxy(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_record(self):
        return {"cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h, "class_id": self.class_id}

    @classmethod
    def from_record(cls, r):
        return cls(float(r["cx"]), float(r["cy"]), float(r["w"]), float(r["h"]), int(r["class_id"]))


@dataclass
class AnnotatedImage:
    pixels: np.ndarray
    boxes: List[BoundingBox]
    source_id: str

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass
class VideoClip:
    frames: np.ndarray
    boxes: List[BoundingBox]
    clip_id: str
    is_distorted: bool = False

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"clip {self.clip_id}: frames must be (T, H, W, 3), got {self.frames.shape}")

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class ManifestEntry:
    clip_id: str
    clean_path: str
    distorted_path: Optional[str]
    boxes: List[BoundingBox]
    source_id: str = ""

    def to_record(self, subset, split):
        return {
            "clip_id": self.clip_id,
            "clean_path": self.clean_path,
            "distorted_path": self.distorted_path,
            "subset": subset,
            "split": split,
            "source_id": self.source_id,
            "boxes": [b.to_record() for b in self.boxes],
        }


@dataclass
class Manifest:
    subset_name: str
    split: str
    categories: List[str] = field(default_factory=list)
    entries: List[ManifestEntry] = field(default_factory=list)
    root: Optional[str] = None

    def __len__(self):
        return len(self.entries)

    def resolve(self, rel):
        if rel is None:
            return None
        return str(Path(self.root or ".") / rel)


# ------------------------------------------------------------------ crop filter

def crop_window(boxes_px, height, width, crop_size):
    """Top-left (row, col) of the crop that wholly contains ``boxes_px``.

    ``boxes_px`` is an (n, 4) array of xyxy pixel boxes. Among all integer
    windows of side ``crop_size`` inside the image that contain every box,
    returns the one whose centre is nearest the mean box centre, breaking
    ties towards the smaller (row, col). Returns ``None`` when no window fits.
    """
    if crop_size > min(height, width):
        return None
    boxes_px = np.asarray(boxes_px, dtype=np.float64).reshape(-1, 4)
    if len(boxes_px) == 0:
        return ((height - crop_size) // 2, (width - crop_size) // 2)
    out = []
    for lo_idx, hi_idx, extent in ((1, 3, height), (0, 2, width)):
        lo = boxes_px[:, lo_idx].min()
        hi = boxes_px[:, hi_idx].max()
        first = max(0, math.ceil(hi - crop_size - 1e-9))
        last = min(extent - crop_size, math.floor(lo + 1e-9))
        if first > last:
            return None
        centre = (boxes_px[:, lo_idx] + boxes_px[:, hi_idx]).mean() / 2
        ideal = centre - crop_size / 2
        # nearest integer to ideal inside [first, last], smaller one on a tie
        cand = min(max(math.floor(ideal), first), last)
        if cand + 1 <= last and abs(cand + 1 - ideal) < abs(cand - ideal):
            cand += 1
        out.append(cand)
    return tuple(out)


def boxes_to_pixels(boxes, height, width):
    return np.array([[b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2] for b in boxes],
                    dtype=np.float64).reshape(-1, 4) * np.array([width, height, width, height], dtype=np.float64)


def _valid_box(b, tol=1e-6):
    x0, y0, x1, y1 = b.xyxy()
    return b.w > 0 and b.h > 0 and x0 >= -tol and y0 >= -tol and x1 <= 1 + tol and y1 <= 1 + tol


def recrop_boxes(boxes, height, width, top, left, crop_size):
    """Re-normalise image-relative boxes to a crop at (top, left)."""
    out = []
    for b in boxes:
        cx = (b.cx * width - left) / crop_size
        cy = (b.cy * height - top) / crop_size
        out.append(BoundingBox(cx, cy, b.w * width / crop_size, b.h * height / crop_size, b.class_id))
    return out


def filter_and_crop(image: AnnotatedImage, crop_size: int = MIN_SIDE) -> Optional[AnnotatedImage]:
    """Crop ``image`` to a square that wholly contains every annotated box.

    Returns ``None`` when the image is too small, carries a malformed box, or
    no such crop exists.
    """
    h, w = image.shape
    if min(h, w) < crop_size:
        return None
    bad = [b for b in image.boxes if not _valid_box(b)]
    if bad:
        log.warning("rejecting %s: %d box(es) outside the image, e.g. %s", image.source_id, len(bad), bad[0])
        return None
    win = crop_window(boxes_to_pixels(image.boxes, h, w), h, w, crop_size)
    if win is None:
        return None
    top, left = win
    pixels = image.pixels[top:top + crop_size, left:left + crop_size]
    return AnnotatedImage(pixels, recrop_boxes(image.boxes, h, w, top, left, crop_size), image.source_id)


def make_clean_clip(image: AnnotatedImage, T: int = 50, clip_id: Optional[str] = None) -> VideoClip:
    """A static clip of ``T`` copies of ``image``."""
    if T < 1:
        raise ValueError(f"clip length must be >= 1, got {T}")
    frames = np.repeat(np.asarray(image.pixels, dtype=np.uint8)[None], T, axis=0)
    return VideoClip(frames, list(image.boxes), clip_id or image.source_id, is_distorted=False)


# ------------------------------------------------------------------ corpus

@dataclass
class CorpusRecord:
    source_id: str
    path: str
    height: int
    width: int
    boxes: List[BoundingBox]

    def load(self):
        from PIL import Image

        with Image.open(self.path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if pixels.shape[:2] != (self.height, self.width):
            raise DataError(f"{self.path}: size {pixels.shape[:2]} disagrees with annotation")
        return AnnotatedImage(pixels, list(self.boxes), self.source_id)


@dataclass
class Corpus:
    categories: List[str]
    records: List[CorpusRecord]

    def __len__(self):
        return len(self.records)


def load_coco_corpus(root, split) -> Corpus:
    """Read a COCO-format detection corpus (annotations only; pixels lazily)."""
    root = Path(root)
    ann_path = root / "annotations" / f"instances_{split}.json"
    if not ann_path.exists():
        raise DataError(f"annotation file not found: {ann_path}")
    try:
        data = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{ann_path}: {exc}") from exc
    cats = sorted(data["categories"], key=lambda c: c["id"])
    cat_index = {c["id"]: i for i, c in enumerate(cats)}
    by_image = {}
    for a in data.get("annotations", []):
        by_image.setdefault(a["image_id"], []).append(a)
    records = []
    for im in sorted(data["images"], key=lambda r: r["id"]):
        H, W = int(im["height"]), int(im["width"])
        boxes = []
        for a in by_image.get(im["id"], []):
            if a.get("iscrowd", 0):
                continue
            if a["category_id"] not in cat_index:
                raise DataError(f"image {im['id']}: unknown category {a['category_id']}")
            x, y, bw, bh = (float(v) for v in a["bbox"])
            boxes.append(BoundingBox((x + bw / 2) / W, (y + bh / 2) / H, bw / W, bh / H, cat_index[a["category_id"]]))
        records.append(CorpusRecord(str(im["id"]), str(root / split / im["file_name"]), H, W, boxes))
    return Corpus([c["name"] for c in cats], records)


def subset_categories(subset, corpus_categories):
    key = subset.lower()
    if key not in SUBSETS:
        raise DataError(f"unknown subset {subset!r}; choose from {sorted(SUBSETS)}")
    names = SUBSETS[key]
    return list(corpus_categories) if names is None else list(names)


def select_subset(categories: Sequence[str], corpus: Corpus, crop_size=MIN_SIDE, split="train",
                  subset_name=None, max_clips=None, seed=0):
    """Crop-filter the corpus and keep images with at least one box in ``categories``.

    Returns ``(manifest, kept)`` where ``kept`` pairs each manifest entry with
    its crop window ``(record, top, left)``. Class ids in the manifest index
    into ``categories``. Paths are left empty; :func:`build_dataset` fills them.
    """
    categories = list(categories)
    vocab = corpus.categories
    unknown = [c for c in categories if c not in vocab]
    name = subset_name or "+".join(categories)
    if unknown:
        raise DataError(f"subset {name!r}: categories not in corpus vocabulary: {unknown}")
    remap = {vocab.index(c): i for i, c in enumerate(categories)}
    kept = []
    for rec in corpus.records:
        if min(rec.height, rec.width) < crop_size:
            continue
        if any(not _valid_box(b) for b in rec.boxes):
            log.warning("rejecting %s: malformed box annotation", rec.source_id)
            continue
        win = crop_window(boxes_to_pixels(rec.boxes, rec.height, rec.width), rec.height, rec.width, crop_size)
        if win is None:
            continue
        cropped = recrop_boxes(rec.boxes, rec.height, rec.width, win[0], win[1], crop_size)
        retained = [BoundingBox(b.cx, b.cy, b.w, b.h, remap[b.class_id]) for b in cropped if b.class_id in remap]
        if not retained:
            continue
        kept.append((ManifestEntry(f"{split}_{rec.source_id}", "", None, retained, rec.source_id), rec, win))
    if not kept:
        raise DataError(f"subset {name!r} selects no images from the corpus")
    if max_clips is not None and len(kept) > max_clips:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(kept), size=max_clips, replace=False))
        kept = [kept[i] for i in pick]
    manifest = Manifest(name, split, categories, [k[0] for k in kept])
    return manifest, kept


# ------------------------------------------------------------------ clip container

def save_clip(clip: VideoClip, path):
    meta = {"version": CLIP_VERSION, "clip_id": clip.clip_id, "is_distorted": bool(clip.is_distorted),
            "boxes": [b.to_record() for b in clip.boxes]}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, frames=np.asarray(clip.frames, dtype=np.uint8), meta=np.array(json.dumps(meta)))
    os.replace(tmp, path)


def load_clip(path) -> VideoClip:
    path = Path(path)
    if not path.exists():
        raise DataError(f"clip not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            frames = z["frames"]
            meta = json.loads(str(z["meta"]))
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"unreadable clip {path}: {exc}") from exc
    if meta.get("version") != CLIP_VERSION:
        raise DataError(f"{path}: clip version {meta.get('version')} != {CLIP_VERSION}")
    if frames.dtype != np.uint8:
        raise DataError(f"{path}: frames must be uint8")
    return VideoClip(frames, [BoundingBox.from_record(b) for b in meta["boxes"]], meta["clip_id"],
                     meta["is_distorted"])


# ------------------------------------------------------------------ manifest I/O

def write_manifest(manifest: Manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"schema": MANIFEST_SCHEMA, "schema_version": MANIFEST_VERSION, "subset": manifest.subset_name,
              "split": manifest.split, "categories": list(manifest.categories), "count": len(manifest.entries)}
    lines = [json.dumps(header)]
    lines += [json.dumps(e.to_record(manifest.subset_name, manifest.split)) for e in manifest.entries]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed record: {exc}") from exc
    if not records or records[0].get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"{path}: missing manifest header")
    header = records[0]
    if header.get("schema_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: schema version {header.get('schema_version')} != {MANIFEST_VERSION}")
    entries = []
    try:
        for r in records[1:]:
            entries.append(ManifestEntry(r["clip_id"], r["clean_path"], r.get("distorted_path"),
                                         [BoundingBox.from_record(b) for b in r["boxes"]], r.get("source_id", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: bad entry: {exc}") from exc
    if header.get("count", len(entries)) != len(entries):
        raise ManifestError(f"{path}: header count {header['count']} != {len(entries)} entries")
    m = Manifest(header["subset"], header["split"], list(header.get("categories", [])), entries, str(path.parent))
    if check_files:
        for e in entries:
            for rel in (e.clean_path, e.distorted_path):
                if rel and not Path(m.resolve(rel)).exists():
                    raise ManifestError(f"{path}: entry {e.clip_id} references missing file {rel}")
    return m


def build_dataset(corpus: Corpus, subset, split, out_dir, crop_size=MIN_SIDE, frames=50, max_clips=None, seed=0):
    """Select, crop and write clean clips plus their manifest; returns the manifest."""
    out_dir = Path(out_dir)
    cats = subset_categories(subset, corpus.categories)
    manifest, kept = select_subset(cats, corpus, crop_size, split, SUBSET_NAMES.get(subset.lower(), subset),
                                   max_clips, seed)
    for entry, rec, (top, left) in kept:
        img = rec.load()
        pixels = img.pixels[top:top + crop_size, left:left + crop_size]
        clip = make_clean_clip(AnnotatedImage(pixels, entry.boxes, rec.source_id), frames, entry.clip_id)
        rel = f"clean/{entry.clip_id}.npz"
        save_clip(clip, out_dir / rel)
        entry.clean_path = rel
    manifest.root = str(out_dir)
    write_manifest(manifest, out_dir / f"manifest_{subset.lower()}_{split}.jsonl")
    return manifest


def manifest_path(out_dir, subset, split):
    return Path(out_dir) / f"manifest_{subset.lower()}_{split}.jsonl"

