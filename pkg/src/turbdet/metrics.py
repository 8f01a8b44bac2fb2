"""Restoration metrics (PSNR, SSIM, pluggable LPIPS) and COCO-style mAP[0.50:0.95]."""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .boxes import pairwise_iou
from .kernels import greedy_match

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_AREA = 32.0 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
UNAVAILABLE = "unavailable"


# ------------------------------------------------------------------ restoration

def psnr(x, y, peak=255.0):
    """Peak signal-to-noise ratio in dB; identical inputs return ``PSNR_CAP``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(x, y, peak=255.0, k1=0.01, k2=0.03):
    """Mean local SSIM on the luma channel with an 11x11 Gaussian window (sigma 1.5).

    Only fully-contained windows are averaged.
    """
    a, b = to_gray(x), to_gray(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    half = SSIM_WINDOW // 2

    def filt(img):
        out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return out[half:-half, half:-half]

    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


_LPIPS_BACKENDS: Dict[str, Callable] = {}


def register_lpips_backend(name, fn):
    """Register ``fn(x, y) -> float`` as a perceptual-distance backend."""
    _LPIPS_BACKENDS[name] = fn


def unregister_lpips_backend(name):
    _LPIPS_BACKENDS.pop(name, None)


def lpips_stub(x, y, backend=None):
    """Delegate to a registered backend; returns ``UNAVAILABLE`` when there is none."""
    if backend is None:
        if not _LPIPS_BACKENDS:
            return UNAVAILABLE
        backend = sorted(_LPIPS_BACKENDS)[0]
    fn = _LPIPS_BACKENDS.get(backend)
    if fn is None:
        return UNAVAILABLE
    return float(fn(x, y))


# ------------------------------------------------------------------ detection

@dataclass
class Detection:
    image_id: str
    box: Sequence[float]  # x1, y1, x2, y2 in pixels
    class_id: int
    score: float


@dataclass
class GroundTruth:
    image_id: str
    box: Sequence[float]
    class_id: int


def _area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def interpolated_ap(tp, ignored, n_gt):
    """101-point interpolated AP from score-sorted TP flags (ignored entries dropped)."""
    keep = ~np.asarray(ignored, dtype=bool)
    tp = np.asarray(tp, dtype=bool)[keep]
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # precision envelope: best precision at this or any higher recall
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros(len(RECALL_POINTS))
    ok = idx < len(envelope)
    q[ok] = envelope[idx[ok]]
    return float(q.mean())


def _class_ap(dets: List[Detection], gts: List[GroundTruth], thr, small_only):
    by_img = {}
    for i, g in enumerate(gts):
        by_img.setdefault(g.image_id, ([], []))[0].append(g)
    for i, d in enumerate(dets):
        by_img.setdefault(d.image_id, ([], []))[1].append((i, d))
    scores, tps, ign, order_keys = [], [], [], []
    n_gt = 0
    for img_gts, img_dets in by_img.values():
        gt_boxes = np.array([g.box for g in img_gts], dtype=np.float64).reshape(-1, 4)
        gt_ignore = _area(gt_boxes) >= SMALL_AREA if small_only else np.zeros(len(img_gts), dtype=bool)
        n_gt += int((~gt_ignore).sum())
        # score-descending, ties to the lower detection index
        img_dets = sorted(img_dets, key=lambda t: (-t[1].score, t[0]))
        det_boxes = np.array([d.box for _, d in img_dets], dtype=np.float64).reshape(-1, 4)
        m = greedy_match(pairwise_iou(det_boxes, gt_boxes), gt_ignore, thr)
        for (idx, d), g, a in zip(img_dets, m, _area(det_boxes)):
            matched = g >= 0
            if matched:
                ignored = bool(gt_ignore[g])
            else:
                ignored = small_only and a >= SMALL_AREA
            scores.append(d.score)
            order_keys.append(idx)
            tps.append(matched and not ignored)
            ign.append(ignored)
    if n_gt == 0:
        return None
    order = np.lexsort((np.array(order_keys), -np.array(scores))) if scores else np.zeros(0, dtype=int)
    return interpolated_ap(np.array(tps, dtype=bool)[order], np.array(ign, dtype=bool)[order], n_gt)


def map_50_95(detections: Sequence[Detection], ground_truth: Sequence[GroundTruth], size_filter="all",
              thresholds=IOU_THRESHOLDS):
    """COCO-style mean AP over classes and IoU thresholds 0.50:0.05:0.95.

    Classes without (non-ignored) ground truth are excluded from the mean.
    With ``size_filter="small"`` ground truth of area >= 32^2 px is ignored
    together with unmatched detections of that size. Returns None when no
    class has ground truth.
    """
    if size_filter not in ("all", "small"):
        raise ValueError("size_filter must be 'all' or 'small'")
    small = size_filter == "small"
    classes = sorted({g.class_id for g in ground_truth})
    per_thr = []
    for thr in thresholds:
        aps = []
        for c in classes:
            ap = _class_ap([d for d in detections if d.class_id == c],
                           [g for g in ground_truth if g.class_id == c], thr, small)
            if ap is not None:
                aps.append(ap)
        if aps:
            per_thr.append(np.mean(aps))
    if not per_thr:
        return None
    return float(np.mean(per_thr))


def detections_to_pixels(records, image_id, height, width):
    """(cx, cy, w, h, class_id, score) tuples in normalised units -> :class:`Detection` list."""
    out = []
    for cx, cy, w, h, c, s in records:
        out.append(Detection(image_id, (
            (cx - w / 2) * width, (cy - h / 2) * height, (cx + w / 2) * width, (cy + h / 2) * height), int(c), float(s)))
    return out


def boxes_to_ground_truth(boxes, image_id, height, width):
    return [GroundTruth(image_id, ((b.cx - b.w / 2) * width, (b.cy - b.h / 2) * height,
                                   (b.cx + b.w / 2) * width, (b.cy + b.h / 2) * height), b.class_id) for b in boxes]


# ------------------------------------------------------------------ report

@dataclass
class ClipScores:
    clip_id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    variant: str
    clips: List[ClipScores] = field(default_factory=list)
    map_50_95: Optional[float] = None
    map_small: Optional[float] = None
    lpips: object = UNAVAILABLE
    n_images: int = 0
    n_objects: int = 0

    @property
    def psnr(self):
        return float(np.mean([c.psnr for c in self.clips])) if self.clips else None

    @property
    def ssim(self):
        return float(np.mean([c.ssim for c in self.clips])) if self.clips else None

    def to_dict(self):
        d = asdict(self)
        d["psnr"], d["ssim"] = self.psnr, self.ssim
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("psnr", None)
        d.pop("ssim", None)
        d["clips"] = [ClipScores(**c) for c in d.get("clips", [])]
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _fmt(v, digits=3):
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    return f"{v:.{digits}f}"


def summary_table(reports: Sequence[EvalReport]):
    """Plain-text table: one row per variant with detection and restoration columns."""
    head = f"{'variant':<20} {'mAP':>7} {'mAP_S':>7} {'PSNR':>8} {'SSIM':>7} {'LPIPS':>11}"
    rows = [head, "-" * len(head)]
    for r in reports:
        rows.append(f"{r.variant:<20} {_fmt(r.map_50_95):>7} {_fmt(r.map_small):>7} {_fmt(r.psnr, 2):>8} "
                    f"{_fmt(r.ssim):>7} {_fmt(r.lpips):>11}")
    return "\n".join(rows)
