"""Frame-by-frame inference over clips and evaluation against clean references."""
import json

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import VideoClip
from .metrics import (ClipScores, EvalReport, boxes_to_ground_truth, detections_to_pixels, map_50_95, psnr,
                      ssim)
from .models.detector import detections_from_output
from .trainer import AlternatingTrainer, TrainConfig, sliding_window, to_tensor


def load_trainer(path):
    """Rebuild models from a checkpoint's stored config and load the weights."""
    data = ckpt.load_checkpoint(path)
    try:
        config = TrainConfig.from_dict(data["train_config"])
        num_classes = int(data["num_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ckpt.CheckpointError(f"{path}: malformed checkpoint metadata ({exc})") from exc
    trainer = AlternatingTrainer(config, num_classes)
    trainer.load(path, weights_only=True)
    return trainer


@torch.no_grad()
def run_clip(trainer: AlternatingTrainer, clip: VideoClip, batch_size=4, score_floor=0.0):
    """Mitigated uint8 frames (T, H, W, 3) and per-frame detection tuples for every frame."""
    det = trainer.detector.eval()
    mit = trainer.mitigator.eval() if trainer.mitigator is not None else None
    T = len(clip)
    window = trainer.config.window
    frames, dets = [], []
    for start in range(0, T, batch_size):
        ts = range(start, min(T, start + batch_size))
        if mit is None:
            x = torch.stack([to_tensor(clip.frames[t]) for t in ts])
            out = det(x)
            restored = x
        else:
            w = torch.stack([to_tensor(sliding_window(clip, t, window)) for t in ts])
            m = mit(w)
            restored = m.mitigated
            out = det(m.mitigated.clamp(0, 1), m.reg_features, m.pyramid)
        frames.append((restored.clamp(0, 1) * 255).round().byte().permute(0, 2, 3, 1).numpy())
        dets.extend(detections_from_output(out, score_floor))
    return np.concatenate(frames), dets


def detection_records(clip_id, dets):
    return [{"clip_id": clip_id, "frame_index": t,
             "boxes": [dict(zip(("cx", "cy", "w", "h", "class_id", "score"), d)) for d in frame]}
            for t, frame in enumerate(dets)]


def write_detections(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def evaluate(trainer: AlternatingTrainer, pairs, variant="model", frames=None, batch_size=4):
    """EvalReport over (clean, distorted) clip pairs.

    ``frames`` optionally restricts scoring to the given frame indices.
    """
    report = EvalReport(variant)
    all_dets, all_gt = [], []
    for clean, dist in pairs:
        restored, dets = run_clip(trainer, dist, batch_size)
        idx = list(range(len(clean))) if frames is None else list(frames)
        H, W = clean.frames.shape[1:3]
        report.clips.append(ClipScores(clean.clip_id,
                                       float(np.mean([psnr(restored[t], clean.frames[t]) for t in idx])),
                                       float(np.mean([ssim(restored[t], clean.frames[t]) for t in idx]))))
        for t in idx:
            image_id = f"{clean.clip_id}/{t}"
            all_dets += detections_to_pixels(dets[t], image_id, H, W)
            all_gt += boxes_to_ground_truth(clean.boxes, image_id, H, W)
        report.n_images += len(idx)
        report.n_objects += len(idx) * len(clean.boxes)
    report.map_50_95 = map_50_95(all_dets, all_gt, "all")
    report.map_small = map_50_95(all_dets, all_gt, "small")
    return report


def distorted_baseline(pairs, variant="distorted", frames=None):
    """Restoration scores of the raw distorted frames themselves."""
    report = EvalReport(variant)
    for clean, dist in pairs:
        idx = list(range(len(clean))) if frames is None else list(frames)
        report.clips.append(ClipScores(clean.clip_id,
                                       float(np.mean([psnr(dist.frames[t], clean.frames[t]) for t in idx])),
                                       float(np.mean([ssim(dist.frames[t], clean.frames[t]) for t in idx]))))
        report.n_images += len(idx)
    return report
