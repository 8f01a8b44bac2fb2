"""Sliding windows, the alternating odd/even schedule and the training loop."""
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import Manifest, VideoClip, load_clip
from .losses import DEFAULT_DETECT_WEIGHTS, aggregate, box_l1, charbonnier, giou_loss, label_loss
from .boxes import box_iou_giou, cxcywh_to_xyxy
from .models.detector import Detector, DetectorConfig
from .models.enhancement import EnhancementConfig
from .models.matcher import match
from .models.mitigator import Mitigator
from .models.registration import RegistrationConfig

log = logging.getLogger(__name__)

PIPELINES = ("alternating", "raw")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    epochs: int = 100
    window: int = 10
    unfrozen_tail_layers: int = 10
    batch_size: int = 2
    seed: int = 0
    device: str = "cpu"
    # "paper" keeps the published widths and kernels; "toy" is the narrow CPU variant
    model_scale: str = "paper"
    detector_tier: str = "tiny"
    token_stride: int = 16
    num_queries: int = 25
    transformer_norm: str = "batch"
    detect_weights: Tuple[float, float, float] = DEFAULT_DETECT_WEIGHTS
    # "raw" trains the detector alone on distorted centre frames (comparison baseline)
    pipeline: str = "alternating"
    center_stride: int = 1
    max_steps: Optional[int] = None
    # optional global gradient-norm cap applied in both phases (off by default)
    grad_clip: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "detect_weights", tuple(float(w) for w in self.detect_weights))
        if self.optimizer.lower() != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.window < 3:
            raise ValueError("window must hold at least 3 frames")
        if self.model_scale not in ("paper", "toy"):
            raise ValueError("model_scale must be 'paper' or 'toy'")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"pipeline must be one of {PIPELINES}")
        if self.batch_size < 1 or self.epochs < 1 or self.center_stride < 1:
            raise ValueError("batch_size, epochs and center_stride must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            d = json.load(fh)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def model_fingerprint(self, num_classes):
        keys = ("window", "model_scale", "detector_tier", "token_stride", "num_queries", "transformer_norm",
                "pipeline", "unfrozen_tail_layers")
        return ckpt.combined_fingerprint(num_classes, *(getattr(self, k) for k in keys))


# ------------------------------------------------------------------ windows

def window_indices(t, length, window=10):
    """Frame indices ``t - window//2 ... t + window - window//2 - 1`` clamped to the clip."""
    if not 0 <= t < length:
        raise IndexError(f"frame {t} outside clip of length {length}")
    back = window // 2
    return np.clip(np.arange(t - back, t - back + window), 0, length - 1)


def sliding_window(clip, t, window=10):
    """(window, H, W, 3) frames centred on ``t`` with edge replication."""
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    return frames[window_indices(t, len(frames), window)]


def to_tensor(frames):
    """uint8 (..., H, W, 3) -> float [0, 1] channels-first; windows become (3, T, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(frames)).float() / 255.0
    if x.ndim == 4:
        return x.permute(3, 0, 1, 2)
    return x.permute(2, 0, 1)


# ------------------------------------------------------------------ schedule

@dataclass
class ScheduleState:
    iteration: int = 1

    @property
    def phase(self):
        return "mitigation" if self.iteration % 2 == 1 else "detection"

    def advance(self):
        self.iteration += 1
        return self


@dataclass
class Sample:
    window: torch.Tensor  # (3, T, H, W) distorted
    target: torch.Tensor  # (3, H, W) clean centre frame
    raw: torch.Tensor  # (3, H, W) distorted centre frame
    labels: torch.Tensor
    boxes: torch.Tensor  # (G, 4) normalised cxcywh


@dataclass
class Batch:
    windows: torch.Tensor
    targets: torch.Tensor
    raw: torch.Tensor
    labels: List[torch.Tensor]
    boxes: List[torch.Tensor]

    @classmethod
    def collate(cls, samples: Sequence[Sample], device="cpu"):
        return cls(torch.stack([s.window for s in samples]).to(device),
                   torch.stack([s.target for s in samples]).to(device),
                   torch.stack([s.raw for s in samples]).to(device),
                   [s.labels.to(device) for s in samples], [s.boxes.to(device) for s in samples])


class WindowDataset:
    """All (clip, centre frame) windows of a list of (clean, distorted) clip pairs."""

    def __init__(self, pairs: Sequence[Tuple[VideoClip, VideoClip]], window=10, center_stride=1):
        if not pairs:
            raise ValueError("no clips to train on")
        self.pairs = list(pairs)
        self.window = window
        self.index = [(i, t) for i, (c, _) in enumerate(self.pairs) for t in range(0, len(c), center_stride)]

    @classmethod
    def from_manifest(cls, manifest: Manifest, window=10, center_stride=1):
        pairs = []
        for e in manifest.entries:
            if e.distorted_path is None:
                raise ValueError(f"clip {e.clip_id} has no distorted version; run the distort stage first")
            pairs.append((load_clip(manifest.resolve(e.clean_path)), load_clip(manifest.resolve(e.distorted_path))))
        return cls(pairs, window, center_stride)

    def __len__(self):
        return len(self.index)

    def __getitem__(self, k) -> Sample:
        i, t = self.index[k]
        clean, dist = self.pairs[i]
        boxes = clean.boxes
        return Sample(
            to_tensor(sliding_window(dist, t, self.window)),
            to_tensor(clean.frames[t]),
            to_tensor(dist.frames[t]),
            torch.tensor([b.class_id for b in boxes], dtype=torch.long),
            torch.tensor([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=torch.float32).reshape(-1, 4),
        )

    def epoch_order(self, seed, epoch):
        return np.random.default_rng([seed, epoch]).permutation(len(self))


# ------------------------------------------------------------------ models

def build_models(config: TrainConfig, num_classes):
    mitigator = None
    if config.pipeline == "alternating":
        if config.model_scale == "toy":
            mitigator = Mitigator.toy(config.window)
        else:
            reg = RegistrationConfig(window=config.window)
            mitigator = Mitigator(reg, EnhancementConfig(reg_channels=reg.channels[0], window=config.window))
    pyr = mitigator.enhancement.config.pyramid_width if mitigator else 0
    regc = mitigator.enhancement.config.widths[0] if mitigator else 0
    det_cfg = DetectorConfig.tier(config.detector_tier, num_classes=num_classes, num_queries=config.num_queries,
                                  token_stride=config.token_stride, norm=config.transformer_norm,
                                  pyramid_width=pyr, reg_channels=regc)
    return mitigator, Detector(det_cfg)


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def detection_loss(out, labels, boxes, weights=DEFAULT_DETECT_WEIGHTS):
    """Matched box L1, GIoU and label losses, averaged over the batch."""
    probs = out["logits"].sigmoid()
    l_box, l_giou, l_lab = [], [], []
    for b in range(probs.shape[0]):
        q_idx, g_idx = match(probs[b], out["boxes"][b], labels[b], boxes[b])
        q_idx = torch.as_tensor(q_idx, device=probs.device)
        g_idx = torch.as_tensor(g_idx, device=probs.device)
        positive = torch.zeros_like(probs[b], dtype=torch.bool)
        iou_t = torch.zeros_like(probs[b])
        if len(q_idx):
            pb, gb = out["boxes"][b][q_idx], boxes[b][g_idx]
            iou, _ = box_iou_giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))
            cls = labels[b][g_idx]
            positive[q_idx, cls] = True
            iou_t[q_idx, cls] = iou.detach()
            l_box.append(box_l1(pb, gb))
            l_giou.append(giou_loss(pb, gb))
        l_lab.append(label_loss(probs[b], iou_t, positive))
    zero = probs.sum() * 0
    mean = lambda xs: torch.stack(xs).mean() if xs else zero  # noqa: E731
    return aggregate(0.0, mean(l_box), mean(l_giou), mean(l_lab), weights)


class AlternatingTrainer:
    """Owns the models, the two per-phase optimizers and the schedule state."""

    def __init__(self, config: TrainConfig, num_classes, mitigator=None, detector=None):
        self.config = config
        self.num_classes = num_classes
        torch.manual_seed(config.seed)
        if mitigator is None and detector is None:
            mitigator, detector = build_models(config, num_classes)
        dev = torch.device(config.device)
        self.mitigator = mitigator.to(dev) if mitigator is not None else None
        self.detector = detector.to(dev)
        self.state = ScheduleState()
        self.epoch = 0
        if self.mitigator is not None:
            self.layer_order = self.mitigator.layer_order()
            if config.unfrozen_tail_layers > len(self.layer_order):
                raise ValueError(f"unfrozen_tail_layers={config.unfrozen_tail_layers} exceeds the "
                                 f"{len(self.layer_order)} mitigator layers")
            self.tail_names = self.mitigator.tail_layers(config.unfrozen_tail_layers)
            modules = dict(self.mitigator.named_modules())
            self.tail_params = [p for n in self.tail_names for p in modules[n].parameters(recurse=False)]
            tail_ids = {id(p) for p in self.tail_params}
            self.frozen_params = [p for p in self.mitigator.parameters() if id(p) not in tail_ids]
            self.mit_opt = torch.optim.Adam(self.mitigator.parameters(), lr=config.lr)
        else:
            self.layer_order, self.tail_names, self.tail_params, self.frozen_params = [], [], [], []
            self.mit_opt = None
        self.det_opt = torch.optim.Adam(list(self.detector.parameters()) + self.tail_params, lr=config.lr)

    @property
    def fingerprint(self):
        return self.config.model_fingerprint(self.num_classes)

    # -------------------------------------------------------------- steps

    def _mitigation_step(self, batch: Batch):
        self.mitigator.train()
        for p in self.mitigator.parameters():
            p.requires_grad_(True)
        out = self.mitigator(batch.windows)
        loss = charbonnier(out.mitigated, batch.targets)
        self.mit_opt.zero_grad(set_to_none=True)
        loss.backward()
        self._clip(self.mitigator.parameters())
        self.mit_opt.step()
        return aggregate(loss_turb=float(loss.detach()), weights=self.config.detect_weights)

    def _clip(self, params):
        if self.config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)

    def _set_detection_mode(self):
        self.detector.train()
        if self.mitigator is None:
            return
        # frozen layers (and their batch-norm statistics) stay exactly as they are
        self.mitigator.eval()
        for p in self.frozen_params:
            p.requires_grad_(False)
        modules = dict(self.mitigator.named_modules())
        for n in self.tail_names:
            modules[n].train()
            for p in modules[n].parameters(recurse=False):
                p.requires_grad_(True)

    def _detection_step(self, batch: Batch):
        self._set_detection_mode()
        if self.mitigator is None:
            out = self.detector(batch.raw)
        else:
            m = self.mitigator(batch.windows)
            out = self.detector(m.mitigated, m.reg_features, m.pyramid)
        lb = detection_loss(out, batch.labels, batch.boxes, self.config.detect_weights)
        self.det_opt.zero_grad(set_to_none=True)
        lb.loss_detect.backward()
        self._clip(list(self.detector.parameters()) + self.tail_params)
        self.det_opt.step()
        return aggregate(0.0, _scalar(lb.l_boxes), _scalar(lb.l_giou), _scalar(lb.l_labels), self.config.detect_weights)

    def run_phase(self, batch: Batch, phase):
        """One update of the given phase without touching the schedule."""
        if phase == "mitigation":
            if self.mitigator is None:
                raise ValueError("the raw pipeline has no mitigator to update")
            return self._mitigation_step(batch)
        if phase == "detection":
            return self._detection_step(batch)
        raise ValueError(f"unknown phase {phase!r}")

    def alternating_step(self, batch: Batch):
        """One optimizer step in the phase given by the current iteration's parity."""
        phase = self.state.phase
        if self.mitigator is None:
            phase = "detection"
        lb = self._mitigation_step(batch) if phase == "mitigation" else self._detection_step(batch)
        rec = dict(iter=self.state.iteration, phase=phase, epoch=self.epoch, **lb.as_record())
        self.state.advance()
        return lb, rec

    # -------------------------------------------------------------- checkpoints

    def save(self, path):
        payload = {
            "fingerprint": self.fingerprint,
            "train_config": self.config.to_dict(),
            "num_classes": self.num_classes,
            "detector_config": self.detector.config.to_dict(),
            "detector": self.detector.state_dict(),
            "det_opt": self.det_opt.state_dict(),
            "param_shapes": {"detector": ckpt.param_shapes(self.detector)},
            "layer_order": self.layer_order,
            "tail_layers": self.tail_names,
            "schedule": {"iteration": self.state.iteration},
            "epoch": self.epoch,
            "torch_rng": torch.get_rng_state(),
        }
        if self.mitigator is not None:
            payload.update(mitigator=self.mitigator.state_dict(), mit_opt=self.mit_opt.state_dict(),
                           mitigator_fingerprint=self.mitigator.fingerprint())
            payload["param_shapes"]["mitigator"] = ckpt.param_shapes(self.mitigator)
        return ckpt.save_checkpoint(path, payload)

    def load(self, path, weights_only=False):
        data = ckpt.load_checkpoint(path, self.fingerprint, self.layer_order)
        ckpt.load_state(self.detector, data["detector"], "detector")
        if self.mitigator is not None:
            ckpt.load_state(self.mitigator, data["mitigator"], "mitigator")
        if not weights_only:
            self.det_opt.load_state_dict(data["det_opt"])
            if self.mitigator is not None:
                self.mit_opt.load_state_dict(data["mit_opt"])
            self.state = ScheduleState(int(data["schedule"]["iteration"]))
            self.epoch = int(data["epoch"])
            torch.set_rng_state(data["torch_rng"])
        return data


def checkpoint_name(epoch):
    return f"epoch_{epoch:04d}.pt"


def latest_checkpoint(out_dir):
    found = sorted(Path(out_dir).glob("epoch_*.pt"))
    return found[-1] if found else None


def train(config: TrainConfig, data: WindowDataset, out_dir, num_classes, resume=False, trainer=None,
          on_step=None):
    """Run the alternating schedule over ``data`` for ``config.epochs`` epochs.

    Writes one checkpoint per epoch and a JSON-lines log with one record per
    step into ``out_dir``. With ``resume`` the latest checkpoint is loaded
    (its config fingerprint must match) and training continues after it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = trainer or AlternatingTrainer(config, num_classes)
    log_path = out / "train_log.jsonl"
    if resume:
        last = latest_checkpoint(out)
        if last is None:
            raise ckpt.CheckpointError(f"nothing to resume in {out}")
        trainer.load(last)
        log.info("resumed from %s at iteration %d", last, trainer.state.iteration)
    elif log_path.exists():
        log_path.unlink()
    device = torch.device(config.device)
    n_batches = len(data) // config.batch_size or 1
    steps = trainer.state.iteration - 1
    with open(log_path, "a") as fh:
        while trainer.epoch < config.epochs:
            order = data.epoch_order(config.seed, trainer.epoch)
            for b in range(n_batches):
                if config.max_steps is not None and steps >= config.max_steps:
                    break
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                batch = Batch.collate([data[int(i)] for i in idx], device)
                _, rec = trainer.alternating_step(batch)
                fh.write(json.dumps(rec) + "\n")
                steps += 1
                if on_step is not None:
                    on_step(rec)
            fh.flush()
            trainer.epoch += 1
            trainer.save(out / checkpoint_name(trainer.epoch))
            if config.max_steps is not None and steps >= config.max_steps:
                break
    return trainer


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
