"""Multi-scale registration UNet built from deformable 3D convolutions."""
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .deform import DeformConv3d


@dataclass(frozen=True)
class RegistrationConfig:
    kernel_sizes: Tuple[Tuple[int, int, int], ...] = ((3, 7, 7), (3, 7, 7), (3, 5, 5), (3, 3, 3))
    channels: Tuple[int, ...] = (32, 128, 128, 256)
    levels: int = 4
    window: int = 10
    offset_hidden: int = 8

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(tuple(int(v) for v in k) for k in self.kernel_sizes))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.kernel_sizes) != self.levels or len(self.channels) != self.levels:
            raise ValueError("kernel_sizes and channels must both have one entry per level")
        if self.window < 1:
            raise ValueError("window must be positive")

    @classmethod
    def toy(cls, window=10):
        """Narrow variant for CPU overfit runs (same depth, 3x3x3 taps)."""
        return cls(((3, 3, 3),) * 4, (4, 8, 8, 16), 4, window, 4)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


class DeformBlock(nn.Module):
    def __init__(self, cin, cout, kernel, offset_hidden):
        super().__init__()
        self.conv = DeformConv3d(cin, cout, kernel, offset_hidden)
        self.bn = nn.BatchNorm3d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


def warp_frames(frames, field, center=None):
    """Backward-warp each frame: ``out[t](p) = frames[t](p + field[t](p))``.

    frames: (N, C, T, H, W); field: (N, T, H, W, 2) in pixels, (dx, dy).
    Bilinear sampling with edge replication. The ``center`` frame, if given,
    is passed through unwarped.
    """
    N, C, T, H, W = frames.shape
    if field.shape != (N, T, H, W, 2):
        raise ValueError(f"field must be {(N, T, H, W, 2)}, got {tuple(field.shape)}")
    if center is not None:
        keep = torch.ones(1, T, 1, 1, 1, dtype=field.dtype, device=field.device)
        keep[:, center] = 0
        field = field * keep
    ys, xs = torch.meshgrid(torch.arange(H, dtype=frames.dtype, device=frames.device),
                            torch.arange(W, dtype=frames.dtype, device=frames.device), indexing="ij")
    gx = 2 * (xs + field[..., 0]) / max(W - 1, 1) - 1
    gy = 2 * (ys + field[..., 1]) / max(H - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).reshape(N * T, H, W, 2)
    src = frames.permute(0, 2, 1, 3, 4).reshape(N * T, C, H, W)
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.view(N, T, C, H, W).permute(0, 2, 1, 3, 4)


@dataclass
class RegistrationOutput:
    fields: List[torch.Tensor]  # per level, (N, T, H_l, W_l, 2)
    registered: torch.Tensor  # (N, 3, T, H, W)
    features: torch.Tensor  # level-0 decoder features (N, c0, T, H, W)


class RegistrationNet(nn.Module):
    """Encoder/decoder with deformable blocks at every scale, one motion field per scale.

    Encoder levels are separated by spatial max-pooling, decoder levels by
    trilinear upsampling. Each decoder level sees the upsampled coarser
    features and coarser motion field; only the finest field warps frames.
    """

    def __init__(self, config: RegistrationConfig = RegistrationConfig()):
        super().__init__()
        self.config = config
        ch, ks, hid = config.channels, config.kernel_sizes, config.offset_hidden
        L = config.levels
        self.encoders = nn.ModuleList(
            DeformBlock(3 if l == 0 else ch[l - 1], ch[l], ks[l], hid) for l in range(L))
        self.pool = nn.MaxPool3d((1, 2, 2))
        self.fusers = nn.ModuleList(nn.Conv3d(ch[l + 1] + ch[l] + 2, ch[l], 1) for l in range(L - 1))
        self.decoders = nn.ModuleList(DeformBlock(ch[l], ch[l], ks[l], hid) for l in range(L))
        self.heads = nn.ModuleList(nn.Conv3d(ch[l], 2, 1) for l in range(L))
        for h in self.heads:
            nn.init.normal_(h.weight, std=1e-3)
            nn.init.zeros_(h.bias)

    @property
    def center(self):
        return self.config.window // 2

    def forward(self, frames) -> RegistrationOutput:
        N, C, T, H, W = frames.shape
        L = self.config.levels
        if T != self.config.window:
            raise ValueError(f"window length {T} != configured {self.config.window}")
        if C != 3 or H % 2 ** (L - 1) or W % 2 ** (L - 1):
            raise ValueError(f"frames must be (N, 3, T, H, W) with H, W divisible by {2 ** (L - 1)}")
        x = frames - 0.5
        skips = []
        for l, enc in enumerate(self.encoders):
            x = enc(x if l == 0 else self.pool(x))
            skips.append(x)
        d = self.decoders[-1](skips[-1])
        flow = self.heads[-1](d)
        fields = [flow]
        for l in range(L - 2, -1, -1):
            size = skips[l].shape[2:]
            up = F.interpolate(d, size=size, mode="trilinear", align_corners=False)
            fup = F.interpolate(flow, size=size, mode="trilinear", align_corners=False) * 2
            d = self.decoders[l](self.fusers[l](torch.cat([up, skips[l], fup], dim=1)))
            flow = self.heads[l](d)
            fields.insert(0, flow)
        fields = [f.permute(0, 2, 3, 4, 1) for f in fields]
        registered = warp_frames(frames, fields[0], self.center)
        return RegistrationOutput(fields, registered, d)


def estimate_motion(net: RegistrationNet, window):
    """Motion fields for one (T, H, W, 3) uint8 or [0, 1] float window, as numpy arrays."""
    arr = np.asarray(window)
    x = torch.as_tensor(arr, dtype=torch.float32)
    if arr.dtype == np.uint8:
        x = x / 255.0
    with torch.no_grad():
        out = net(x.permute(3, 0, 1, 2).unsqueeze(0))
    return [f[0].numpy() for f in out.fields]
