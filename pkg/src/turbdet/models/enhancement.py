"""Enhancement UNet: 3D stem, residual SSM encoder, double-conv decoder, channel-attention tail."""
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ssm import SelectiveSSM


@dataclass(frozen=True)
class EnhancementConfig:
    stem_kernel: Tuple[int, int, int] = (3, 7, 7)
    widths: Tuple[int, ...] = (32, 32, 64, 128)  # stem, then one per residual SSM level
    state_dim: int = 16
    pyramid_width: int = 64
    heads: int = 4
    ffn_expansion: int = 2
    reg_channels: int = 32
    window: int = 10
    tail_attention: str = "channel-per-frame"

    def __post_init__(self):
        object.__setattr__(self, "stem_kernel", tuple(int(k) for k in self.stem_kernel))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 4:
            raise ValueError("widths needs a stem width plus three encoder widths")
        if self.widths[0] % self.heads:
            raise ValueError("stem width must be divisible by heads")

    @classmethod
    def toy(cls, reg_channels=4, window=10):
        return cls((3, 7, 7), (8, 8, 16, 16), 4, 16, 2, 2, reg_channels, window)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


class Conv1(nn.Sequential):
    """1x1x1 convolution, batch norm, ReLU."""

    def __init__(self, cin, cout):
        super().__init__(nn.Conv3d(cin, cout, 1), nn.BatchNorm3d(cout), nn.ReLU())


class ResMambaBlock(nn.Module):
    """``out = conv_out(ssm(conv_in(x))) + conv_skip(x)`` with channel count preserved."""

    def __init__(self, channels, state_dim=16):
        super().__init__()
        self.channels = channels
        self.conv_in = Conv1(channels, channels)
        self.ssm = SelectiveSSM(channels, state_dim)
        self.conv_out = Conv1(channels, channels)
        self.conv_skip = Conv1(channels, channels)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return self.conv_out(self.ssm(self.conv_in(x))) + self.conv_skip(x)


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1), nn.BatchNorm3d(cout), nn.ReLU(),
            nn.Conv3d(cout, cout, 3, padding=1), nn.BatchNorm3d(cout), nn.ReLU(),
        )


class ChannelNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of an (N, C, H, W) map."""

    def forward(self, x):
        return super().forward(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class ChannelAttention(nn.Module):
    """Multi-head attention across channels (cost linear in pixel count)."""

    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, 3 * dim, 1)
        self.proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        N, C, H, W = x.shape
        q, k, v = self.qkv(x).reshape(N, 3, self.heads, C // self.heads, H * W).unbind(1)
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.temperature, dim=-1)
        return self.proj((attn @ v).reshape(N, C, H, W))


class TransformerBlock(nn.Module):
    def __init__(self, dim, heads, expansion=2):
        super().__init__()
        self.norm1 = ChannelNorm(dim)
        self.attn = ChannelAttention(dim, heads)
        self.norm2 = ChannelNorm(dim)
        self.ffn = nn.Sequential(nn.Conv2d(dim, dim * expansion, 1), nn.GELU(), nn.Conv2d(dim * expansion, dim, 1))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def _up(x, like):
    return F.interpolate(x, size=like.shape[2:], mode="trilinear", align_corners=False)


class EnhancementOutput:
    def __init__(self, mitigated, pyramid, stem_features):
        self.mitigated = mitigated  # (N, 3, H, W)
        self.pyramid = pyramid  # [(N, P, H/2, W/2), (N, P, H/4, W/4), (N, P, H/8, W/8)]
        self.stem_features = stem_features  # (N, w0, H, W), temporal mean of the stem output


class EnhancementNet(nn.Module):
    """Fuse a registered window into one restored frame plus detector features.

    The restored frame is the temporal mean of the registered window plus a
    learned residual.
    """

    def __init__(self, config: EnhancementConfig = EnhancementConfig()):
        super().__init__()
        self.config = config
        w0, w1, w2, w3 = config.widths
        kt, kh, kw = config.stem_kernel
        self.reg_proj = nn.Conv3d(config.reg_channels, w0, 1)
        self.stem = nn.Sequential(nn.Conv3d(3, w0, config.stem_kernel, padding=(kt // 2, kh // 2, kw // 2)),
                                  nn.BatchNorm3d(w0), nn.ReLU())
        self.pool = nn.MaxPool3d((1, 2, 2))
        self.downs = nn.ModuleList([Conv1(w0, w1), Conv1(w1, w2), Conv1(w2, w3)])
        self.encoder = nn.ModuleList([ResMambaBlock(w, config.state_dim) for w in (w1, w2, w3)])
        self.pyramid_proj = nn.ModuleList([nn.Conv3d(w, config.pyramid_width, 1) for w in (w1, w2, w3)])
        self.decoder = nn.ModuleList([DoubleConv(w3 + w2, w2), DoubleConv(w2 + w1, w1), DoubleConv(w1 + w0, w0)])
        self.temporal_fuse = nn.Conv2d(w0 * config.window, w0, 1)
        self.tail = nn.ModuleList([TransformerBlock(w0, config.heads, config.ffn_expansion) for _ in range(2)])
        self.out_conv = nn.Conv2d(w0, 3, 3, padding=1)

    def forward(self, registered, reg_features: Optional[torch.Tensor] = None) -> EnhancementOutput:
        N, C, T, H, W = registered.shape
        if T != self.config.window:
            raise ValueError(f"window length {T} != configured {self.config.window}")
        if C != 3 or H % 8 or W % 8:
            raise ValueError("registered frames must be (N, 3, T, H, W) with H, W divisible by 8")
        s = self.stem(registered - 0.5)
        if reg_features is not None:
            s = s + self.reg_proj(reg_features)
        feats = []
        x = s
        for down, block in zip(self.downs, self.encoder):
            x = block(down(self.pool(x)))
            feats.append(x)
        e1, e2, e3 = feats
        d = self.decoder[0](torch.cat([_up(e3, e2), e2], dim=1))
        d = self.decoder[1](torch.cat([_up(d, e1), e1], dim=1))
        d = self.decoder[2](torch.cat([_up(d, s), s], dim=1))
        y = self.temporal_fuse(d.reshape(N, -1, H, W))
        for blk in self.tail:
            y = blk(y)
        mitigated = registered.mean(dim=2) + self.out_conv(y)
        pyramid = [proj(f).mean(dim=2) for proj, f in zip(self.pyramid_proj, feats)]
        return EnhancementOutput(mitigated, pyramid, s.mean(dim=2))
