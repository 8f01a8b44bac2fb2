"""Set-prediction transformer detector fed by the restored frame and mitigator features."""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

# embed_dim, heads, backbone_depth, backbone_width
TIERS = {
    "tiny": (64, 2, 10, 16),
    "small": (128, 4, 18, 32),
    "medium": (192, 6, 26, 48),
}


@dataclass(frozen=True)
class DetectorConfig:
    size_tier: str = "tiny"
    num_classes: int = 2
    num_queries: int = 25
    embed_dim: int = 64
    heads: int = 2
    backbone_depth: int = 10
    backbone_width: int = 16
    encoder_blocks: int = 6
    decoder_blocks: int = 3
    ffn_ratio: int = 4
    norm: str = "batch"
    token_stride: int = 16
    pyramid_width: int = 0
    reg_channels: int = 0
    fusion: str = "token-concat"

    def __post_init__(self):
        if self.encoder_blocks != 6 or self.decoder_blocks != 3:
            raise ValueError("the detector uses exactly 6 encoder and 3 decoder blocks")
        if (self.backbone_depth - 2) % 8 or not 10 <= self.backbone_depth <= 26:
            raise ValueError("backbone_depth must be one of 10, 18, 26")
        if self.norm not in ("batch", "layer"):
            raise ValueError("norm must be 'batch' or 'layer'")
        if self.token_stride not in (8, 16, 32):
            raise ValueError("token_stride must be 8, 16 or 32")

    @classmethod
    def tier(cls, name="tiny", **overrides):
        if name not in TIERS:
            raise ValueError(f"unknown size tier {name!r}; choose from {sorted(TIERS)}")
        e, h, d, w = TIERS[name]
        return replace(cls(size_tier=name, embed_dim=e, heads=h, backbone_depth=d, backbone_width=w), **overrides)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


# ------------------------------------------------------------------ backbone

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.short is None else self.short(x)))


class Backbone(nn.Module):
    """Reduced residual network; ``depth = 2 + 8 * blocks_per_stage``. Returns stride 8/16/32 maps."""

    def __init__(self, depth=10, width=16):
        super().__init__()
        blocks = (depth - 2) // 8
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 2, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        chans = [width, width * 2, width * 4, width * 8]
        stages = []
        cin = width
        for c in chans:
            stages.append(nn.Sequential(*[BasicBlock(cin if i == 0 else c, c, 2 if i == 0 else 1)
                                          for i in range(blocks)]))
            cin = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(chans[1:])

    def forward(self, x):
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"frame size {tuple(x.shape[-2:])} must be divisible by 32")
        x = self.stem(x)
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                outs.append(x)
        return outs  # strides 8, 16, 32


# ------------------------------------------------------------------ transformer parts

class TokenNorm(nn.Module):
    """Per-channel normalisation of (N, L, E) tokens over batch and tokens, or LayerNorm."""

    def __init__(self, dim, kind="batch"):
        super().__init__()
        self.kind = kind
        self.norm = nn.BatchNorm1d(dim) if kind == "batch" else nn.LayerNorm(dim)

    def forward(self, x):
        if self.kind == "batch":
            N, L, E = x.shape
            return self.norm(x.reshape(N * L, E)).view(N, L, E)
        return self.norm(x)


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, ffn_dim, norm):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = TokenNorm(dim, norm)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm2 = TokenNorm(dim, norm)

    def forward(self, x):
        x = self.norm1(x + self.attn(x, x, x, need_weights=False)[0])
        return self.norm2(x + self.ffn(x))


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads, ffn_dim, norm):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = TokenNorm(dim, norm)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = TokenNorm(dim, norm)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Linear(ffn_dim, dim))
        self.norm3 = TokenNorm(dim, norm)

    def forward(self, q, memory, query_pos):
        h = q + query_pos
        q = self.norm1(q + self.self_attn(h, h, q, need_weights=False)[0])
        q = self.norm2(q + self.cross_attn(q + query_pos, memory, memory, need_weights=False)[0])
        return self.norm3(q + self.ffn(q))


def sine_position_encoding(h, w, dim, device=None, dtype=torch.float32, temperature=10000.0):
    """(h*w, dim) 2-D sinusoidal encoding; first half encodes y, second half x."""
    if dim % 4:
        raise ValueError("embedding dim must be divisible by 4")
    npf = dim // 2
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w * 2 * math.pi
    dim_t = temperature ** (2 * (torch.arange(npf, device=device, dtype=dtype) // 2) / npf)
    py = ys[:, None] / dim_t
    px = xs[:, None] / dim_t
    py = torch.stack([py[:, 0::2].sin(), py[:, 1::2].cos()], dim=2).flatten(1)
    px = torch.stack([px[:, 0::2].sin(), px[:, 1::2].cos()], dim=2).flatten(1)
    return torch.cat([py[:, None, :].expand(h, w, npf), px[None, :, :].expand(h, w, npf)], dim=-1).reshape(h * w, dim)


def _resize(x, size):
    if x.shape[-2:] == size:
        return x
    if x.shape[-2] >= size[0]:
        return F.adaptive_avg_pool2d(x, size)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


# ------------------------------------------------------------------ detector

class Detector(nn.Module):
    def __init__(self, config: DetectorConfig = DetectorConfig()):
        super().__init__()
        self.config = config
        E = config.embed_dim
        self.backbone = Backbone(config.backbone_depth, config.backbone_width)
        fused_in = sum(self.backbone.out_channels) + 3 * config.pyramid_width
        self.input_proj = nn.Sequential(nn.Conv2d(fused_in, E, 1), nn.BatchNorm2d(E), nn.ReLU(),
                                        nn.Conv2d(E, E, 3, padding=1))
        self.reg_proj = nn.Conv2d(config.reg_channels, E, 1) if config.reg_channels else None
        ffn = E * config.ffn_ratio
        self.encoder = nn.ModuleList(EncoderBlock(E, config.heads, ffn, config.norm) for _ in range(config.encoder_blocks))
        # aggregate the outputs of encoder blocks 2, 4 and 6 into the decoder memory
        self.memory_fuse = nn.Linear(3 * E, E)
        self.memory_norm = TokenNorm(E, config.norm)
        self.query_embed = nn.Embedding(config.num_queries, E)
        self.query_pos = nn.Embedding(config.num_queries, E)
        self.decoder = nn.ModuleList(DecoderBlock(E, config.heads, ffn, config.norm) for _ in range(config.decoder_blocks))
        self.class_head = nn.Linear(E, config.num_classes)
        self.box_head = nn.Sequential(nn.Linear(E, E), nn.ReLU(), nn.Linear(E, E), nn.ReLU(), nn.Linear(E, 4))
        nn.init.constant_(self.class_head.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.zeros_(self.box_head[-1].bias)

    def extract_backbone_features(self, frame):
        return self.backbone(frame - 0.5)

    def token_maps(self, frame, reg_features=None, pyramid=None):
        feats = self.extract_backbone_features(frame)
        H, W = frame.shape[-2:]
        size = (H // self.config.token_stride, W // self.config.token_stride)
        maps = [_resize(f, size) for f in feats]
        if self.config.pyramid_width:
            if pyramid is None:
                pyramid = [frame.new_zeros((frame.shape[0], self.config.pyramid_width, 1, 1))] * 3
            maps += [_resize(p, size) for p in pyramid]
        out = [self.input_proj(torch.cat(maps, dim=1))]
        if self.reg_proj is not None and reg_features is not None:
            out.append(self.reg_proj(_resize(reg_features, size)))
        return out

    def encode(self, maps, use_pos=True):
        """Flatten each (N, E, h, w) map to tokens, add positions, concatenate, run the encoder."""
        tokens = []
        for m in maps:
            N, E, h, w = m.shape
            t = m.flatten(2).transpose(1, 2)
            if use_pos:
                t = t + sine_position_encoding(h, w, E, m.device, m.dtype)
            tokens.append(t)
        x = torch.cat(tokens, dim=1)
        taps = []
        for i, blk in enumerate(self.encoder):
            x = blk(x)
            if i % 2 == 1:
                taps.append(x)
        return self.memory_norm(self.memory_fuse(torch.cat(taps, dim=-1)))

    def decode(self, memory):
        N = memory.shape[0]
        q = self.query_embed.weight.unsqueeze(0).expand(N, -1, -1)
        pos = self.query_pos.weight.unsqueeze(0).expand(N, -1, -1)
        for blk in self.decoder:
            q = blk(q, memory, pos)
        return q

    def predict(self, embeddings):
        return {"logits": self.class_head(embeddings), "boxes": self.box_head(embeddings).sigmoid()}

    def forward(self, frame, reg_features=None, pyramid=None):
        memory = self.encode(self.token_maps(frame, reg_features, pyramid))
        return self.predict(self.decode(memory))


def detections_from_output(out, score_floor=0.0):
    """Per-image lists of (cx, cy, w, h, class_id, score) from a detector output dict."""
    probs = out["logits"].detach().sigmoid()
    scores, classes = probs.max(dim=-1)
    results = []
    for b in range(probs.shape[0]):
        keep = scores[b] >= score_floor
        boxes = out["boxes"][b].detach()[keep]
        results.append([(*(float(v) for v in bx), int(c), float(s))
                        for bx, c, s in zip(boxes, classes[b][keep], scores[b][keep])])
    return results
