"""Selective state-space layer with a chunked parallel scan."""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

# per-step log-decays below -LOG_DECAY_FLOOR are clamped; e^-40 ~ 4e-18
LOG_DECAY_FLOOR = 40.0
SCAN_CHUNK = 16


def linear_recurrence(log_decay, drive, chunk=SCAN_CHUNK):
    """Solve ``x_k = exp(log_decay_k) * x_{k-1} + drive_k`` (x_0 = 0) along dim 1.

    Within a chunk the states are ``exp(S_k) * cumsum(exp(-S_j) * drive_j)``
    with ``S`` the running log-decay; chunk lengths keep ``|S|`` under ~640,
    inside float64 range. Chunk boundary states are propagated by the same
    routine applied recursively to the chunk-level sequence.
    """
    log_decay = log_decay.clamp(min=-LOG_DECAY_FLOOR)
    B, L = log_decay.shape[:2]
    rest = log_decay.shape[2:]
    nc = math.ceil(L / chunk)
    pad = nc * chunk - L
    if pad:
        zeros = log_decay.new_zeros((B, pad) + rest)
        log_decay = torch.cat([log_decay, zeros], dim=1)
        drive = torch.cat([drive, zeros], dim=1)
    ld = log_decay.reshape((B, nc, chunk) + rest)
    dr = drive.reshape((B, nc, chunk) + rest)
    S = ld.cumsum(dim=2)
    local = torch.exp(S) * torch.cumsum(torch.exp(-S) * dr, dim=2)
    if nc > 1:
        carry = linear_recurrence(S[:, :, -1], local[:, :, -1], chunk)
        prev = torch.cat([carry.new_zeros((B, 1) + rest), carry[:, :-1]], dim=1)
        local = local + torch.exp(S) * prev.unsqueeze(2)
    return local.reshape((B, nc * chunk) + rest)[:, :L]


def selective_scan(u, delta, A, B, C, chunk=SCAN_CHUNK):
    """Parallel selective scan.

    u, delta: (batch, L, D); A: (D, N) (negative real, diagonal);
    B, C: (batch, L, N). Returns y (batch, L, D) with
    ``x_k = exp(delta_k A) x_{k-1} + delta_k B_k u_k`` and ``y_k = C_k . x_k``.
    Computed in float64 and cast back to the input dtype.
    """
    dtype = u.dtype
    u, delta, A, B, C = (t.double() for t in (u, delta, A, B, C))
    log_decay = (delta.unsqueeze(-1) * A).clamp(min=-LOG_DECAY_FLOOR)  # (b, L, D, N)
    drive = (delta * u).unsqueeze(-1) * B.unsqueeze(2)
    x = linear_recurrence(log_decay, drive, chunk)
    y = torch.einsum("bldn,bln->bld", x, C)
    if not torch.isfinite(y).all():
        bad = (~torch.isfinite(y)).flatten(0, 1).any(0).nonzero().flatten().tolist()
        raise FloatingPointError(f"non-finite SSM state in channel(s) {bad}")
    return y.to(dtype)


def _ident(x):
    return x


def _flip_w(x):
    return x.flip(-1)


def _flip_h(x):
    return x.flip(-2)


def _rot90(x):
    return torch.rot90(x, 1, dims=(-2, -1))


def _rot90_inv(x):
    return torch.rot90(x, -1, dims=(-2, -1))


# (forward, inverse) pairs applied to the spatial axes before flattening
AUGMENTATIONS = ((_ident, _ident), (_flip_w, _flip_w), (_flip_h, _flip_h), (_rot90, _rot90_inv))


class SelectiveSSM(nn.Module):
    """Mamba-style selective SSM over the spatial raster of every frame.

    Input and output are (N, C, T, H, W). The layer scans four views of the
    volume (identity, horizontal flip, vertical flip, 90 degree rotation),
    undoes each view and averages; all views share parameters.
    """

    def __init__(self, channels, state_dim=16, expand=1, augmentations=AUGMENTATIONS):
        super().__init__()
        inner = channels * expand
        self.norm = nn.LayerNorm(channels)
        self.in_proj = nn.Linear(channels, 2 * inner)
        self.dt_proj = nn.Linear(inner, inner)
        self.B_proj = nn.Linear(inner, state_dim, bias=False)
        self.C_proj = nn.Linear(inner, state_dim, bias=False)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state_dim + 1, dtype=torch.float32)).repeat(inner, 1))
        self.out_proj = nn.Linear(inner, channels)
        self.augmentations = tuple(augmentations)
        for lin in (self.in_proj, self.out_proj):
            nn.init.zeros_(lin.bias)
        # softplus(-2) ~ 0.13: moderate initial step size
        nn.init.constant_(self.dt_proj.bias, -2.0)

    @property
    def A(self):
        return -torch.exp(self.A_log)

    def scan_tokens(self, tokens):
        """(batch, L, C) -> (batch, L, C)."""
        h = self.norm(tokens)
        u, z = self.in_proj(h).chunk(2, dim=-1)
        u = F.silu(u)
        delta = F.softplus(self.dt_proj(u))
        y = selective_scan(u, delta, self.A, self.B_proj(u), self.C_proj(u))
        return self.out_proj(y * F.silu(z))

    def forward(self, x):
        N, C, T, H, W = x.shape
        out = 0
        for fwd, inv in self.augmentations:
            v = fwd(x)
            h, w = v.shape[-2:]
            tokens = v.permute(0, 2, 3, 4, 1).reshape(N * T, h * w, C)
            y = self.scan_tokens(tokens).reshape(N, T, h, w, C).permute(0, 4, 1, 2, 3)
            out = out + inv(y)
        return out / len(self.augmentations)
