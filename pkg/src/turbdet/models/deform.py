"""Deformable 3D convolution with trilinear sampling of displaced kernel taps."""
import torch
import torch.nn as nn

from .. import kernels

# bound on floats materialised per tap chunk (N * C * taps * T * H * W)
CHUNK_ELEMS = 1 << 24


def kernel_taps(kernel_size, device=None, dtype=None):
    """Relative (dt, dy, dx) of every tap, centred, in row-major tap order."""
    kt, kh, kw = kernel_size
    t, y, x = torch.meshgrid(
        torch.arange(kt, device=device, dtype=dtype) - (kt - 1) / 2,
        torch.arange(kh, device=device, dtype=dtype) - (kh - 1) / 2,
        torch.arange(kw, device=device, dtype=dtype) - (kw - 1) / 2,
        indexing="ij",
    )
    return torch.stack([t.reshape(-1), y.reshape(-1), x.reshape(-1)], dim=-1)


class _DeformSample(torch.autograd.Function):
    """Trilinear gather at absolute positions: x (N, T, H, W, C), pos (N, K, 3, P) -> (N, K, P, C)."""

    @staticmethod
    def forward(ctx, x, pos):
        ctx.save_for_backward(x, pos)
        return torch.from_numpy(kernels.deform_sample(x.detach().cpu().numpy(), pos.detach().cpu().numpy())).to(x.device)

    @staticmethod
    def backward(ctx, grad_cols):
        x, pos = ctx.saved_tensors
        gx, gp = kernels.deform_sample_backward(x.detach().cpu().numpy(), pos.detach().cpu().numpy(),
                                                grad_cols.detach().cpu().numpy())
        gx = torch.from_numpy(gx).to(x.device) if ctx.needs_input_grad[0] else None
        gp = torch.from_numpy(gp).to(pos.device) if ctx.needs_input_grad[1] else None
        return gx, gp


def deform_conv3d(x, offsets, weight, bias=None, chunk_elems=CHUNK_ELEMS):
    """Convolve ``x`` with every tap displaced by its learned offset.

    x: (N, C, T, H, W); weight: (Co, C, kt, kh, kw) with odd kernel sizes;
    offsets: (N, 3*K, T, H, W) holding (dt, dy, dx) per tap, tap-major, where
    K = kt*kh*kw. Samples outside the volume read zero, so zero offsets give
    exactly a stride-1 'same' convolution. Offsets are clamped to the kernel
    extent along each axis.
    """
    N, C, T, H, W = x.shape
    Co, Ci, kt, kh, kw = weight.shape
    K = kt * kh * kw
    if Ci != C:
        raise ValueError(f"weight expects {Ci} input channels, got {C}")
    if offsets.shape != (N, 3 * K, T, H, W):
        raise ValueError(f"offsets must be {(N, 3 * K, T, H, W)}, got {tuple(offsets.shape)}")
    if not torch.isfinite(offsets).all():
        raise ValueError("non-finite deformable offsets")
    P = T * H * W
    limit = torch.tensor([kt, kh, kw], dtype=x.dtype, device=x.device).view(1, 1, 3, 1)
    off = offsets.reshape(N, K, 3, P)
    off = off.clamp(min=-limit, max=limit)

    taps = kernel_taps((kt, kh, kw), x.device, x.dtype)  # (K, 3)
    base = torch.stack(torch.meshgrid(
        torch.arange(T, device=x.device, dtype=x.dtype),
        torch.arange(H, device=x.device, dtype=x.dtype),
        torch.arange(W, device=x.device, dtype=x.dtype),
        indexing="ij",
    )).reshape(1, 1, 3, P)
    pos = base + taps.view(1, K, 3, 1) + off  # (N, K, 3, P)

    wk = weight.reshape(Co, C, K)
    x_cl = x.permute(0, 2, 3, 4, 1).contiguous()
    step = max(1, chunk_elems // max(N * C * P, 1))
    out = None
    for k0 in range(0, K, step):
        k1 = min(K, k0 + step)
        cols = _DeformSample.apply(x_cl, pos[:, k0:k1].contiguous())
        part = torch.einsum("ock,nkpc->nop", wk[:, :, k0:k1], cols)
        out = part if out is None else out + part
    out = out.view(N, Co, T, H, W)
    if bias is not None:
        out = out + bias.view(1, Co, 1, 1, 1)
    return out


class DeformConv3d(nn.Module):
    """Deformable 3D convolution whose offsets come from a plain 3D conv branch.

    The offset branch is a low-rank 3x3x3 conv (``in -> hidden -> 3K``) with
    small initial weights, so at initialisation the layer behaves almost like
    an ordinary convolution.
    """

    def __init__(self, in_channels, out_channels, kernel_size, offset_hidden=8, bias=True):
        super().__init__()
        self.kernel_size = tuple(kernel_size)
        if any(k % 2 == 0 for k in self.kernel_size):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel_size}")
        K = self.kernel_size[0] * self.kernel_size[1] * self.kernel_size[2]
        self.offset_reduce = nn.Conv3d(in_channels, offset_hidden, 3, padding=1)
        self.offset_expand = nn.Conv3d(offset_hidden, 3 * K, 1)
        nn.init.normal_(self.offset_expand.weight, std=1e-3)
        nn.init.zeros_(self.offset_expand.bias)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *self.kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    def offsets(self, x):
        return self.offset_expand(self.offset_reduce(x))

    def forward(self, x, offsets=None):
        if offsets is None:
            offsets = self.offsets(x)
        return deform_conv3d(x, offsets, self.weight, self.bias)
