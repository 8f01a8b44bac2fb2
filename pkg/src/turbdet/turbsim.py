"""Parametric turbulence simulator: AR(1) smooth random tilt plus spatially varying blur.

Each frame's displacement field is low-resolution white noise, evolved in time
as an AR(1) process, bilinearly upsampled and renormalised so every pixel has
the requested RMS displacement. Blur strength varies smoothly over 32x32
tiles. Randomness for a clip is a pure function of ``(seed, clip_id)``.
"""
import zlib
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .dataset import VideoClip
from .kernels import warp_bilinear

BLUR_TILE = 32
BLUR_LEVELS = 6


@dataclass(frozen=True)
class TurbulenceParams:
    warp_amplitude: float = 2.0
    correlation_length: float = 32.0
    temporal_corr: float = 0.5
    blur_sigma_range: Tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.warp_amplitude < 0:
            raise ValueError("warp_amplitude must be >= 0")
        if not 0 <= self.temporal_corr < 1:
            raise ValueError("temporal_corr must lie in [0, 1)")
        lo, hi = self.blur_sigma_range
        if lo < 0 or lo > hi:
            raise ValueError(f"invalid blur_sigma_range {self.blur_sigma_range}")
        if self.correlation_length <= 0:
            raise ValueError("correlation_length must be positive")


@dataclass
class WarpState:
    rng: np.random.Generator
    noise: Optional[np.ndarray] = None
    frame_index: int = -1


def clip_rng(seed, clip_id):
    return np.random.default_rng([int(seed), zlib.crc32(str(clip_id).encode())])


def _interp_matrix(n, spacing):
    """(n, g) bilinear weights from g nodes spaced ``spacing`` apart onto n pixels."""
    g = 1 if not np.isfinite(spacing) else int(np.ceil((n - 1) / spacing)) + 1
    pos = np.zeros(n) if g == 1 else np.arange(n) / spacing
    i0 = np.minimum(np.floor(pos).astype(int), g - 1)
    i1 = np.minimum(i0 + 1, g - 1)
    frac = pos - i0
    m = np.zeros((n, g))
    np.add.at(m, (np.arange(n), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n), i1), frac)
    return m


def sample_warp_field(params: TurbulenceParams, frame_index, state: WarpState, shape):
    """Displacement field (H, W, 2) in pixels for ``frame_index``; mutates ``state``.

    Frames must be requested in order starting at 0.
    """
    h, w = shape
    wy = _interp_matrix(h, params.correlation_length)
    wx = _interp_matrix(w, params.correlation_length)
    if frame_index == 0 or state.noise is None:
        state.noise = state.rng.standard_normal((2, wy.shape[1], wx.shape[1]))
    elif frame_index == state.frame_index + 1:
        rho = params.temporal_corr
        state.noise = rho * state.noise + np.sqrt(1 - rho * rho) * state.rng.standard_normal(state.noise.shape)
    else:
        raise ValueError(f"frame {frame_index} requested after frame {state.frame_index}")
    state.frame_index = frame_index
    if params.warp_amplitude == 0:
        return np.zeros((h, w, 2))
    norm = np.sqrt(np.outer((wy ** 2).sum(1), (wx ** 2).sum(1)))
    field = np.stack([wy @ state.noise[c] @ wx.T for c in range(2)], axis=-1)
    return field / norm[..., None] * params.warp_amplitude


def displace_frame(frame, field):
    """Move image content by ``field`` (content at p lands near p + field)."""
    return warp_bilinear(frame, -np.asarray(field, dtype=np.float64))


def sigma_map(rng, shape, sigma_range, tile=BLUR_TILE):
    """Per-pixel blur sigma, one random draw per tile, bilinearly interpolated between tile centres."""
    h, w = shape
    lo, hi = sigma_range
    gh, gw = max(1, int(np.ceil(h / tile))), max(1, int(np.ceil(w / tile)))
    coarse = rng.uniform(lo, hi, size=(gh, gw))

    def axis_weights(n, g):
        pos = np.clip((np.arange(n) + 0.5) / tile - 0.5, 0, g - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, g - 1)
        m = np.zeros((n, g))
        np.add.at(m, (np.arange(n), i0), 1.0 - (pos - i0))
        np.add.at(m, (np.arange(n), i1), pos - i0)
        return m

    return axis_weights(h, gh) @ coarse @ axis_weights(w, gw).T


def varying_blur(frame, sigmas, sigma_range, levels=BLUR_LEVELS):
    """Blur ``frame`` (H, W, C) with a per-pixel Gaussian sigma by blending a blur stack."""
    lo, hi = sigma_range
    if hi == 0:
        return frame
    ks = np.linspace(lo, hi, levels) if hi > lo else np.array([lo])
    stack = np.stack([frame if s == 0 else gaussian_filter(frame, sigma=(s, s, 0), mode="nearest") for s in ks])
    if len(ks) == 1:
        return stack[0]
    pos = np.clip((sigmas - lo) / (hi - lo) * (levels - 1), 0, levels - 1)
    i0 = np.minimum(np.floor(pos).astype(int), levels - 2)
    frac = (pos - i0)[..., None]
    rows, cols = np.indices(sigmas.shape)
    return stack[i0, rows, cols] * (1 - frac) + stack[i0 + 1, rows, cols] * frac


def apply_turbulence(clip: VideoClip, params: TurbulenceParams, return_fields=False):
    """Distort every frame of ``clip``; boxes are copied unchanged."""
    rng = clip_rng(params.seed, clip.clip_id)
    state = WarpState(rng)
    h, w = clip.frames.shape[1:3]
    out = np.empty_like(clip.frames)
    fields = []
    for t, frame in enumerate(clip.frames):
        field = sample_warp_field(params, t, state, (h, w))
        img = frame.astype(np.float64)
        if params.warp_amplitude > 0:
            img = displace_frame(img, field)
        if params.blur_sigma_range[1] > 0:
            img = varying_blur(img, sigma_map(rng, (h, w), params.blur_sigma_range), params.blur_sigma_range)
        out[t] = np.clip(np.rint(img), 0, 255).astype(clip.frames.dtype)
        if return_fields:
            fields.append(field)
    result = VideoClip(out, list(clip.boxes), clip.clip_id, is_distorted=True)
    return (result, np.stack(fields)) if return_fields else result
