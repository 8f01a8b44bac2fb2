"""Numeric inner loops shared by the simulator, the SSM oracle and the mAP evaluator.

Every public kernel has a numba body (``_nb_*``) and a numpy body (``_np_*``);
the dispatching wrapper picks one according to :mod:`turbdet._accel`.
"""
import numpy as np

from . import _accel


# ---------------------------------------------------------------- bilinear warp

def _np_warp_bilinear(img, field):
    h, w, c = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = np.clip(xs + field[..., 0], 0.0, w - 1.0)
    sy = np.clip(ys + field[..., 1], 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


@_accel.njit
def _nb_warp_bilinear(img, field):
    h, w, c = img.shape
    out = np.empty((h, w, c), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + field[y, x, 0], 0.0), w - 1.0)
            sy = min(max(y + field[y, x, 1], 0.0), h - 1.0)
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            fx = sx - x0
            fy = sy - y0
            for k in range(c):
                top = img[y0, x0, k] * (1.0 - fx) + img[y0, x1, k] * fx
                bot = img[y1, x0, k] * (1.0 - fx) + img[y1, x1, k] * fx
                out[y, x, k] = top * (1.0 - fy) + bot * fy
    return out


def warp_bilinear(img, field):
    """Sample ``img`` (H, W, C) at ``p + field[p]`` with edge replication.

    ``field[..., 0]`` is the x (column) displacement, ``field[..., 1]`` the y
    (row) displacement, both in pixels. Returns float64.
    """
    img = np.ascontiguousarray(img, dtype=np.float64)
    field = np.ascontiguousarray(field, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if field.shape != img.shape[:2] + (2,):
        raise ValueError(f"field shape {field.shape} does not match image {img.shape[:2]}")
    out = _nb_warp_bilinear(img, field) if _accel.USE_NUMBA else _np_warp_bilinear(img, field)
    return out[..., 0] if squeeze else out


# ------------------------------------------------------- sequential SSM recurrence

def _np_ssm_scan(u, delta, A, B, C):
    L, D = u.shape
    N = A.shape[1]
    x = np.zeros((D, N))
    y = np.empty((L, D))
    for k in range(L):
        dA = np.exp(delta[k][:, None] * A)
        x = dA * x + (delta[k] * u[k])[:, None] * B[k][None, :]
        y[k] = x @ C[k]
    return y


@_accel.njit
def _nb_ssm_scan(u, delta, A, B, C):
    L, D = u.shape
    N = A.shape[1]
    x = np.zeros((D, N))
    y = np.empty((L, D))
    for k in range(L):
        for d in range(D):
            acc = 0.0
            du = delta[k, d] * u[k, d]
            for n in range(N):
                x[d, n] = np.exp(delta[k, d] * A[d, n]) * x[d, n] + du * B[k, n]
                acc += x[d, n] * C[k, n]
            y[k, d] = acc
    return y


def ssm_scan_sequential(u, delta, A, B, C):
    """Reference selective-scan recurrence, one step at a time.

    Shapes: ``u, delta`` (L, D); ``A`` (D, N) diagonal state rates;
    ``B, C`` (L, N). Discretisation is zero-order hold on A and Euler on B:
    ``x_k = exp(delta_k A) x_{k-1} + delta_k B_k u_k``, ``y_k = C_k . x_k``.
    """
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (u, delta, A, B, C)]
    y = _nb_ssm_scan(*args) if _accel.USE_NUMBA else _np_ssm_scan(*args)
    if not np.all(np.isfinite(y)):
        bad = np.where(~np.isfinite(y).all(axis=0))[0]
        raise FloatingPointError(f"non-finite SSM state in channel(s) {bad.tolist()}")
    return y


# ------------------------------------------------------ greedy detection matching

def _loop_greedy_match(ious, gt_ignore, thr):
    n_det, n_gt = ious.shape
    gt_taken = np.zeros(n_gt, dtype=np.bool_)
    det_gt = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = -1
        best_iou = 0.0
        for g in range(n_gt):
            iou = ious[d, g]
            if gt_taken[g] or iou < thr:
                continue
            # a real GT always beats an ignored one
            if best < 0 or (gt_ignore[best] and not gt_ignore[g]):
                best = g
                best_iou = iou
            elif gt_ignore[best] == gt_ignore[g] and iou > best_iou:
                best = g
                best_iou = iou
        if best >= 0:
            gt_taken[best] = True
            det_gt[d] = best
    return det_gt


_nb_greedy_match = _accel.njit(_loop_greedy_match)


def _np_greedy_match(ious, gt_ignore, thr):
    n_det, n_gt = ious.shape
    gt_taken = np.zeros(n_gt, dtype=bool)
    det_gt = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        ok = ~gt_taken & (ious[d] >= thr)
        if not ok.any():
            continue
        pool = ok & ~gt_ignore if (ok & ~gt_ignore).any() else ok
        g = int(np.argmax(np.where(pool, ious[d], -np.inf)))
        gt_taken[g] = True
        det_gt[d] = g
    return det_gt


def greedy_match(ious, gt_ignore, thr):
    """Score-ordered greedy assignment of detections to ground truth.

    ``ious`` is (n_det, n_gt) with detections already sorted by descending
    score. Each detection takes the unmatched GT with the highest IoU at or
    above ``thr`` (non-ignored GT preferred; ties go to the lower GT index).
    Returns the matched GT index per detection, -1 when unmatched.
    """
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    gt_ignore = np.ascontiguousarray(gt_ignore, dtype=np.bool_)
    if ious.shape[0] == 0 or ious.shape[1] == 0:
        return np.full(ious.shape[0], -1, dtype=np.int64)
    fn = _nb_greedy_match if _accel.USE_NUMBA else _np_greedy_match
    return fn(ious, gt_ignore, float(thr))


# -------------------------------------------------- deformable trilinear sampling
#
# Channels-last layout: x (N, T, H, W, C); pos (N, K, 3, P) absolute (t, y, x)
# sample positions for the P = T*H*W output sites; cols (N, K, P, C).
# Out-of-volume corners read 0.

@_accel.njit
def _nb_deform_sample(x, pos):
    N, T, H, W, C = x.shape
    K = pos.shape[1]
    P = pos.shape[3]
    cols = np.zeros((N, K, P, C), dtype=x.dtype)
    for n in range(N):
        for k in range(K):
            for p in range(P):
                st = pos[n, k, 0, p]
                sy = pos[n, k, 1, p]
                sx = pos[n, k, 2, p]
                t0 = int(np.floor(st))
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                ft = st - t0
                fy = sy - y0
                fx = sx - x0
                for dt in range(2):
                    ti = t0 + dt
                    if ti < 0 or ti >= T:
                        continue
                    wt = ft if dt == 1 else 1.0 - ft
                    for dy in range(2):
                        yi = y0 + dy
                        if yi < 0 or yi >= H:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        for dx in range(2):
                            xi = x0 + dx
                            if xi < 0 or xi >= W:
                                continue
                            w = wt * wy * (fx if dx == 1 else 1.0 - fx)
                            if w == 0.0:
                                continue
                            for c in range(C):
                                cols[n, k, p, c] += w * x[n, ti, yi, xi, c]
    return cols


@_accel.njit
def _nb_deform_sample_backward(x, pos, grad_cols):
    N, T, H, W, C = x.shape
    K = pos.shape[1]
    P = pos.shape[3]
    grad_x = np.zeros_like(x)
    grad_pos = np.zeros(pos.shape, dtype=x.dtype)
    for n in range(N):
        for k in range(K):
            for p in range(P):
                st = pos[n, k, 0, p]
                sy = pos[n, k, 1, p]
                sx = pos[n, k, 2, p]
                t0 = int(np.floor(st))
                y0 = int(np.floor(sy))
                x0 = int(np.floor(sx))
                ft = st - t0
                fy = sy - y0
                fx = sx - x0
                gt = 0.0
                gy = 0.0
                gx = 0.0
                for dt in range(2):
                    ti = t0 + dt
                    if ti < 0 or ti >= T:
                        continue
                    wt = ft if dt == 1 else 1.0 - ft
                    st_sign = 1.0 if dt == 1 else -1.0
                    for dy in range(2):
                        yi = y0 + dy
                        if yi < 0 or yi >= H:
                            continue
                        wy = fy if dy == 1 else 1.0 - fy
                        sy_sign = 1.0 if dy == 1 else -1.0
                        for dx in range(2):
                            xi = x0 + dx
                            if xi < 0 or xi >= W:
                                continue
                            wx = fx if dx == 1 else 1.0 - fx
                            sx_sign = 1.0 if dx == 1 else -1.0
                            w = wt * wy * wx
                            acc = 0.0
                            for c in range(C):
                                g = grad_cols[n, k, p, c]
                                grad_x[n, ti, yi, xi, c] += w * g
                                acc += g * x[n, ti, yi, xi, c]
                            gt += st_sign * wy * wx * acc
                            gy += sy_sign * wt * wx * acc
                            gx += sx_sign * wt * wy * acc
                grad_pos[n, k, 0, p] = gt
                grad_pos[n, k, 1, p] = gy
                grad_pos[n, k, 2, p] = gx
    return grad_x, grad_pos


def _np_corners(x, pos):
    """Yield (flat index, validity mask, weight, d weight/d(t, y, x)) per trilinear corner."""
    N, T, H, W, C = x.shape
    st, sy, sx = pos[:, :, 0], pos[:, :, 1], pos[:, :, 2]
    t0, y0, x0 = np.floor(st).astype(np.int64), np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    ft, fy, fx = st - t0, sy - y0, sx - x0
    for dt in (0, 1):
        wt = ft if dt else 1.0 - ft
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dx in (0, 1):
                wx = fx if dx else 1.0 - fx
                ti, yi, xi = t0 + dt, y0 + dy, x0 + dx
                ok = (ti >= 0) & (ti < T) & (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
                flat = (np.clip(ti, 0, T - 1) * H + np.clip(yi, 0, H - 1)) * W + np.clip(xi, 0, W - 1)
                dw = ((1.0 if dt else -1.0) * wy * wx, (1.0 if dy else -1.0) * wt * wx, (1.0 if dx else -1.0) * wt * wy)
                yield flat, ok, wt * wy * wx, dw


def _np_deform_sample(x, pos):
    N, C = x.shape[0], x.shape[-1]
    K, P = pos.shape[1], pos.shape[3]
    xf = x.reshape(N, -1, C)
    cols = np.zeros((N, K, P, C), dtype=x.dtype)
    for flat, ok, w, _ in _np_corners(x, pos):
        vals = np.take_along_axis(xf, flat.reshape(N, K * P, 1), axis=1).reshape(N, K, P, C)
        cols += vals * (w * ok)[..., None]
    return cols


def _np_deform_sample_backward(x, pos, grad_cols):
    N, C = x.shape[0], x.shape[-1]
    K, P = pos.shape[1], pos.shape[3]
    xf = x.reshape(N, -1, C)
    grad_xf = np.zeros_like(xf)
    grad_pos = np.zeros(pos.shape, dtype=x.dtype)
    for flat, ok, w, dw in _np_corners(x, pos):
        vals = np.take_along_axis(xf, flat.reshape(N, K * P, 1), axis=1).reshape(N, K, P, C)
        acc = (grad_cols * vals).sum(axis=-1) * ok
        for d in range(3):
            grad_pos[:, :, d] += dw[d] * acc
        contrib = (grad_cols * (w * ok)[..., None]).reshape(N, K * P, C)
        for n in range(N):
            np.add.at(grad_xf[n], flat[n].reshape(-1), contrib[n])
    return grad_xf.reshape(x.shape), grad_pos


def deform_sample(x, pos):
    """Trilinear samples of channels-last ``x`` at ``pos``; shapes as above."""
    fn = _nb_deform_sample if _accel.USE_NUMBA else _np_deform_sample
    return fn(np.ascontiguousarray(x), np.ascontiguousarray(pos, dtype=x.dtype))


def deform_sample_backward(x, pos, grad_cols):
    """Gradients of :func:`deform_sample` w.r.t. ``x`` and ``pos``."""
    fn = _nb_deform_sample_backward if _accel.USE_NUMBA else _np_deform_sample_backward
    return fn(np.ascontiguousarray(x), np.ascontiguousarray(pos, dtype=x.dtype),
              np.ascontiguousarray(grad_cols, dtype=x.dtype))
