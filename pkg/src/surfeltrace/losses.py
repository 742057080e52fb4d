"""Training objectives. Images are (H, W, C) float64 tensors."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BCE_CLAMP = 1e-6


def _img(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    t = t.double()
    return t[..., None] if t.ndim == 2 else t


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a, b, data_range: float = 1.0) -> torch.Tensor:
    """Per-window SSIM (valid positions only) of two (H, W, C) images."""
    a, b = _img(a), _img(b)
    _check(a, b)
    H, W, C = a.shape
    size = min(SSIM_WINDOW, H, W)
    win = gaussian_window(size).expand(C, 1, size, size).contiguous()
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]

    def filt(z):
        return F.conv2d(z, win, groups=C)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den)[0]


def ssim(a, b, data_range: float = 1.0) -> torch.Tensor:
    return ssim_map(a, b, data_range).mean()


def loss_l1(a, b) -> torch.Tensor:
    a, b = _img(a), _img(b)
    _check(a, b)
    return (a - b).abs().mean()


def loss_rgb(C, C_gt) -> torch.Tensor:
    return 0.8 * loss_l1(C, C_gt) + 0.2 * (1.0 - ssim(C, C_gt))


def depth_normals(D, dirs, origin) -> torch.Tensor:
    """Normals from central differences of back-projected depth (H, W, 3).

    Border pixels get zero. Normals face the camera for x-right/y-down images.
    """
    D = _img(D)[..., 0]
    d = _img(dirs)
    X = torch.as_tensor(np.asarray(origin, dtype=np.float64)) + D[..., None] * d
    dx = X[1:-1, 2:] - X[1:-1, :-2]
    dy = X[2:, 1:-1] - X[:-2, 1:-1]
    n = torch.linalg.cross(dy, dx, dim=-1)
    n = n / torch.clamp(torch.linalg.vector_norm(n, dim=-1, keepdim=True), min=1e-12)
    out = torch.zeros_like(X)
    out[1:-1, 1:-1] = n
    return out


def interior(mask) -> torch.Tensor:
    """Foreground pixels whose 4-neighbourhood is also foreground."""
    m = torch.as_tensor(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else mask
    m = m.bool()
    out = torch.zeros_like(m)
    out[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return out


def loss_normal_consistency(N, D, dirs, origin, mask) -> torch.Tensor:
    """Mean of ``1 - N . n_depth`` over interior foreground pixels."""
    N = _img(N)
    nd = depth_normals(D, dirs, origin)
    sel = interior(mask)
    if not torch.any(sel):
        return N.sum() * 0.0
    return (1.0 - (N * nd).sum(-1))[sel].mean()


def depth_distortion(weights, taus) -> float:
    """``sum_ij w_i w_j |tau_i - tau_j|`` for one ray's hit list."""
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(taus, dtype=np.float64)
    return float((w[:, None] * w[None, :] * np.abs(t[:, None] - t[None, :])).sum())


def loss_depth_distortion(dist) -> torch.Tensor:
    """Mean of per-ray distortion values produced by the tracer."""
    return dist.mean()


def loss_edge_smooth(M, C_gt, mask=None) -> torch.Tensor:
    """Edge-aware smoothness: ``|grad M| exp(-|grad C_gt|)`` per axis.

    The map gradient uses the channel-Euclidean norm, the image gradient the
    channel mean of absolute differences. With ``mask`` only pixel pairs that
    are both foreground count, so silhouettes do not pull the map toward zero.
    """
    M, G = _img(M), _img(C_gt)
    if M.shape[:2] != G.shape[:2]:
        raise ValueError("map and image must share spatial size")
    fg = None if mask is None else _img(mask)[..., 0] > 0.5
    total = M.sum() * 0.0
    for axis in (0, 1):
        dm = torch.diff(M, dim=axis)
        dg = torch.diff(G, dim=axis)
        mag = torch.sqrt((dm * dm).sum(-1) + 1e-20)
        term = mag * torch.exp(-dg.abs().mean(-1))
        if fg is None:
            total = total + term.mean()
            continue
        both = fg.narrow(axis, 0, fg.shape[axis] - 1) & fg.narrow(axis, 1, fg.shape[axis] - 1)
        if both.any():
            total = total + term[both].sum() / term.numel()
    return total


def loss_mask(O, M) -> torch.Tensor:
    O = torch.clamp(_img(O)[..., 0], BCE_CLAMP, 1.0 - BCE_CLAMP)
    M = _img(M)[..., 0]
    return -(M * torch.log(O) + (1.0 - M) * torch.log(1.0 - O)).mean()


def loss_white_light(L_diffuse) -> torch.Tensor:
    L = torch.as_tensor(L_diffuse, dtype=torch.float64).reshape(-1, 3)
    # L_c - mean(L) via pairwise differences: exactly zero for gray light
    dev = (L[:, :, None] - L[:, None, :]).sum(-1) / 3.0
    return dev.abs().sum(-1).mean()


def subsample_pixels(mask, n_rays: int, n_r: int, rng) -> np.ndarray:
    """``floor(n_rays / n_r)`` distinct foreground pixel indices (flat)."""
    if n_rays < n_r:
        raise ValueError("ray budget must be at least N_r")
    fg = np.flatnonzero(np.asarray(mask).reshape(-1))
    quota = n_rays // n_r
    if fg.size <= quota:
        return fg
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return np.sort(gen.choice(fg, size=quota, replace=False))


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
