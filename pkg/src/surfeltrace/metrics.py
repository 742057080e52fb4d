"""Image and material evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import losses


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def metric_mse(pred, gt, mask=None) -> float:
    p, g = _pair(pred, gt)
    err = (p - g) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        err = err[m]
    return float(err.mean())


def metric_psnr(pred, gt, mask=None) -> float:
    """PSNR for unit dynamic range; ``inf`` for identical inputs."""
    mse = metric_mse(pred, gt, mask)
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def metric_ssim(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(losses.ssim(p, g))


def metric_normal_mae(pred, gt, mask=None) -> float:
    """Mean angle in degrees between normal maps over the foreground."""
    p, g = _pair(pred, gt)
    pn = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
    gn = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
    ang = np.degrees(np.arccos(np.clip((pn * gn).sum(-1), -1.0, 1.0)))
    if mask is None:
        mask = np.linalg.norm(g, axis=-1) > 0
    m = np.asarray(mask, dtype=bool)
    return float(ang[m].mean()) if m.any() else 0.0


def align_scales(pred, gt, mask=None) -> np.ndarray:
    """Per-channel least-squares ``s_c = sum(p g) / sum(p^2)``; 1 if ``p`` is zero."""
    p, g = _pair(pred, gt)
    p2 = p.reshape(-1, p.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        p2, g2 = p2[m], g2[m]
    den = (p2 * p2).sum(0)
    num = (p2 * g2).sum(0)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def align_albedo(pred, gt, mask=None) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) * align_scales(pred, gt, mask)


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    count: int
    normal_mae: float | None = None
    roughness_mse: float | None = None
    albedo_psnr: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)

    def lines(self) -> list:
        out = []
        for k, v in self.as_dict().items():
            if v is None:
                continue
            out.append(f"{k}: {'inf' if isinstance(v, float) and math.isinf(v) else v}")
        return out


def compare_sets(preds, gts) -> MetricsReport:
    """Mean PSNR/SSIM over paired images; identical pairs give ``inf``/1."""
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValueError("prediction and ground-truth sets must be non-empty and paired")
    ps = [metric_psnr(p, g) for p, g in zip(preds, gts)]
    ss = [metric_ssim(p, g) for p, g in zip(preds, gts)]
    psnr = math.inf if all(math.isinf(x) for x in ps) else float(np.mean([x for x in ps if not math.isinf(x)]))
    return MetricsReport(psnr=psnr, ssim=float(np.mean(ss)), count=len(ps))
