"""Pinhole cameras and per-pixel G-buffers from traced primary rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene import Ray, Scene
from .tracer import Tracer, TraceOptions, TraceResult, trace_torch

SURFACE_OFFSET_REL = 3e-3
FOREGROUND_OPACITY = 0.5
EMPTY_OPACITY = 1e-4


@dataclass
class Camera:
    """Pinhole camera; ``pose`` is world-from-camera with x right, y down, z forward."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.pose[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = x, y, z, eye
        f = 0.5 * width / np.tan(np.radians(fov_x_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, pose)

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3].copy()

    def directions(self, px, py) -> np.ndarray:
        px, py = np.broadcast_arrays(np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64))
        cam = np.stack([(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)], -1)
        d = cam @ self.pose[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def rays(self, pixels=None) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through pixel centers, row-major.

        ``pixels`` optionally selects flat pixel indices.
        """
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        py, px = np.divmod(pixels, self.width)
        d = self.directions(px + 0.5, py + 0.5)
        return np.broadcast_to(self.center, d.shape).copy(), d


def pixel_ray(camera: Camera, px: float, py: float) -> Ray:
    """Ray through continuous pixel coordinates (pixel ``i`` spans ``[i, i+1)``)."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValueError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    return Ray(camera.center, camera.directions(px, py))


@dataclass
class GBuffer:
    C: np.ndarray
    D: np.ndarray
    N: np.ndarray
    O: np.ndarray
    X: np.ndarray
    A: np.ndarray
    R: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.O > FOREGROUND_OPACITY

    def maps(self) -> dict:
        return {k: getattr(self, k) for k in "CDNOXAR"}


def _gbuffer_from_result(res: TraceResult, origins, dirs, shape, background) -> GBuffer:
    H, W = shape
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    O = res.opacity
    C = res.color + (1.0 - O)[:, None] * bg
    D = res.depth
    N = res.normal
    N[O < EMPTY_OPACITY] = 0.0
    X = origins + D[:, None] * dirs
    X[O <= FOREGROUND_OPACITY] = np.nan
    if res.aux_sum.shape[1] >= 4:
        aux = res.aux
        A, R = aux[:, :3], aux[:, 3]
    else:
        A, R = np.zeros((len(O), 3)), np.zeros(len(O))
    return GBuffer(
        C.reshape(H, W, 3), D.reshape(H, W), N.reshape(H, W, 3), O.reshape(H, W),
        X.reshape(H, W, 3), A.reshape(H, W, 3), R.reshape(H, W),
    )


def render_gbuffer(scene_or_tracer, camera: Camera, background=(0.0, 0.0, 0.0),
                   options: TraceOptions | None = None) -> GBuffer:
    """Non-differentiable full-frame G-buffer."""
    if isinstance(scene_or_tracer, Tracer):
        tracer = scene_or_tracer
    else:
        tracer = Tracer.from_scene(scene_or_tracer, options=options, materials=True)
    o, d = camera.rays()
    res = tracer.trace(o, d)
    return _gbuffer_from_result(res, o, d, (camera.height, camera.width), background)


def surface_offset(scene_diagonal: float) -> float:
    return SURFACE_OFFSET_REL * scene_diagonal


def gbuffer_torch(act, origins, dirs, *, tracer: Tracer | None = None,
                  options: TraceOptions | None = None, background=(0.0, 0.0, 0.0),
                  materials: bool = True, geometry: bool = True) -> dict:
    """Differentiable flat G-buffer for a batch of primary rays.

    Returns torch tensors ``C D N O X A R`` plus ``Nsum`` and ``dist``.
    """
    feats = torch.cat([act.albedo, act.roughness[:, None]], 1) if materials else None
    out = trace_torch(act, origins, dirs, features=feats, options=options, tracer=tracer,
                      geometry=geometry)
    O = out[:, 3]
    safe = torch.where(O > 0, O, torch.ones_like(O))
    bg = torch.as_tensor(np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy())
    C = out[:, 0:3] + (1.0 - O)[:, None] * bg
    D = torch.where(O > 0, out[:, 4] / safe, torch.zeros_like(O))
    Nsum = out[:, 5:8]
    nlen = torch.linalg.vector_norm(Nsum, dim=1, keepdim=True)
    N = Nsum / torch.clamp(nlen, min=1e-12)
    o = torch.as_tensor(np.asarray(origins, dtype=np.float64))
    d = torch.as_tensor(np.asarray(dirs, dtype=np.float64))
    d = d / torch.linalg.vector_norm(d, dim=1, keepdim=True)
    X = o + D[:, None] * d
    buf = {"C": C, "D": D, "N": N, "O": O, "X": X, "Nsum": Nsum, "dist": out[:, 8]}
    if materials:
        buf["A"] = out[:, 9:12] / safe[:, None]
        buf["R"] = out[:, 12] / safe
    return buf


def _shading_inputs(tracer: Tracer, camera: Camera, background):
    o, d = camera.rays()
    res = tracer.trace(o, d)
    gb = _gbuffer_from_result(res, o, d, (camera.height, camera.width), background)
    O = res.opacity
    fg = np.flatnonzero(O > EMPTY_OPACITY)
    X = o + res.depth[:, None] * d
    return gb, fg, X, d


def render_pbr(scene: Scene, env, camera: Camera, n_samples: int = 256, seed=0,
               background=(0.0, 0.0, 0.0), options: TraceOptions | None = None,
               chunk: int = 256) -> dict:
    """G-buffer plus the physically based image and its light decomposition.

    ``L_dir``, ``L_ind``, ``L_i`` and ``V`` are per-pixel means over the
    hemisphere samples; ``pbr`` is composited over ``background``.
    """
    from .shading import shade_points

    if len(scene) == 0:
        raise ValueError("scene has no gaussians")
    tracer = Tracer.from_scene(scene, options=options, materials=True)
    gb, fg, X, d = _shading_inputs(tracer, camera, background)
    H, W = camera.height, camera.width
    P = H * W
    out = {k: np.zeros((P, 3)) for k in ("c", "L_dir", "L_ind", "L_i")}
    out["V"] = np.ones(P)
    gen = np.random.default_rng(seed)
    off = surface_offset(scene.diagonal())
    N, A, R = gb.N.reshape(P, 3), gb.A.reshape(P, 3), gb.R.reshape(P)
    with torch.no_grad():
        for s in range(0, fg.size, chunk):
            idx = fg[s:s + chunk]
            r = shade_points(X[idx], N[idx], A[idx], R[idx], -d[idx], env, n_samples, gen,
                             tracer=tracer, offset=off)
            out["c"][idx] = r.color.numpy()
            out["L_dir"][idx] = r.L_dir.numpy()
            out["L_ind"][idx] = r.L_ind.numpy()
            out["L_i"][idx] = r.L_i.numpy()
            out["V"][idx] = r.V.numpy()
    O = gb.O.reshape(P, 1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    maps = gb.maps()
    maps["pbr"] = (O * out["c"] + (1.0 - O) * bg).reshape(H, W, 3)
    for k in ("L_dir", "L_ind", "L_i"):
        maps[k] = out[k].reshape(H, W, 3)
    maps["V"] = out["V"].reshape(H, W)
    return maps


def relight_view(scene: Scene, env, camera: Camera, n_samples: int = 256, seed=0,
                 background=(0.0, 0.0, 0.0), options: TraceOptions | None = None,
                 pre=None, lut=None, sampler=None, chunk: int = 256) -> np.ndarray:
    """Image under a new environment: importance-sampled direct light and
    split-sum radiance from secondary hits."""
    from .shading import EnvSampler, build_brdf_lut, prefilter_env, relight_points

    if len(scene) == 0:
        raise ValueError("scene has no gaussians")
    pre = pre if pre is not None else prefilter_env(env)
    lut = lut if lut is not None else build_brdf_lut()
    sampler = sampler if sampler is not None else EnvSampler(env)
    tracer = Tracer.from_scene(scene, options=options, materials=True)
    gb, fg, X, d = _shading_inputs(tracer, camera, background)
    H, W = camera.height, camera.width
    P = H * W
    c = np.zeros((P, 3))
    gen = np.random.default_rng(seed)
    off = surface_offset(scene.diagonal())
    N, A, R = gb.N.reshape(P, 3), gb.A.reshape(P, 3), gb.R.reshape(P)
    with torch.no_grad():
        for s in range(0, fg.size, chunk):
            idx = fg[s:s + chunk]
            c[idx] = relight_points(X[idx], N[idx], A[idx], R[idx], -d[idx], env, sampler, n_samples,
                                    gen, tracer=tracer, pre=pre, lut=lut, offset=off)
    O = gb.O.reshape(P, 1)
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    return (O * c + (1.0 - O) * bg).reshape(H, W, 3)
