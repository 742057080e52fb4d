"""Desk-scale synthetic scene: two coloured plates meeting at a right angle.

Ground truth images come from the brute-force tracer plus a dense stratified
Monte Carlo estimate of the rendering equation. Indirect light is one bounce:
each ground-truth surfel carries its directly lit diffuse radiance as SH DC.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cubemap import texel_directions
from .dataset import View, load_dataset, write_split
from .formats import save_env, save_scene
from .renderer import Camera, surface_offset
from .scene import SH_C0, Scene, logit, matrix_to_quat
from .shading import EnvCubemap, stratified_hemisphere
from .tracer import TraceOptions, Tracer

FLOOR_ALBEDO = (0.70, 0.32, 0.22)
WALL_ALBEDO = (0.22, 0.42, 0.68)
FLOOR_ROUGHNESS = 0.6
WALL_ROUGHNESS = 0.4
GT_SAMPLES = 16384
TARGET = np.array([0.0, 0.45, 0.4])
FOV_X = 42.0
RADIUS = 3.4


@dataclass
class PlateScene:
    scene: Scene
    env: EnvCubemap
    plate: np.ndarray  # 0 floor, 1 wall, per Gaussian

    @property
    def diagonal(self) -> float:
        return self.scene.diagonal()


def plate_geometry(nu: int = 8, nv: int = 4, half_width: float = 0.8, depth: float = 1.0):
    """Centres, quaternions and scales of a floor (z = 0, normal +z) and a
    wall (y = 0, normal +y) meeting along the x axis.

    The first row sits 3.1 sigma from the corner so each plate's alpha
    cutoff ends at the other plate's plane; nothing pokes through.
    """
    su = 0.7 * (2 * half_width / nu)
    sv = 0.14 * depth
    v0 = 3.1 * sv
    u = (np.arange(nu) + 0.5) / nu * 2 * half_width - half_width
    v = v0 + np.arange(nv) * (depth - v0) / (nv - 0.5)
    u, v = (x.reshape(-1) for x in np.meshgrid(u, v, indexing="ij"))
    m = u.size
    floor = np.stack([u, v, np.zeros(m)], 1)
    wall = np.stack([u, np.zeros(m), v], 1)
    R_floor = np.eye(3)
    R_wall = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])  # columns x, -z, y
    q = np.stack([matrix_to_quat(R_floor)] * m + [matrix_to_quat(R_wall)] * m)
    scales = np.tile([su, sv], (2 * m, 1))
    return np.concatenate([floor, wall]), q, scales, np.repeat([0, 1], m)


def sky_radiance(dirs) -> np.ndarray:
    """Smooth sky: neutral base, blue-ish zenith gradient and a broad warm lobe."""
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    sun = np.array([0.5, 0.6, 0.62])
    sun /= np.linalg.norm(sun)
    up = d[..., 2:3]
    lobe = np.exp(3.0 * ((d @ sun)[..., None] - 1.0))
    return (np.array([0.55, 0.55, 0.58]) + 0.25 * up * np.array([0.3, 0.4, 0.6])
            + 0.9 * lobe * np.array([1.0, 0.85, 0.6]))


def sky_env(resolution: int = 32) -> EnvCubemap:
    return EnvCubemap.from_radiance(np.maximum(sky_radiance(texel_directions(resolution)), 0.0))


# ------------------------------------------------------------------ oracle

def brdf_np(a, r, n, wi, wo, f0=0.04):
    """Lambert + GGX (alpha = r^2), Schlick Fresnel, height-correlated Smith."""
    NoL = (n * wi).sum(-1)
    NoV = (n * wo).sum(-1)
    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    NoH = np.clip((n * h).sum(-1), 0.0, 1.0)
    VoH = np.clip((wo * h).sum(-1), 0.0, 1.0)
    a2 = np.maximum(r ** 4, 1e-8)
    D = a2 / (math.pi * (NoH * NoH * (a2 - 1.0) + 1.0) ** 2)
    F = f0 + (1.0 - f0) * (1.0 - VoH) ** 5
    L, V = np.maximum(NoL, 0.0), np.maximum(NoV, 0.0)
    vis = 0.5 / np.maximum(L * np.sqrt(V * V * (1 - a2) + a2) + V * np.sqrt(L * L * (1 - a2) + a2), 1e-300)
    f = a / math.pi + (D * F * vis)[..., None]
    return np.where(((NoL > 0) & (NoV > 0))[..., None], f, 0.0)


def _env_radiance(env_rad: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    from .cubemap import lookup

    return lookup(env_rad, dirs)


def incident_oracle(tracer: Tracer, env_rad, origins, dirs) -> np.ndarray:
    """``V L_env + L_ind`` from the brute-force tracer."""
    res = tracer.trace(origins, dirs, brute=True)
    return res.visibility[:, None] * _env_radiance(env_rad, dirs) + res.color


def shade_oracle(tracer, env_rad, x, n, a, r, wo, n_samples=GT_SAMPLES, rng=None,
                 offset=0.0, chunk=8) -> np.ndarray:
    """Stratified Monte Carlo outgoing radiance at points ``x`` (P, 3)."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    P = x.shape[0]
    out = np.zeros((P, 3))
    for s in range(0, P, chunk):
        e = min(P, s + chunk)
        wi = stratified_hemisphere(n[s:e], n_samples, gen)  # (p, S, 3)
        o = np.repeat(x[s:e] + offset * n[s:e], n_samples, 0)
        Li = incident_oracle(tracer, env_rad, o, wi.reshape(-1, 3)).reshape(e - s, n_samples, 3)
        f = brdf_np(a[s:e, None], r[s:e, None], n[s:e, None], wi, wo[s:e, None])
        cos = np.maximum((wi * n[s:e, None]).sum(-1), 0.0)
        out[s:e] = (2 * math.pi / n_samples) * (f * Li * cos[..., None]).sum(1)
    return out


def make_plate_scene(env_resolution: int = 32, bake_samples: int = GT_SAMPLES, seed: int = 0) -> PlateScene:
    mu, q, s, plate = plate_geometry()
    n = len(mu)
    albedo = np.where(plate[:, None] == 0, FLOOR_ALBEDO, WALL_ALBEDO)
    rough = np.where(plate == 0, FLOOR_ROUGHNESS, WALL_ROUGHNESS)
    scene = Scene(mu, q, np.log(s), np.full(n, logit(0.99)), np.zeros((n, 9, 3)),
                  logit(albedo), logit(rough))
    env = sky_env(env_resolution)
    # bake one-bounce diffuse radiance into SH DC
    act = scene.activate()
    tracer = Tracer(act.geom_array(), None, None, TraceOptions())
    normals = act.n.detach().numpy()
    wi = stratified_hemisphere(normals, bake_samples, np.random.default_rng(seed))
    off = surface_offset(scene.diagonal())
    o = np.repeat(mu + off * normals, bake_samples, 0)
    res = tracer.trace(o, wi.reshape(-1, 3), brute=True, want_color=False)
    Le = res.visibility[:, None] * _env_radiance(env.numpy(), wi.reshape(-1, 3))
    cos = (wi * normals[:, None]).sum(-1).reshape(-1)
    E = (2 * math.pi / bake_samples) * (Le * cos[:, None]).reshape(n, bake_samples, 3).sum(1)
    radiance = albedo / math.pi * E
    sh = np.zeros((n, 9, 3))
    sh[:, 0] = (radiance - 0.5) / SH_C0
    scene.sh = scene.sh.new_tensor(sh)
    return PlateScene(scene, env, plate)


def orbit_cameras(n: int, offset: float = 0.0, width: int = 64, height: int = 64) -> list:
    """Cameras on a Fibonacci sphere around the corner, so both the concave
    and the convex faces of the plates are seen."""
    cams = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5 + offset) / n
        r = math.sqrt(max(0.0, 1.0 - z * z))
        az = (i + offset) * golden + 0.6
        eye = TARGET + RADIUS * np.array([r * math.cos(az), r * math.sin(az), z])
        up = (0.0, 0.0, 1.0) if abs(z) < 0.95 else (0.0, 1.0, 0.0)
        cams.append(Camera.look_at(eye, TARGET, up, width, height, FOV_X))
    return cams


def corner_regions(X, N, O, band: float = 0.5, open_from: float = 0.5, solid: float = 0.9):
    """Masks of the concave corner band and of the open (convex side) faces.

    ``X`` are surface points, ``N`` normals oriented toward the viewer and
    ``O`` opacities; only solid pixels inside the plates are kept, since
    silhouette pixels blend depths of different surfaces.
    """
    X = np.asarray(X, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    ok = np.all(np.isfinite(X), -1) & (np.asarray(O) > solid)
    Xs = np.where(ok[..., None], X, 0.0)
    inner = np.abs(Xs[..., 0]) < 0.65
    floor = ok & inner & (np.abs(Xs[..., 2]) < 0.01) & (Xs[..., 1] > 0.0) & (Xs[..., 1] < 0.95)
    wall = ok & inner & (np.abs(Xs[..., 1]) < 0.01) & (Xs[..., 2] > 0.0) & (Xs[..., 2] < 0.95)
    concave = (floor & (N[..., 2] > 0.5) & (Xs[..., 1] < band)) | (wall & (N[..., 1] > 0.5) & (Xs[..., 2] < band))
    open_ = (floor & (N[..., 2] < -0.5) & (Xs[..., 1] > open_from)) | (wall & (N[..., 1] < -0.5) & (Xs[..., 2] > open_from))
    return concave, open_


def render_oracle_view(ps: PlateScene, camera: Camera, n_samples: int = GT_SAMPLES, seed: int = 0,
                       background=(0.0, 0.0, 0.0)) -> dict:
    """Ground-truth image and decomposition buffers for one camera."""
    act = ps.scene.activate()
    mat = act.material_array()
    tracer = Tracer(act.geom_array(), act.sh_array(), mat, TraceOptions())
    o, d = camera.rays()
    res = tracer.trace(o, d, brute=True)
    O = res.opacity
    fg = np.flatnonzero(O > 1e-4)
    safe = np.where(O > 0, O, 1.0)
    A = res.aux_sum[:, :3] / safe[:, None]
    Rgh = res.aux_sum[:, 3] / safe
    N = res.normal
    X = o + (res.depth_sum / safe)[:, None] * d
    c = np.zeros((len(O), 3))
    if fg.size:
        c[fg] = shade_oracle(tracer, ps.env.numpy(), X[fg], N[fg], A[fg], Rgh[fg], -d[fg],
                             n_samples, np.random.default_rng([seed, 1]),
                             surface_offset(ps.diagonal))
    bg = np.asarray(background, dtype=np.float64)
    img = O[:, None] * c + (1 - O[:, None]) * bg
    H, W = camera.height, camera.width
    return {"image": img.reshape(H, W, 3), "mask": O.reshape(H, W), "albedo": A.reshape(H, W, 3),
            "normal": N.reshape(H, W, 3), "roughness": Rgh.reshape(H, W)}


def sample_points(ps: PlateScene, n: int = 256, seed: int = 0) -> np.ndarray:
    """A sparse noisy point cloud on the plates, standing in for SfM output."""
    rng = np.random.default_rng(seed)
    mu = ps.scene.mu.detach().numpy()
    floor = mu[ps.plate == 0]
    pad = 0.1
    u = rng.uniform(floor[:, 0].min() - pad, floor[:, 0].max() + pad, n)
    v = rng.uniform(floor[:, 1].min() - pad, floor[:, 1].max() + pad, n)
    wall = rng.random(n) < 0.5
    pts = np.where(wall[:, None], np.stack([u, np.zeros(n), v], 1), np.stack([u, v, np.zeros(n)], 1))
    return pts + rng.normal(scale=0.01, size=pts.shape)


DATASET_VERSION = 2


def dataset_key(n_train, n_test, size, n_samples, seed) -> str:
    doc = {"v": DATASET_VERSION, "train": n_train, "test": n_test, "size": size,
           "samples": n_samples, "seed": seed, "floor": FLOOR_ALBEDO, "wall": WALL_ALBEDO,
           "rough": [FLOOR_ROUGHNESS, WALL_ROUGHNESS]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(root, n_train: int = 24, n_test: int = 8, size: int = 64,
                  n_samples: int = GT_SAMPLES, seed: int = 0, log=None):
    """Write (or reuse) the ground-truth dataset under ``root``."""
    root = Path(root)
    key = dataset_key(n_train, n_test, size, n_samples, seed)
    stamp = root / "synthetic.json"
    if stamp.exists() and json.loads(stamp.read_text()).get("key") == key:
        return load_dataset(root)
    root.mkdir(parents=True, exist_ok=True)
    ps = make_plate_scene(seed=seed)
    for split, cams in (("train", orbit_cameras(n_train, 0.0, size, size)),
                        ("test", orbit_cameras(n_test, 0.37, size, size))):
        views = []
        for i, cam in enumerate(cams):
            gt = render_oracle_view(ps, cam, n_samples, seed=i + (0 if split == "train" else 10_000))
            views.append(View(cam, gt["image"], gt["mask"], f"{split}_{i:03d}", split,
                              {"albedo": gt["albedo"], "normal": gt["normal"], "roughness": gt["roughness"]}))
            if log:
                log(f"{split} view {i + 1}/{len(cams)}")
        write_split(root, split, views, math.radians(FOV_X))
    save_env(root / "env.pfm", ps.env, height=64)
    np.save(root / "env_cube.npy", ps.env.numpy())
    (root / "points.json").write_text(json.dumps(sample_points(ps, seed=seed).tolist()))
    save_scene(root / "gt_scene.json", ps.scene)
    stamp.write_text(json.dumps({"key": key}))
    return load_dataset(root)


@dataclass
class InverseReport:
    nvs_psnr: float  # physically based render vs held-out images
    radiance_psnr: float  # SH radiance render vs held-out images
    albedo_mse: float  # after per-channel alignment, foreground pixels
    env_mae: float  # direction-averaged |L - L_gt|
    v_concave: float
    v_open: float
    n_concave: int
    n_open: int

    def lines(self) -> list:
        return [f"{k}: {v}" for k, v in self.__dict__.items()]


def env_error(env, gt_radiance) -> float:
    from .cubemap import texel_solid_angles

    rad = env.numpy() if hasattr(env, "numpy") else np.asarray(env)
    gt = np.asarray(gt_radiance)
    w = texel_solid_angles(gt.shape[1])[..., None]
    return float((np.abs(rad - gt) * w).sum() / (w.sum() * 3))


def evaluate_inverse(scene: Scene, env, views, gt_env, n_samples: int = 256, seed: int = 0,
                     options=None) -> InverseReport:
    from .metrics import align_scales, metric_psnr
    from .renderer import render_pbr

    psnr_pbr, psnr_c, preds, gts, masks = [], [], [], [], []
    vc, vo = [], []
    for i, v in enumerate(views):
        m = render_pbr(scene, env, v.camera, n_samples, seed=[seed, i], options=options)
        psnr_pbr.append(metric_psnr(m["pbr"], v.image))
        psnr_c.append(metric_psnr(m["C"], v.image))
        fg = v.mask > 0.5
        preds.append(m["A"][fg])
        gts.append(v.extras["albedo"][fg])
        a, b = corner_regions(m["X"], m["N"], m["O"])
        vc.append(m["V"][a])
        vo.append(m["V"][b])
    P, G = np.concatenate(preds), np.concatenate(gts)
    aligned = P * align_scales(P, G)
    vc, vo = np.concatenate(vc), np.concatenate(vo)
    return InverseReport(
        nvs_psnr=float(np.mean(psnr_pbr)),
        radiance_psnr=float(np.mean(psnr_c)),
        albedo_mse=float(np.mean((aligned - G) ** 2)),
        env_mae=env_error(env, gt_env),
        v_concave=float(vc.mean()) if vc.size else float("nan"),
        v_open=float(vo.mean()) if vo.size else float("nan"),
        n_concave=int(vc.size),
        n_open=int(vo.size),
    )
