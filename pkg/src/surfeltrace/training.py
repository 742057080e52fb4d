"""Two-stage optimisation: radiance/geometry first, then materials and lighting."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .formats import FormatError, load_container, save_container
from .optim import Adam, ParamGroup
from .renderer import gbuffer_torch, surface_offset
from .scene import PARAM_NAMES, SH_C0, Scene, logit, matrix_to_quat
from .shading import EnvCubemap, shade_points
from .tracer import TraceOptions, Tracer

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


class ConfigMismatchError(ValueError):
    """Checkpoint was written under an incompatible configuration."""


@dataclass(frozen=True)
class LossWeights:
    normal: float = 0.05
    distortion: float = 1000.0
    normal_smooth: float = 0.02
    mask: float = 0.01
    pbr: float = 1.0
    light: float = 0.01
    albedo_smooth: float = 2.0
    rough_smooth: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LearningRates:
    # position rate is multiplied by the camera extent
    mu: float = 1.6e-4
    rot: float = 1e-3
    scale_raw: float = 5e-3
    opacity_raw: float = 0.05
    sh_dc: float = 2.5e-3
    sh_rest: float = 1.25e-4
    albedo_raw: float = 5e-3
    roughness_raw: float = 5e-3
    env: float = 0.01


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    n_r: int = 256
    ray_budget: int = 2**18
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    freeze_secondary_geometry: bool = True
    albedo_from_radiance: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    stage2_geometry_lr_scale: float = 0.1
    env_resolution: int = 32
    env_init: float | None = None  # None: estimate from the training images
    alpha_min: float = 0.01
    # stage-1 iteration at which the geometric regularisers switch on
    distortion_from: int = 300
    normal_from: int = 700
    t_cut: float = 0.03
    k: int = 16
    near: float = 0.2
    far: float = 100.0
    threads: int | None = None

    # run-length and resource knobs that do not change the optimisation
    _UNHASHED = ("stage1_iters", "stage2_iters", "threads")

    def __post_init__(self):
        m = math.isqrt(self.n_r)
        if self.n_r <= 0 or m * m != self.n_r:
            raise ValueError(f"n_r must be a positive perfect square, got {self.n_r}")
        if self.ray_budget < self.n_r:
            raise ValueError("ray budget must be at least n_r")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.distortion_from < 0 or self.normal_from < 0:
            raise ValueError("regulariser start iterations must be non-negative")

    def options(self) -> TraceOptions:
        return TraceOptions(alpha_min=self.alpha_min, t_cut=self.t_cut, k=self.k,
                            near=self.near, far=self.far, threads=self.threads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "lr" in d:
            d["lr"] = LearningRates(**d["lr"])
        if "background" in d:
            d["background"] = tuple(float(x) for x in d["background"])
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in self._UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON config") from exc


# ------------------------------------------------------------ initialisation

def _knn_spacing(points: np.ndarray, k: int = 3) -> np.ndarray:
    d2 = ((points[:, None] - points[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    k = min(k, len(points) - 1)
    if k <= 0:
        return np.ones(len(points))
    near = np.sort(d2, axis=1)[:, :k]
    return np.sqrt(near.mean(1))


def _random_quats(n: int, rng) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _pca_quats(centres: np.ndarray, cloud: np.ndarray, k: int = 8) -> np.ndarray:
    """Orient each surfel with the plane of its ``k`` nearest cloud points."""
    k = min(k, len(cloud))
    d2 = ((centres[:, None] - cloud[None]) ** 2).sum(-1)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = np.empty((len(centres), 4))
    for i, nb in enumerate(idx):
        P = cloud[nb] - cloud[nb].mean(0)
        _, vec = np.linalg.eigh(P.T @ P)
        R = vec[:, ::-1].copy()  # columns: major tangent, minor tangent, normal
        if np.linalg.det(R) < 0:
            R[:, 2] *= -1.0
        out[i] = matrix_to_quat(R)
    return out


def init_scene(n: int, rng, points=None, bounds=None, opacity: float = 0.1, color=None) -> Scene:
    """Initial surfels: centres from ``points`` (subsampled or cycled with
    jitter) oriented by local PCA of the cloud, or uniform inside ``bounds``
    with random orientation. Base colour ``color`` (gray by default), albedo
    and roughness 0.5."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if points is not None and len(points):
        pts = np.asarray(points, dtype=np.float64)[:, :3]
        if len(pts) >= n:
            mu = pts[np.sort(gen.choice(len(pts), n, replace=False))]
        else:
            spacing = float(np.median(_knn_spacing(pts))) if len(pts) > 1 else 1.0
            mu = pts[np.arange(n) % len(pts)] + gen.normal(scale=0.25 * spacing, size=(n, 3))
            mu[: len(pts)] = pts
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in (bounds if bounds is not None else ((-1,) * 3, (1,) * 3)))
        mu = lo + gen.random((n, 3)) * (hi - lo)
    spacing = np.maximum(_knn_spacing(mu), 1e-6)
    scale_raw = np.repeat(np.log(spacing)[:, None], 2, 1)
    if points is not None and len(points) >= 3:
        rot = _pca_quats(mu, pts)
    else:
        rot = _random_quats(n, gen)
    sh = np.zeros((n, 9, 3))
    if color is not None:
        sh[:, 0, :] = (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0
    return Scene(
        mu=mu,
        rot=rot,
        scale_raw=scale_raw,
        opacity_raw=np.full(n, logit(opacity)),
        sh=sh,
        albedo_raw=np.zeros((n, 3)),
        roughness_raw=np.zeros(n),
    )


def estimate_env_level(views, albedo: float = 0.5) -> float:
    """Constant radiance that makes an unoccluded diffuse surface of the
    initial albedo match the mean foreground intensity."""
    vals = [v.image[v.mask > 0.5].mean() for v in views if np.any(v.mask > 0.5)]
    return float(np.mean(vals)) / albedo if vals else 1.0


def estimate_base_color(views) -> np.ndarray:
    """Mean foreground colour of the training images."""
    px = [v.image[v.mask > 0.5] for v in views if np.any(v.mask > 0.5)]
    return np.concatenate(px).mean(0) if px else np.full(3, 0.5)


def camera_extent(views) -> float:
    c = np.stack([v.camera.center for v in views])
    return 1.1 * float(np.linalg.norm(c - c.mean(0), axis=1).max()) or 1.0


# ------------------------------------------------------------------- trainer

ALBEDO_INIT_MIN = 0.02
STAGE1_GROUPS = ("mu", "rot", "scale_raw", "opacity_raw", "sh_dc", "sh_rest")
STAGE2_GROUPS = STAGE1_GROUPS + ("albedo_raw", "roughness_raw", "env")
GEOMETRY_GROUPS = ("mu", "rot", "scale_raw")


@dataclass
class StepReport:
    stage: int
    iteration: int
    view: int
    losses: dict
    total: float


class Trainer:
    """Owns the scene, environment and optimizer state across both stages."""

    def __init__(self, scene: Scene, views, config: TrainConfig | None = None,
                 env: EnvCubemap | None = None, extent: float | None = None):
        if len(scene) == 0:
            raise ValueError("scene has no gaussians")
        if not views:
            raise ValueError("no training views")
        self.config = config or TrainConfig()
        self.views = list(views)
        self.scene = scene.clone().requires_grad_(True)
        # SH is split so the higher bands get their own rate
        self.sh_dc = self.scene.sh[:, :1].detach().clone().requires_grad_(True)
        self.sh_rest = self.scene.sh[:, 1:].detach().clone().requires_grad_(True)
        if env is None:
            level = self.config.env_init if self.config.env_init is not None else estimate_env_level(self.views)
            env = EnvCubemap.constant(level, self.config.env_resolution)
        self.env = env.requires_grad_(True)
        self.extent = extent if extent is not None else camera_extent(self.views)
        self.stage = 1
        self.iteration = 0
        self.options = self.config.options()
        self.optimizer = Adam(self._groups(), eps=1e-15)
        self.history: list = []

    def _groups(self) -> list:
        lr = self.config.lr
        s = self.scene
        return [
            ParamGroup("mu", [s.mu], lr.mu * self.extent),
            ParamGroup("rot", [s.rot], lr.rot, normalize=True),
            ParamGroup("scale_raw", [s.scale_raw], lr.scale_raw),
            ParamGroup("opacity_raw", [s.opacity_raw], lr.opacity_raw),
            ParamGroup("sh_dc", [self.sh_dc], lr.sh_dc),
            ParamGroup("sh_rest", [self.sh_rest], lr.sh_rest),
            ParamGroup("albedo_raw", [s.albedo_raw], lr.albedo_raw),
            ParamGroup("roughness_raw", [s.roughness_raw], lr.roughness_raw),
            ParamGroup("env", [self.env.log_radiance], lr.env),
        ]

    # ---------------------------------------------------------------- state

    def current_scene(self) -> Scene:
        """Detached snapshot with the SH bands merged back."""
        out = Scene(*(getattr(self.scene, n).detach().numpy() for n in PARAM_NAMES))
        out.sh = torch.cat([self.sh_dc, self.sh_rest], 1).detach().clone()
        return out

    def _activated(self):
        act = self.scene.activate()
        act.sh = torch.cat([self.sh_dc, self.sh_rest], 1)
        return act

    def enter_stage2(self) -> None:
        if self.stage == 2:
            return
        self.stage = 2
        self.iteration = 0
        if self.config.albedo_from_radiance:
            self._init_albedo()
        for name in GEOMETRY_GROUPS:
            self.optimizer.group(name).lr *= self.config.stage2_geometry_lr_scale

    def _init_albedo(self) -> None:
        # Lambertian under the current (near constant) env: a = c / L
        with torch.no_grad():
            c = torch.clamp(SH_C0 * self.sh_dc[:, 0] + 0.5, min=0.0)
            level = torch.exp(self.env.log_radiance).mean().clamp_min(1e-6)
            a = torch.clamp(c / level, ALBEDO_INIT_MIN, 1.0 - ALBEDO_INIT_MIN)
            self.scene.albedo_raw.copy_(torch.log(a) - torch.log1p(-a))

    def view_index(self, stage: int, it: int) -> int:
        n = len(self.views)
        epoch, pos = divmod(it, n)
        perm = np.random.default_rng([self.config.seed, stage, epoch, 0x5eed]).permutation(n)
        return int(perm[pos])

    # ----------------------------------------------------------------- steps

    def _losses(self, view, rng) -> dict:
        cfg, w = self.config, self.config.weights
        act = self._activated()
        tracer = Tracer(act.geom_array(), None, None, self.options)
        cam = view.camera
        H, W = cam.height, cam.width
        o, d = cam.rays()
        stage2 = self.stage == 2
        buf = gbuffer_torch(act, o, d, tracer=tracer, background=cfg.background, materials=stage2)
        gt = torch.as_tensor(np.asarray(view.image, dtype=np.float64))
        mask = np.asarray(view.mask, dtype=np.float64)
        C = buf["C"].reshape(H, W, 3)
        N = buf["N"].reshape(H, W, 3)
        terms = {
            "rgb": losses.loss_rgb(C, gt),
            "normal": losses.loss_normal_consistency(N, buf["D"].reshape(H, W), d.reshape(H, W, 3),
                                                     cam.center, mask > 0.5),
            "distortion": losses.loss_depth_distortion(buf["dist"]),
            "normal_smooth": losses.loss_edge_smooth(N, gt),
            "mask": losses.loss_mask(buf["O"].reshape(H, W), mask),
        }
        warm = not stage2 and self.iteration < cfg.distortion_from
        cold_n = not stage2 and self.iteration < cfg.normal_from
        weights = {"rgb": 1.0, "normal": 0.0 if cold_n else w.normal,
                   "distortion": 0.0 if warm else w.distortion,
                   "normal_smooth": w.normal_smooth, "mask": w.mask}
        if stage2:
            terms["albedo_smooth"] = losses.loss_edge_smooth(buf["A"].reshape(H, W, 3), gt, mask)
            terms["rough_smooth"] = losses.loss_edge_smooth(buf["R"].reshape(H, W), gt, mask)
            weights.update(albedo_smooth=w.albedo_smooth, rough_smooth=w.rough_smooth)
            pix = losses.subsample_pixels((mask > 0.5) & (buf["O"].detach().numpy().reshape(H, W) > 0),
                                          cfg.ray_budget, cfg.n_r, rng)
            if pix.size:
                idx = torch.as_tensor(pix)
                X = buf["X"][idx]
                res = shade_points(
                    X.detach().numpy(), buf["N"][idx], buf["A"][idx], buf["R"][idx], -d[pix],
                    self.env, cfg.n_r, rng, act=act, tracer=tracer,
                    offset=surface_offset(self._diagonal()),
                    geometry=not cfg.freeze_secondary_geometry,
                )
                O = buf["O"][idx][:, None]
                bg = torch.as_tensor(np.asarray(cfg.background, dtype=np.float64))
                comp = O * res.color + (1.0 - O) * bg
                terms["pbr"] = (comp - gt.reshape(-1, 3)[idx]).abs().mean()
                terms["light"] = losses.loss_white_light(res.L_i)
                weights.update(pbr=w.pbr, light=w.light)
        return terms, weights

    def _diagonal(self) -> float:
        return self.scene.diagonal() or 1.0

    def step(self, view_index: int | None = None) -> StepReport:
        stage, it = self.stage, self.iteration
        vi = self.view_index(stage, it) if view_index is None else view_index
        rng = np.random.default_rng([self.config.seed, stage, it])
        terms, weights = self._losses(self.views[vi], rng)
        total = sum(weights[k] * terms[k] for k in terms)
        vals = {k: float(v.detach()) for k, v in terms.items()}
        if not math.isfinite(float(total.detach())):
            bad = [k for k, v in vals.items() if not math.isfinite(v)]
            raise NumericError(f"non-finite loss at stage {stage} iteration {it}: {', '.join(bad) or 'total'}")
        names = STAGE2_GROUPS if stage == 2 else STAGE1_GROUPS
        params = [self.optimizer.group(n).params[0] for n in names]
        grads = torch.autograd.grad(total, params, allow_unused=True)
        gmap = {}
        for n, g in zip(names, grads):
            if g is not None and not torch.all(torch.isfinite(g)):
                raise NumericError(f"non-finite gradient for {n} at stage {stage} iteration {it}")
            gmap[f"{n}.0"] = g
        self.optimizer.step(gmap, only=names)
        self.iteration += 1
        rep = StepReport(stage, it, vi, vals, float(total.detach()))
        self.history.append(rep)
        return rep

    def stage1_step(self, view_index: int | None = None) -> StepReport:
        if self.stage != 1:
            raise RuntimeError("trainer already in stage 2")
        return self.step(view_index)

    def stage2_step(self, view_index: int | None = None) -> StepReport:
        self.enter_stage2()
        return self.step(view_index)

    def run(self, stage: int, iters: int | None = None, callback=None) -> list:
        if stage == 2:
            self.enter_stage2()
        elif self.stage != 1:
            raise RuntimeError("cannot return to stage 1")
        total = iters if iters is not None else (self.config.stage1_iters if stage == 1 else self.config.stage2_iters)
        out = []
        while self.iteration < total:
            rep = self.step()
            out.append(rep)
            if callback is not None:
                callback(rep)
        return out

    # ----------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        s = self.current_scene()
        arrays = {f"scene.{n}": getattr(s, n).detach().numpy() for n in PARAM_NAMES}
        arrays["env.log_radiance"] = self.env.log_radiance.detach().numpy()
        arrays.update(self.optimizer.state_arrays())
        meta = {
            "version": CHECKPOINT_VERSION,
            # thread count is not part of the result, so keep it out of the bytes
            "config": replace(self.config, threads=None).to_dict(),
            "config_hash": self.config.config_hash(),
            "stage": self.stage,
            "iteration": self.iteration,
            "extent": self.extent,
            "lrs": {g.name: g.lr for g in self.optimizer.groups},
        }
        save_container(path, meta, arrays)

    @classmethod
    def load(cls, path, views, config: TrainConfig | None = None) -> "Trainer":
        """Restore a trainer; ``config`` must hash like the stored one."""
        meta, arrays = load_container(path)
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        stored = TrainConfig.from_dict(meta["config"])
        if config is None:
            config = stored
        elif config.config_hash() != meta["config_hash"]:
            raise ConfigMismatchError(
                f"{path}: checkpoint config hash {meta['config_hash'][:12]} "
                f"does not match {config.config_hash()[:12]}"
            )
        scene = Scene(*(arrays[f"scene.{n}"] for n in PARAM_NAMES))
        env = EnvCubemap(arrays["env.log_radiance"])
        tr = cls(scene, views, config, env=env, extent=meta["extent"])
        tr.stage = meta["stage"]
        tr.iteration = meta["iteration"]
        for g in tr.optimizer.groups:
            g.lr = meta["lrs"][g.name]
        tr.optimizer.load_state_arrays(arrays)
        return tr


def load_checkpoint_scene(path) -> tuple[Scene, EnvCubemap, dict]:
    meta, arrays = load_container(path)
    scene = Scene(*(arrays[f"scene.{n}"] for n in PARAM_NAMES))
    return scene, EnvCubemap(arrays["env.log_radiance"]), meta


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
