"""Ray tracing over surfels: proxy BVH traversal, blending and adjoints.

A :class:`Tracer` snapshots the activated scene (packed arrays plus BVH).
It must be rebuilt whenever the geometry changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import _backend
from .packing import COLOR, DEPTH, DIST, N_BASE_OUT, NORMAL, OPACITY, as_rays
from .proxy import Bvh, ProxyMesh, build_bvh, build_proxy, build_proxy_mesh, empty_bvh  # noqa: F401
from .scene import ActivatedScene, Ray, Scene


@dataclass(frozen=True)
class TraceOptions:
    alpha_min: float = 0.01
    t_cut: float = 0.03
    k: int = 16
    # depth mapping used by the distortion term; near <= 0 keeps raw tau
    near: float = 0.0
    far: float = 1.0
    threads: int | None = None
    backend: str | None = None

    def kernel_kwargs(self) -> dict:
        return dict(alpha_min=self.alpha_min, t_cut=self.t_cut, k=self.k,
                    near=self.near, far=self.far)

    @property
    def n_threads(self) -> int:
        return self.threads if self.threads else _backend.default_threads()


@dataclass
class TraceResult:
    """Blended per-ray quantities. ``*_sum`` fields are raw weighted sums."""

    color: np.ndarray
    opacity: np.ndarray
    depth_sum: np.ndarray
    normal_sum: np.ndarray
    distortion: np.ndarray
    aux_sum: np.ndarray
    n_hits: np.ndarray
    hit_ids: np.ndarray | None = None
    hit_tau: np.ndarray | None = None
    hit_w: np.ndarray | None = None

    @classmethod
    def from_raw(cls, out, nh, rid=None, rtau=None, rw=None) -> "TraceResult":
        return cls(
            color=out[:, COLOR], opacity=out[:, OPACITY], depth_sum=out[:, DEPTH],
            normal_sum=out[:, NORMAL], distortion=out[:, DIST], aux_sum=out[:, N_BASE_OUT:],
            n_hits=nh, hit_ids=rid, hit_tau=rtau, hit_w=rw,
        )

    def _norm(self, x):
        o = self.opacity.reshape(-1, *([1] * (x.ndim - 1)))
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(o > 0, x / np.where(o > 0, o, 1.0), 0.0)

    @property
    def depth(self) -> np.ndarray:
        return self._norm(self.depth_sum)

    @property
    def normal(self) -> np.ndarray:
        n = np.linalg.norm(self.normal_sum, axis=1, keepdims=True)
        return np.where(n > 0, self.normal_sum / np.where(n > 0, n, 1.0), 0.0)

    @property
    def aux(self) -> np.ndarray:
        return self._norm(self.aux_sum)

    @property
    def visibility(self) -> np.ndarray:
        return 1.0 - self.opacity

    def hits(self, r: int = 0) -> list[tuple[int, float, float]]:
        """``(gaussian_id, tau, weight)`` list of ray ``r`` (needs ``record``)."""
        if self.hit_ids is None:
            raise ValueError("trace was run without hit recording")
        n = min(int(self.n_hits[r]), self.hit_ids.shape[1])
        return [(int(self.hit_ids[r, i]), float(self.hit_tau[r, i]), float(self.hit_w[r, i]))
                for i in range(n)]


def _rows(x, n: int) -> np.ndarray:
    a = np.ascontiguousarray(np.zeros((n, 0)) if x is None else x, dtype=np.float64)
    if n == 0:
        return a.reshape(0, a.shape[1] if a.ndim == 2 else 0)
    return a.reshape(n, -1)


class Tracer:
    """Packed scene arrays plus BVH, ready for batched tracing."""

    def __init__(self, geom, sh=None, features=None, options: TraceOptions | None = None,
                 bvh: Bvh | None = None):
        self.options = options or TraceOptions()
        self.geom = np.ascontiguousarray(geom, dtype=np.float64)
        n = self.geom.shape[0]
        self.sh = _rows(sh, n)
        self.features = _rows(features, n)
        if bvh is None:
            mesh = build_proxy_mesh(self.geom, self.options.alpha_min)
            bvh = build_bvh(mesh) if len(mesh) else empty_bvh()
        self.bvh = bvh
        self.kernels = _backend.get(self.options.backend)

    @classmethod
    def from_scene(cls, scene, features=None, options: TraceOptions | None = None,
                   materials: bool = False) -> "Tracer":
        act = scene.activate() if isinstance(scene, Scene) else scene
        if materials and features is None:
            features = act.material_array()
        return cls(act.geom_array(), act.sh_array(), features, options)

    def __len__(self) -> int:
        return self.geom.shape[0]

    def with_features(self, features) -> "Tracer":
        """Same geometry and BVH, different feature payload."""
        return Tracer(self.geom, self.sh, features, self.options, self.bvh)

    def with_options(self, **kw) -> "Tracer":
        opts = replace(self.options, **kw)
        bvh = self.bvh if opts.alpha_min == self.options.alpha_min else None
        return Tracer(self.geom, self.sh, self.features, opts, bvh)

    def _arrays(self, geom=None, sh=None, feat=None):
        b = self.bvh
        return (
            self.geom if geom is None else geom,
            self.sh if sh is None else sh,
            self.features if feat is None else feat,
            b.prim_gid, b.node_bounds, b.node_info,
        )

    def trace(self, origins, dirs, t_min=0.0, t_max=math.inf, *, record: int = 0,
              brute: bool = False, want_color: bool = True) -> TraceResult:
        o, d, lo, hi = as_rays(origins, dirs, t_min, t_max)
        raw = self.kernels.trace_forward(
            *self._arrays(), o, d, lo, hi, want_color=want_color, record=record,
            brute=brute, threads=self.options.n_threads, **self.options.kernel_kwargs(),
        )
        return TraceResult.from_raw(*raw) if record else TraceResult.from_raw(raw[0], raw[1])

    def forward_raw(self, o, d, lo, hi, want_color=True, brute=False):
        return self.kernels.trace_forward(
            *self._arrays(), o, d, lo, hi, want_color=want_color, brute=brute,
            threads=self.options.n_threads, **self.options.kernel_kwargs(),
        )[0]

    def backward_raw(self, o, d, lo, hi, grad_out, want_color=True, geometry=True, brute=False):
        return self.kernels.trace_backward(
            *self._arrays(), o, d, lo, hi, np.ascontiguousarray(grad_out, dtype=np.float64),
            want_color=want_color, geometry=geometry, brute=brute,
            threads=self.options.n_threads, **self.options.kernel_kwargs(),
        )


def _rays_of(ray_or_origins, dirs=None, t_min=0.0, t_max=math.inf):
    if isinstance(ray_or_origins, Ray):
        r = ray_or_origins
        return r.origin[None], r.dir[None], r.t_min, r.t_max
    return ray_or_origins, dirs, t_min, t_max


def trace(tracer: Tracer, ray_or_origins, dirs=None, payload_fn=None, t_min=0.0,
          t_max=math.inf, *, record: int = 0, brute: bool = False) -> TraceResult:
    """Blend along rays. Without ``payload_fn`` the payload is SH radiance.

    ``payload_fn(gaussian_id, p, ray_dir) -> array`` evaluates an arbitrary
    payload at each hit; it replaces ``color`` with the blended payload and is
    meant for small ray counts.
    """
    o, d, lo, hi = _rays_of(ray_or_origins, dirs, t_min, t_max)
    if payload_fn is None:
        return tracer.trace(o, d, lo, hi, record=record, brute=brute)
    o, d, lo, hi = as_rays(o, d, lo, hi)
    res = tracer.trace(o, d, lo, hi, record=max(len(tracer), 1), brute=brute, want_color=False)
    blended = []
    for r in range(o.shape[0]):
        acc = None
        for gid, tau, w in res.hits(r):
            val = w * np.asarray(payload_fn(gid, o[r] + tau * d[r], d[r]), dtype=np.float64)
            acc = val if acc is None else acc + val
        blended.append(np.zeros(3) if acc is None else acc)
    res.color = np.stack(blended)
    if record == 0:
        res.hit_ids = res.hit_tau = res.hit_w = None
    return res


def trace_radiance(tracer: Tracer, ray_or_origins, dirs=None, t_min=0.0, t_max=math.inf):
    """Returns ``(L_ind, V)``: blended SH radiance and visibility."""
    res = trace(tracer, ray_or_origins, dirs, t_min=t_min, t_max=t_max)
    return res.color, res.visibility


@dataclass
class Aggregate:
    albedo: np.ndarray
    roughness: np.ndarray
    normal: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray


def trace_aggregate(tracer: Tracer, ray_or_origins, dirs=None, t_min=0.0, t_max=math.inf) -> Aggregate:
    """Opacity-normalized material blend; ``tracer`` features must be ``a, r``."""
    if tracer.features.shape[1] < 4:
        raise ValueError("aggregate tracing needs albedo/roughness features")
    o, d, lo, hi = _rays_of(ray_or_origins, dirs, t_min, t_max)
    o, d, lo, hi = as_rays(o, d, lo, hi)
    res = TraceResult.from_raw(tracer.forward_raw(o, d, lo, hi, want_color=False), None)
    aux = res.aux
    return Aggregate(aux[:, :3], aux[:, 3], res.normal, res.opacity, res.depth)


class _TraceFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mu, t_u, t_v, n, s, o, sh, feat, tracer, rays, want_color, geometry):
        geom = np.zeros((mu.shape[0], 16))
        for sl, x in ((slice(0, 3), mu), (slice(3, 6), t_u), (slice(6, 9), t_v), (slice(9, 12), n),
                      (slice(12, 14), s)):
            geom[:, sl] = x.detach().numpy()
        geom[:, 14] = o.detach().numpy()
        sh_np = np.ascontiguousarray(sh.detach().numpy().reshape(mu.shape[0], -1))
        feat_np = np.ascontiguousarray(feat.detach().numpy())
        args = tracer._arrays(geom, sh_np, feat_np)
        out = tracer.kernels.trace_forward(
            *args, *rays, want_color=want_color, threads=tracer.options.n_threads,
            **tracer.options.kernel_kwargs(),
        )[0]
        ctx.state = (tracer, args, rays, want_color, geometry, sh.shape, feat.shape[1])
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        tracer, args, rays, want_color, geometry, sh_shape, n_feat = ctx.state
        g = tracer.kernels.trace_backward(
            *args, *rays, np.ascontiguousarray(grad_out.numpy(), dtype=np.float64),
            want_color=want_color, geometry=geometry, threads=tracer.options.n_threads,
            **tracer.options.kernel_kwargs(),
        )
        g = torch.from_numpy(g)
        n_sh3 = g.shape[1] - 16 - n_feat
        geo = [g[:, 0:3], g[:, 3:6], g[:, 6:9], g[:, 9:12], g[:, 12:14]] if geometry else [None] * 5
        return (*geo, g[:, 14], g[:, 16:16 + n_sh3].reshape(sh_shape), g[:, 16 + n_sh3:],
                None, None, None, None)


def trace_torch(act: ActivatedScene, origins, dirs, t_min=0.0, t_max=math.inf, *,
                features: torch.Tensor | None = None, options: TraceOptions | None = None,
                tracer: Tracer | None = None, want_color: bool = True,
                geometry: bool = True) -> torch.Tensor:
    """Differentiable batched trace; returns raw output rows (R, 9 + F).

    Columns: color(3) opacity depth_sum normal_sum(3) distortion features(F).
    """
    rays = as_rays(origins, dirs, t_min, t_max)
    if features is None:
        features = torch.zeros(len(act), 0, dtype=torch.float64)
    if tracer is None:
        tracer = Tracer(act.geom_array(), None, None, options)
    sh = act.sh if want_color else act.sh[:, :0]
    return _TraceFn.apply(act.mu, act.t_u, act.t_v, act.n, act.s, act.o, sh, features,
                          tracer, rays, want_color, geometry)


@dataclass
class AdjointBundle:
    """Gradients in raw parameter space, shaped like the scene tensors."""

    sh: torch.Tensor
    opacity_raw: torch.Tensor
    albedo_raw: torch.Tensor
    roughness_raw: torch.Tensor
    mu: torch.Tensor | None = None
    rot: torch.Tensor | None = None
    scale_raw: torch.Tensor | None = None
    env: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, scene: Scene, geometry: bool = True, env_shape=None) -> "AdjointBundle":
        z = torch.zeros_like
        return cls(
            sh=z(scene.sh), opacity_raw=z(scene.opacity_raw), albedo_raw=z(scene.albedo_raw),
            roughness_raw=z(scene.roughness_raw),
            mu=z(scene.mu) if geometry else None, rot=z(scene.rot) if geometry else None,
            scale_raw=z(scene.scale_raw) if geometry else None,
            env=None if env_shape is None else torch.zeros(env_shape, dtype=torch.float64),
        )


def trace_adjoint(scene: Scene, ray_or_origins, dirs=None, upstream=None, *,
                  features: str | None = None, geometry: bool = True,
                  options: TraceOptions | None = None, t_min=0.0, t_max=math.inf) -> AdjointBundle:
    """Chain ``upstream`` (R, 9 + F) through a trace into raw parameters.

    ``features="material"`` blends ``albedo, roughness`` as the feature payload.
    """
    o, d, lo, hi = _rays_of(ray_or_origins, dirs, t_min, t_max)
    work = scene.clone().requires_grad_(True)
    act = work.activate()
    feats = None
    if features == "material":
        feats = torch.cat([act.albedo, act.roughness[:, None]], 1)
    out = trace_torch(act, o, d, lo, hi, features=feats, options=options, geometry=geometry)
    up = torch.as_tensor(np.asarray(upstream, dtype=np.float64)).reshape(out.shape)
    names = ["sh", "opacity_raw", "albedo_raw", "roughness_raw"]
    if geometry:
        names += ["mu", "rot", "scale_raw"]
    grads = torch.autograd.grad(out, [getattr(work, nm) for nm in names], up, allow_unused=True)
    bundle = AdjointBundle.zeros_like(scene, geometry)
    for nm, g in zip(names, grads):
        if g is not None:
            setattr(bundle, nm, g.detach())
    return bundle


def brute_force_trace(geom, sh, ray_o, ray_d, t_min=0.0, t_max=math.inf, alpha_min=0.01,
                      t_cut=0.03):
    """Independent numpy oracle: intersect everything, sort, blend.

    Returns ``(color, opacity, ordered_ids)`` for one ray.
    """
    from .scene import sh_eval

    geom = np.asarray(geom, dtype=np.float64)
    ro = np.asarray(ray_o, dtype=np.float64)
    rd = np.asarray(ray_d, dtype=np.float64)
    n = geom[:, 9:12]
    denom = n @ rd
    ok = np.abs(denom) >= 1e-9
    tau = np.where(ok, np.einsum("ij,ij->i", n, geom[:, 0:3] - ro) / np.where(ok, denom, 1.0), np.nan)
    ok &= (tau > t_min) & (tau < t_max)
    p = ro + np.nan_to_num(tau)[:, None] * rd
    dlt = p - geom[:, 0:3]
    u = np.einsum("ij,ij->i", dlt, geom[:, 3:6]) / geom[:, 12]
    v = np.einsum("ij,ij->i", dlt, geom[:, 6:9]) / geom[:, 13]
    alpha = geom[:, 14] * np.exp(-0.5 * (u * u + v * v))
    ok &= alpha >= alpha_min
    idx = np.nonzero(ok)[0]
    idx = idx[np.lexsort((idx, tau[idx]))]
    T, color, order = 1.0, np.zeros(3), []
    sh = None if sh is None else np.asarray(sh, dtype=np.float64).reshape(len(geom), -1, 3)
    for i in idx:
        w = T * alpha[i]
        if sh is not None:
            color += w * sh_eval(sh[i], rd)
        order.append(int(i))
        T *= 1.0 - alpha[i]
        if T < t_cut:
            break
    return color, 1.0 - T, order
