"""Physically based shading with traced visibility and indirect light, plus
the split-sum relighting path.

Tensors are float64 torch tensors; array-likes are accepted on input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import cubemap
from .tracer import Tracer, trace_torch

F0_DIELECTRIC = 0.04
ALPHA2_FLOOR = 1e-8
PREFILTER_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)
LUMA = np.array([0.2126, 0.7152, 0.0722])


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == torch.float64 else x.double()
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _dot(a, b):
    return (a * b).sum(-1)


# --------------------------------------------------------------------- BRDF

def ggx_d(NoH, alpha2):
    den = NoH * NoH * (alpha2 - 1.0) + 1.0
    return alpha2 / (math.pi * den * den)


def smith_vis(NoL, NoV, alpha2):
    """Height-correlated Smith term divided by ``4 NoL NoV``."""
    gv = NoL * torch.sqrt(NoV * NoV * (1.0 - alpha2) + alpha2)
    gl = NoV * torch.sqrt(NoL * NoL * (1.0 - alpha2) + alpha2)
    return 0.5 / torch.clamp(gv + gl, min=1e-300)


def brdf_eval(a, r, n, w_i, w_o, f0=F0_DIELECTRIC) -> torch.Tensor:
    """Lambert + GGX/Schlick/Smith BRDF; zero outside both hemispheres.

    ``f0=None`` drops the specular lobe (test hook).
    """
    a, r, n, w_i, w_o = map(_t, (a, r, n, w_i, w_o))
    NoL = _dot(n, w_i)
    NoV = _dot(n, w_o)
    valid = (NoL > 0) & (NoV > 0)
    f = a / math.pi * torch.ones_like(NoL)[..., None]
    if f0 is not None:
        h = w_i + w_o
        h = h / torch.clamp(torch.linalg.vector_norm(h, dim=-1, keepdim=True), min=1e-300)
        NoH = torch.clamp(_dot(n, h), 0.0, 1.0)
        VoH = torch.clamp(_dot(w_o, h), 0.0, 1.0)
        alpha2 = torch.clamp((r * r) ** 2, min=ALPHA2_FLOOR)
        D = ggx_d(NoH, alpha2)
        F = f0 + (1.0 - f0) * (1.0 - VoH) ** 5
        Vis = smith_vis(torch.clamp(NoL, min=0.0), torch.clamp(NoV, min=0.0), alpha2)
        f = f + (D * F * Vis)[..., None]
    return torch.where(valid[..., None], torch.clamp(f, min=0.0), torch.zeros_like(f))


# ------------------------------------------------------------------ sampling

def tangent_frame(n: np.ndarray):
    """Orthonormal ``(t1, t2)`` around unit normals (..., 3), branchless."""
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t1 = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], -1)
    t2 = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], -1)
    return t1, t2


def _grid_side(n_samples: int) -> int:
    m = math.isqrt(n_samples)
    if m * m != n_samples or m == 0:
        raise ValueError(f"sample count {n_samples} is not a perfect square")
    return m


def stratified_hemisphere(n, n_samples: int, rng=None, jitter: bool = True) -> np.ndarray:
    """Uniform-density hemisphere directions around ``n`` (..., 3).

    Returns (..., n_samples, 3); each has pdf ``1 / (2 pi)``. ``rng`` may be a
    seed or a numpy Generator; ``jitter=False`` uses stratum centers.
    """
    m = _grid_side(n_samples)
    n = np.asarray(n, dtype=np.float64)
    lead = n.shape[:-1]
    j, i = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    base = np.stack([i.reshape(-1), j.reshape(-1)], -1).astype(np.float64)
    if jitter:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        xi = gen.random(lead + (n_samples, 2))
    else:
        xi = np.full(lead + (n_samples, 2), 0.5)
    u = (base + xi) / m
    cos_t = u[..., 0]
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * u[..., 1]
    t1, t2 = tangent_frame(n)
    return (
        (sin_t * np.cos(phi))[..., None] * t1[..., None, :]
        + (sin_t * np.sin(phi))[..., None] * t2[..., None, :]
        + cos_t[..., None] * n[..., None, :]
    )


# --------------------------------------------------------------- environment

class EnvCubemap:
    """Radiance cubemap stored as log-radiance (6, R, R, 3)."""

    def __init__(self, log_radiance):
        self.log_radiance = _t(log_radiance).clone()
        if self.log_radiance.ndim != 4 or self.log_radiance.shape[0] != 6:
            raise ValueError("cubemap must have shape (6, R, R, 3)")

    @classmethod
    def constant(cls, value, resolution: int = 32) -> "EnvCubemap":
        rad = np.broadcast_to(np.asarray(value, dtype=np.float64), (6, resolution, resolution, 3))
        return cls.from_radiance(rad)

    @classmethod
    def from_radiance(cls, radiance) -> "EnvCubemap":
        rad = np.asarray(radiance, dtype=np.float64)
        if np.any(rad < 0) or not np.all(np.isfinite(rad)):
            raise ValueError("cubemap radiance must be finite and non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(rad))

    @property
    def resolution(self) -> int:
        return self.log_radiance.shape[1]

    def radiance(self) -> torch.Tensor:
        return torch.exp(self.log_radiance)

    def numpy(self) -> np.ndarray:
        return self.radiance().detach().numpy()

    def lookup(self, dirs) -> torch.Tensor:
        return cubemap.lookup(self.radiance(), dirs)

    def requires_grad_(self, flag: bool = True) -> "EnvCubemap":
        self.log_radiance = self.log_radiance.detach().requires_grad_(flag)
        return self


def env_lookup(env: EnvCubemap, w) -> torch.Tensor:
    return env.lookup(w)


# ------------------------------------------------------------------ shading

@dataclass
class ShadeResult:
    color: torch.Tensor  # c_pbr (P, 3)
    L_dir: torch.Tensor  # sample means (P, 3)
    L_ind: torch.Tensor
    V: torch.Tensor  # (P,)
    L_i: torch.Tensor


def _secondary(x, n, dirs, offset):
    x = _t(x).detach().numpy()
    n = _t(n).detach().numpy()
    o = x + offset * n
    S = dirs.shape[-2]
    return np.repeat(o, S, axis=0), dirs.reshape(-1, 3)


def incoming(origins, dirs, env: EnvCubemap | None, *, act=None, tracer: Tracer | None = None,
             geometry: bool = False):
    """``(L_i, L_dir, L_ind, V)`` along flat secondary rays.

    With ``act`` (activated scene) the trace is differentiable; a bare
    ``tracer`` gives constant values; neither means nothing occludes.
    """
    dirs_t = _t(dirs)
    L_dir = env.lookup(dirs) if env is not None else torch.zeros(dirs_t.shape)
    if act is not None:
        out = trace_torch(act, origins, dirs, tracer=tracer, geometry=geometry)
        L_ind, V = out[:, 0:3], 1.0 - out[:, 3]
    elif tracer is not None:
        res = tracer.trace(origins, dirs)
        L_ind, V = torch.from_numpy(res.color), torch.from_numpy(res.visibility)
    else:
        L_ind, V = torch.zeros(dirs_t.shape), torch.ones(dirs_t.shape[:-1])
    return V[:, None] * L_dir + L_ind, L_dir, L_ind, V


def incident_radiance(tracer: Tracer | None, env: EnvCubemap, x, w_i) -> torch.Tensor:
    """``V L_dir + L_ind`` at points ``x`` along unit directions ``w_i``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(w_i, dtype=np.float64).reshape(-1, 3)
    return incoming(np.broadcast_to(x, w.shape).copy(), w, env, tracer=tracer)[0]


def shade_points(x, n, a, r, w_o, env: EnvCubemap | None, n_samples: int = 256, rng=None, *,
                 act=None, tracer: Tracer | None = None, offset: float = 0.0,
                 f0=F0_DIELECTRIC, geometry: bool = False, jitter: bool = True) -> ShadeResult:
    """Stratified estimate of the rendering equation at P shading points."""
    n_t = _t(n)
    n_np = n_t.detach().numpy().reshape(-1, 3)
    P = n_np.shape[0]
    dirs = stratified_hemisphere(n_np, n_samples, rng, jitter)  # (P, S, 3)
    o, d = _secondary(x, n_np, dirs, offset)
    L_i, L_dir, L_ind, V = incoming(o, d, env, act=act, tracer=tracer, geometry=geometry)
    S = n_samples
    L_i = L_i.reshape(P, S, 3)
    w_i = torch.from_numpy(dirs)
    a_t, r_t, wo_t = _t(a).reshape(P, 1, 3), _t(r).reshape(P, 1), _t(w_o).reshape(P, 1, 3)
    f = brdf_eval(a_t, r_t, n_t.reshape(P, 1, 3), w_i, wo_t, f0)
    cos = torch.clamp(_dot(w_i, n_t.reshape(P, 1, 3)), min=0.0)
    c = (2.0 * math.pi / S) * (f * L_i * cos[..., None]).sum(1)
    return ShadeResult(
        color=c,
        L_dir=L_dir.reshape(P, S, 3).mean(1),
        L_ind=L_ind.reshape(P, S, 3).mean(1),
        V=V.reshape(P, S).mean(1),
        L_i=L_i.mean(1),
    )


def shade_pixel(x, n, a, r, w_o, tracer: Tracer | None, env: EnvCubemap, n_samples: int = 256,
                rng_seed=0, f0=F0_DIELECTRIC, offset: float = 0.0) -> torch.Tensor:
    res = shade_points(np.reshape(x, (1, 3)), np.reshape(n, (1, 3)), np.reshape(a, (1, 3)),
                       np.reshape(r, (1,)), np.reshape(w_o, (1, 3)), env, n_samples, rng_seed,
                       tracer=tracer, f0=f0, offset=offset)
    return res.color[0]


# --------------------------------------------------------------- prefiltering

@dataclass
class PrefilteredEnv:
    irradiance: np.ndarray  # (6, R, R, 3)
    levels: list  # radiance per roughness level
    source: np.ndarray
    roughness_levels: tuple = PREFILTER_LEVELS

    def irradiance_at(self, dirs) -> np.ndarray:
        return cubemap.lookup(self.irradiance, dirs)

    def specular_at(self, dirs, roughness) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        r = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0)
        r = np.broadcast_to(r, dirs.shape[:-1])
        pos = r * (len(self.levels) - 1)
        lo = np.minimum(np.floor(pos).astype(np.int64), len(self.levels) - 2)
        frac = pos - lo
        out = np.zeros(dirs.shape)
        for lvl in range(len(self.levels) - 1):
            m = lo == lvl
            if not np.any(m):
                continue
            a = cubemap.lookup(self.levels[lvl], dirs[m])
            b = cubemap.lookup(self.levels[lvl + 1], dirs[m])
            out[m] = a + frac[m][:, None] * (b - a)
        return out


def _convolve(dirs, omega, rad, weight_fn, block: int = 1024):
    flat_d = dirs.reshape(-1, 3)
    flat_w = omega.reshape(-1)
    flat_L = rad.reshape(-1, 3)
    out = np.zeros_like(flat_L)
    for s in range(0, flat_d.shape[0], block):
        cos = flat_d[s:s + block] @ flat_d.T
        w = weight_fn(cos) * flat_w[None, :]
        out[s:s + block] = (w @ flat_L) / w.sum(1, keepdims=True)
    return out.reshape(rad.shape)


def prefilter_env(env) -> PrefilteredEnv:
    """Deterministic texel-sum convolutions of the cubemap.

    Irradiance stores ``(1/pi) int L cos``; specular level ``r`` weights by the
    GGX lobe about the reflection direction (``N = V = R``).
    """
    rad = env.numpy() if isinstance(env, EnvCubemap) else np.asarray(env, dtype=np.float64)
    R = rad.shape[1]
    dirs = cubemap.texel_directions(R)
    omega = cubemap.texel_solid_angles(R)
    irr = _convolve(dirs, omega, rad, lambda c: np.maximum(c, 0.0))
    levels = [rad.copy()]
    for rough in PREFILTER_LEVELS[1:]:
        alpha2 = max(rough**4, ALPHA2_FLOOR)

        def lobe(c, alpha2=alpha2):
            noh2 = np.maximum((1.0 + c) * 0.5, 0.0)
            den = noh2 * (alpha2 - 1.0) + 1.0
            return alpha2 / (math.pi * den * den) * np.maximum(c, 0.0)

        levels.append(_convolve(dirs, omega, rad, lobe))
    return PrefilteredEnv(irr, levels, rad)


# ------------------------------------------------------------------ BRDF LUT

@dataclass
class BrdfLut:
    """Split-sum terms indexed ``table[i_cos, i_rough] = (scale, bias)``."""

    table: np.ndarray  # (S, S, 2)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def lookup(self, cos_v, roughness) -> np.ndarray:
        S = self.size
        x = np.clip(np.asarray(cos_v, dtype=np.float64), 0.0, 1.0) * (S - 1)
        y = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0) * (S - 1)
        x, y = np.broadcast_arrays(x, y)
        x0 = np.minimum(np.floor(x).astype(np.int64), S - 2)
        y0 = np.minimum(np.floor(y).astype(np.int64), S - 2)
        fx, fy = (x - x0)[..., None], (y - y0)[..., None]
        t = self.table
        return ((1 - fx) * (1 - fy) * t[x0, y0] + fx * (1 - fy) * t[x0 + 1, y0]
                + (1 - fx) * fy * t[x0, y0 + 1] + fx * fy * t[x0 + 1, y0 + 1])


def integrate_brdf(cos_v, roughness, n_samples: int = 512, seed: int = 0) -> np.ndarray:
    """GGX importance-sampled ``(scale, bias)`` for arrays of ``(cos_v, r)``."""
    cos_v = np.maximum(np.asarray(cos_v, dtype=np.float64), 1e-3)
    rough = np.asarray(roughness, dtype=np.float64)
    cos_v, rough = np.broadcast_arrays(cos_v, rough)
    gen = np.random.default_rng(seed)
    u1 = (np.arange(n_samples) + gen.random(n_samples)) / n_samples
    u2 = gen.random(n_samples)
    alpha2 = np.maximum(rough**4, ALPHA2_FLOOR)[..., None]
    cos_h = np.sqrt((1.0 - u1) / (1.0 + (alpha2 - 1.0) * u1))
    sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h * cos_h))
    phi = 2.0 * math.pi * u2
    hx, hy, hz = sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h
    vx = np.sqrt(1.0 - cos_v**2)[..., None]
    vz = cos_v[..., None]
    VoH = vx * hx + vz * hz
    NoL = 2.0 * VoH * hz - vz
    ok = (NoL > 0) & (VoH > 0)
    NoLc = np.maximum(NoL, 0.0)
    gv = NoLc * np.sqrt(vz * vz * (1.0 - alpha2) + alpha2)
    gl = vz * np.sqrt(NoLc * NoLc * (1.0 - alpha2) + alpha2)
    vis = 0.5 / np.maximum(gv + gl, 1e-300)
    g_vis = np.where(ok, 4.0 * vis * NoLc * VoH / hz, 0.0)
    fc = (1.0 - np.clip(VoH, 0.0, 1.0)) ** 5
    scale = ((1.0 - fc) * g_vis).mean(-1)
    bias = (fc * g_vis).mean(-1)
    return np.clip(np.stack([scale, bias], -1), 0.0, 2.0)


def build_brdf_lut(size: int = 64, n_samples: int = 512, seed: int = 0) -> BrdfLut:
    g = np.linspace(0.0, 1.0, size)
    cos_v, rough = np.meshgrid(g, g, indexing="ij")
    return BrdfLut(integrate_brdf(cos_v, rough, n_samples, seed))


# --------------------------------------------------------------- relighting

def split_sum(albedo, roughness, normal, view, pre: PrefilteredEnv, lut: BrdfLut,
              f0=F0_DIELECTRIC) -> np.ndarray:
    """Outgoing radiance toward ``view`` of a surface lit by ``pre``."""
    n = np.asarray(normal, dtype=np.float64)
    v = np.asarray(view, dtype=np.float64)
    NoV = np.clip((n * v).sum(-1), 0.0, 1.0)
    refl = 2.0 * NoV[..., None] * n - v
    refl = refl / np.maximum(np.linalg.norm(refl, axis=-1, keepdims=True), 1e-300)
    diffuse = np.asarray(albedo) * pre.irradiance_at(n)
    if f0 is None:
        return diffuse
    sb = lut.lookup(NoV, roughness)
    spec = pre.specular_at(refl, roughness) * (f0 * sb[..., :1] + sb[..., 1:2])
    return diffuse + spec


def relight_indirect(tracer: Tracer, pre: PrefilteredEnv, lut: BrdfLut, origins, dirs,
                     f0=F0_DIELECTRIC):
    """Split-sum radiance arriving along rays, weighted by the hit opacity.

    ``tracer`` must carry ``albedo, roughness`` features. Returns ``(L, opacity)``.
    """
    from .tracer import trace_aggregate

    agg = trace_aggregate(tracer, origins, dirs)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    hit = agg.opacity > 0
    L = np.zeros((d.shape[0], 3))
    if np.any(hit):
        L[hit] = split_sum(agg.albedo[hit], agg.roughness[hit], agg.normal[hit], -d[hit],
                           pre, lut, f0)
    return L * agg.opacity[:, None], agg.opacity


_SUB = 4
_SUB_ORDER = cubemap.hilbert_order(_SUB)


class EnvSampler:
    """Texel-wise importance sampler: probability ~ luminance x solid angle.

    The CDF follows a continuous Hilbert tour of the cube so stratified
    samples land in compact patches.
    """

    def __init__(self, radiance):
        rad = radiance.numpy() if isinstance(radiance, EnvCubemap) else np.asarray(radiance, dtype=np.float64)
        self.R = rad.shape[1]
        self.omega = cubemap.texel_solid_angles(self.R).reshape(-1)
        lum = np.maximum(rad.reshape(-1, 3) @ LUMA, 0.0)
        w = lum * self.omega
        self.uniform = not np.any(w > 0)
        if self.uniform:
            w = self.omega.copy()
        self.prob = w / w.sum()
        self.order = cubemap.hilbert_tour(self.R)
        self.cdf = np.cumsum(self.prob[self.order])
        self.cdf[-1] = 1.0

    def _texel_pdf(self, texel, s, t):
        return self.prob[texel] * (1.0 + s * s + t * t) ** 1.5 / (2.0 / self.R) ** 2

    def sample(self, shape, rng=None):
        """Directions (``shape`` + (3,)) and their solid-angle pdf.

        The last axis of ``shape`` is systematically stratified on the texel CDF.
        """
        shape = tuple(np.atleast_1d(shape))
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        S = shape[-1]
        # systematic sampling: one shared offset per stratified row
        u = (np.arange(S) + gen.random(shape[:-1] + (1,))) / S
        slot = np.minimum(np.searchsorted(self.cdf, u, side="right"), self.cdf.size - 1)
        # skip zero-probability texels that a boundary u could land on
        while True:
            bad = self.prob[self.order[slot]] == 0
            if not np.any(bad):
                break
            slot[bad] = np.minimum(slot[bad] + 1, self.cdf.size - 1)
        texel = self.order[slot]
        R = self.R
        face, rem = np.divmod(texel, R * R)
        row, col = np.divmod(rem, R)
        # place the sample inside its texel along a small Hilbert curve driven
        # by the CDF residual, keeping strata compact below texel scale
        lo = np.where(slot > 0, self.cdf[np.maximum(slot - 1, 0)], 0.0)
        resid = np.clip((u - lo) / self.prob[texel], 0.0, 1.0 - 1e-12)
        cell = _SUB_ORDER[(resid * _SUB * _SUB).astype(np.int64)]
        sub_r, sub_c = np.divmod(cell, _SUB)
        xi = gen.random(shape + (2,))
        s = (col + (sub_c + xi[..., 0]) / _SUB) / R * 2.0 - 1.0
        t = (row + (sub_r + xi[..., 1]) / _SUB) / R * 2.0 - 1.0
        d = cubemap.face_direction(face, s, t)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d, self._texel_pdf(texel, s, t)

    def pdf(self, dirs) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        _, s, t = cubemap.direction_to_face(dirs)
        return self._texel_pdf(cubemap.nearest_texel(dirs, self.R), s, t)


def importance_sample_env(env) -> EnvSampler:
    return EnvSampler(env)


def relight_points(x, n, a, r, w_o, env: EnvCubemap, sampler: EnvSampler, n_samples: int = 256,
                   rng=None, *, tracer: Tracer | None = None, pre: PrefilteredEnv | None = None,
                   lut: BrdfLut | None = None, offset: float = 0.0, f0=F0_DIELECTRIC) -> np.ndarray:
    """Importance-sampled shading under a new environment.

    Secondary hits contribute split-sum radiance when ``pre``/``lut`` are
    given, else they only occlude.
    """
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    P = n.shape[0]
    dirs, pdf = sampler.sample((P, n_samples), rng)
    L_dir = cubemap.lookup(env.numpy(), dirs).reshape(-1, 3)
    if tracer is not None:
        o = np.repeat(np.asarray(x, dtype=np.float64).reshape(-1, 3) + offset * n, n_samples, axis=0)
        flat = dirs.reshape(-1, 3)
        if pre is not None and lut is not None:
            L_ind, opa = relight_indirect(tracer, pre, lut, o, flat, f0)
        else:
            L_ind = np.zeros_like(flat)
            opa = tracer.trace(o, flat, want_color=False).opacity
        L = (1.0 - opa)[:, None] * L_dir + L_ind
    else:
        L = L_dir
    L = L.reshape(P, n_samples, 3)
    f = brdf_eval(np.reshape(a, (P, 1, 3)), np.reshape(r, (P, 1)), n[:, None], dirs,
                  np.reshape(w_o, (P, 1, 3)), f0).numpy()
    cos = np.maximum((dirs * n[:, None]).sum(-1), 0.0)
    return (f * L * (cos / pdf)[..., None]).mean(1)


def relight_pixel(x, n, a, r, w_o, env: EnvCubemap, sampler: EnvSampler, n_samples: int = 256,
                  rng=None, **kw) -> np.ndarray:
    return relight_points(np.reshape(x, (1, 3)), np.reshape(n, (1, 3)), np.reshape(a, (1, 3)),
                          np.reshape(r, (1,)), np.reshape(w_o, (1, 3)), env, sampler,
                          n_samples, rng, **kw)[0]
