"""Gaussian surfels, parameter activations, SH radiance and per-splat geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_COEFFS = 9
PARALLEL_EPS = 1e-9


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; columns are t_u, t_v, n."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def quat_to_matrix_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, -2)


def matrix_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternion of a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def sh_basis(dirs):
    """Real SH basis up to degree 2 for unit directions (..., 3) -> (..., 9)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_eval(sh, view_dir, clamp: bool = True) -> np.ndarray:
    """Radiance of SH coefficients ``sh`` (K, 3) seen along ``view_dir``.

    The 0.5 DC offset is always added; ``clamp=False`` skips the clamp at zero.
    """
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(view_dir)[..., : sh.shape[-2]]
    rgb = np.einsum("...k,...kc->...c", basis, sh) + 0.5
    return np.maximum(rgb, 0.0) if clamp else rgb


@dataclass
class Gaussian2D:
    """One surfel in raw (optimizer) parameter space."""

    mu: np.ndarray
    rot: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    scale_raw: np.ndarray = field(default_factory=lambda: np.zeros(2))
    opacity_raw: float = 0.0
    sh: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))
    albedo_raw: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roughness_raw: float = 0.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rot, dtype=np.float64).reshape(4)
        self.rot = rot / np.linalg.norm(rot)
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64).reshape(2)
        self.opacity_raw = float(self.opacity_raw)
        sh = np.zeros((SH_COEFFS, 3))
        given = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)
        sh[: given.shape[0]] = given
        self.sh = sh
        self.albedo_raw = np.asarray(self.albedo_raw, dtype=np.float64).reshape(3)
        self.roughness_raw = float(self.roughness_raw)


@dataclass
class ActivatedGaussian:
    mu: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    n: np.ndarray
    s: np.ndarray
    o: float
    a: np.ndarray
    r: float
    sh: np.ndarray


def activate(g: Gaussian2D) -> ActivatedGaussian:
    R = quat_to_matrix(g.rot)
    t_u, t_v = R[:, 0], R[:, 1]
    return ActivatedGaussian(
        mu=g.mu.copy(),
        t_u=t_u,
        t_v=t_v,
        n=np.cross(t_u, t_v),
        s=np.exp(g.scale_raw),
        o=float(sigmoid(g.opacity_raw)),
        a=sigmoid(g.albedo_raw),
        r=float(sigmoid(g.roughness_raw)),
        sh=g.sh.copy(),
    )


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.dir, dtype=np.float64).reshape(3)
        self.dir = d / np.linalg.norm(d)
        if not (0.0 <= self.t_min < self.t_max):
            raise ValueError(f"invalid ray interval ({self.t_min}, {self.t_max})")


def ray_splat_intersect(g: ActivatedGaussian, ray: Ray):
    """Return ``(tau, p)`` where the ray crosses the splat plane, or ``None``."""
    denom = float(np.dot(g.n, ray.dir))
    if abs(denom) < PARALLEL_EPS:
        return None
    tau = float(np.dot(g.n, g.mu - ray.origin)) / denom
    if not (ray.t_min < tau < ray.t_max):
        return None
    return tau, ray.origin + tau * ray.dir


def gaussian_response(g: ActivatedGaussian, p) -> float:
    d = np.asarray(p, dtype=np.float64) - g.mu
    u = float(np.dot(d, g.t_u)) / g.s[0]
    v = float(np.dot(d, g.t_v)) / g.s[1]
    return math.exp(-0.5 * (u * u + v * v))


@dataclass
class ActivatedScene:
    """Activated per-Gaussian tensors; may carry autograd history."""

    mu: torch.Tensor
    t_u: torch.Tensor
    t_v: torch.Tensor
    n: torch.Tensor
    s: torch.Tensor
    o: torch.Tensor
    sh: torch.Tensor
    albedo: torch.Tensor
    roughness: torch.Tensor

    def __len__(self) -> int:
        return self.mu.shape[0]

    def geom_array(self) -> np.ndarray:
        n = len(self)
        geom = np.zeros((n, 16))
        with torch.no_grad():
            geom[:, 0:3] = self.mu.detach().numpy()
            geom[:, 3:6] = self.t_u.detach().numpy()
            geom[:, 6:9] = self.t_v.detach().numpy()
            geom[:, 9:12] = self.n.detach().numpy()
            geom[:, 12:14] = self.s.detach().numpy()
            geom[:, 14] = self.o.detach().numpy()
        return geom

    def sh_array(self) -> np.ndarray:
        return np.ascontiguousarray(self.sh.detach().numpy().reshape(len(self), 3 * self.sh.shape[1]))

    def material_array(self) -> np.ndarray:
        return np.ascontiguousarray(
            torch.cat([self.albedo, self.roughness[:, None]], 1).detach().numpy()
        )


PARAM_NAMES = ("mu", "rot", "scale_raw", "opacity_raw", "sh", "albedo_raw", "roughness_raw")
GEOMETRY_PARAMS = ("mu", "rot", "scale_raw")


class Scene:
    """Ordered set of surfels stored as raw float64 tensors (struct of arrays)."""

    def __init__(self, mu, rot, scale_raw, opacity_raw, sh, albedo_raw, roughness_raw):
        def t(x):
            return torch.as_tensor(np.asarray(x, dtype=np.float64)).clone()

        self.mu = t(mu).reshape(-1, 3)
        n = self.mu.shape[0]
        self.rot = t(rot).reshape(n, 4)
        self.scale_raw = t(scale_raw).reshape(n, 2)
        self.opacity_raw = t(opacity_raw).reshape(n)
        sh = t(sh)
        sh = sh.reshape(n, -1, 3) if n else sh.reshape(0, SH_COEFFS, 3)
        if sh.shape[1] < SH_COEFFS:
            sh = torch.cat([sh, torch.zeros(n, SH_COEFFS - sh.shape[1], 3, dtype=sh.dtype)], 1)
        self.sh = sh
        self.albedo_raw = t(albedo_raw).reshape(n, 3)
        self.roughness_raw = t(roughness_raw).reshape(n)

    @classmethod
    def from_gaussians(cls, gaussians) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.rot for g in gaussians]),
            np.stack([g.scale_raw for g in gaussians]),
            np.array([g.opacity_raw for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
            np.stack([g.albedo_raw for g in gaussians]),
            np.array([g.roughness_raw for g in gaussians]),
        )

    @classmethod
    def empty(cls) -> "Scene":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
            np.zeros((0, SH_COEFFS, 3)), np.zeros((0, 3)), np.zeros(0),
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def params(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def gaussian(self, i: int) -> Gaussian2D:
        return Gaussian2D(
            mu=self.mu[i].detach().numpy(),
            rot=self.rot[i].detach().numpy(),
            scale_raw=self.scale_raw[i].detach().numpy(),
            opacity_raw=float(self.opacity_raw[i]),
            sh=self.sh[i].detach().numpy(),
            albedo_raw=self.albedo_raw[i].detach().numpy(),
            roughness_raw=float(self.roughness_raw[i]),
        )

    def clone(self) -> "Scene":
        return Scene(*(getattr(self, name).detach().numpy() for name in PARAM_NAMES))

    def requires_grad_(self, flag: bool = True) -> "Scene":
        for name in PARAM_NAMES:
            setattr(self, name, getattr(self, name).detach().requires_grad_(flag))
        return self

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise ValueError("scene has no gaussians")
        mu = self.mu.detach().numpy()
        return mu.min(0), mu.max(0)

    def diagonal(self) -> float:
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def activate(self) -> ActivatedScene:
        R = quat_to_matrix_torch(self.rot)
        return ActivatedScene(
            mu=self.mu,
            t_u=R[..., 0],
            t_v=R[..., 1],
            n=R[..., 2],
            s=torch.exp(self.scale_raw),
            o=torch.sigmoid(self.opacity_raw),
            sh=self.sh,
            albedo=torch.sigmoid(self.albedo_raw),
            roughness=torch.sigmoid(self.roughness_raw),
        )
