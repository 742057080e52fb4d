"""Bounding proxies (stretched icosahedra) and a median-split BVH over them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_PHI = (1.0 + math.sqrt(5.0)) / 2.0

# Unit-inradius icosahedron: the classic (0, +-1, +-phi) layout scaled so
# every face plane sits at distance one from the origin.
ICO_VERTS = (
    np.array(
        [
            [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
            [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
            [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
        ],
        dtype=np.float64,
    )
    * (math.sqrt(3.0) / _PHI**2)
)
ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)

THICKNESS_REL = 1e-4


def proxy_scale(opacity, alpha_min: float):
    """Radius (in std units) where ``o * G`` falls to ``alpha_min``."""
    o = np.asarray(opacity, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sqrt(2.0 * np.log(np.maximum(o, alpha_min) / alpha_min))


@dataclass
class ProxyMesh:
    triangles: np.ndarray  # (T, 3, 3)
    gaussian_id: np.ndarray  # (T,) int64

    def __len__(self) -> int:
        return self.triangles.shape[0]


def build_proxy_mesh(geom: np.ndarray, alpha_min: float = 0.01) -> ProxyMesh:
    """Proxy triangles for packed Gaussians (see :mod:`surfeltrace.packing`).

    Gaussians whose opacity cannot reach ``alpha_min`` get no proxy.
    """
    geom = np.asarray(geom, dtype=np.float64)
    keep = np.nonzero(geom[:, 14] > alpha_min)[0]
    if keep.size == 0:
        return ProxyMesh(np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64))
    g = geom[keep]
    k = proxy_scale(g[:, 14], alpha_min)
    s = g[:, 12:14]
    eps = THICKNESS_REL * s.max(1)
    axes = np.stack(
        [g[:, 3:6] * s[:, :1], g[:, 6:9] * s[:, 1:2], g[:, 9:12] * eps[:, None]], axis=2
    ) * k[:, None, None]
    verts = np.einsum("nij,vj->nvi", axes, ICO_VERTS) + g[:, None, 0:3]
    tris = verts[:, ICO_FACES]
    gid = np.repeat(keep.astype(np.int64), ICO_FACES.shape[0])
    return ProxyMesh(tris.reshape(-1, 3, 3), gid)


def build_proxy(g, alpha_min: float = 0.01):
    """Proxy triangles (20, 3, 3) of one activated Gaussian, or ``None``."""
    from .packing import pack_gaussian

    mesh = build_proxy_mesh(pack_gaussian(g)[None], alpha_min)
    return mesh.triangles if len(mesh) else None


@dataclass
class Bvh:
    """Flattened BVH over per-Gaussian proxy bounds. ``node_info`` rows are
    ``left, right, start, count``; ``count > 0`` marks a leaf covering
    ``prim_gid[start:start + count]``."""

    node_bounds: np.ndarray  # (M, 6) lo, hi
    node_info: np.ndarray  # (M, 4) int64
    prim_gid: np.ndarray  # (P,) int64 in leaf order
    mesh: ProxyMesh | None = None

    @property
    def n_nodes(self) -> int:
        return self.node_bounds.shape[0]

    def depth(self) -> int:
        if self.n_nodes == 0:
            return 0
        best, stack = 0, [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            left, right, _, count = self.node_info[node]
            if count == 0:
                stack += [(int(left), d + 1), (int(right), d + 1)]
        return best


def empty_bvh() -> Bvh:
    return Bvh(np.zeros((0, 6)), np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64))


def proxy_bounds(mesh: ProxyMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian ids present in ``mesh`` and the AABB of each one's triangles."""
    gid = np.asarray(mesh.gaussian_id, dtype=np.int64)
    ids, inv = np.unique(gid, return_inverse=True)
    tlo, thi = mesh.triangles.min(1), mesh.triangles.max(1)
    lo = np.full((len(ids), 3), np.inf)
    hi = np.full((len(ids), 3), -np.inf)
    np.minimum.at(lo, inv, tlo)
    np.maximum.at(hi, inv, thi)
    return ids, lo, hi


def build_bvh(mesh: ProxyMesh, leaf_size: int = 4) -> Bvh:
    """Median split on the longest centroid axis; ties broken by index."""
    if len(mesh) == 0:
        raise ValueError("cannot build a BVH over an empty proxy mesh")
    ids, plo, phi = proxy_bounds(mesh)
    n = len(ids)
    cen = 0.5 * (plo + phi)
    order = np.arange(n)
    bounds = [None]
    info = [None]
    stack = [(0, 0, n)]
    while stack:
        node, start, end = stack.pop()
        idx = order[start:end]
        lo, hi = plo[idx].min(0), phi[idx].max(0)
        pad = 1e-9 * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        bounds[node] = np.concatenate([lo - pad, hi + pad])
        if end - start <= leaf_size:
            info[node] = (-1, -1, start, end - start)
            continue
        c = cen[idx]
        axis = int(np.argmax(c.max(0) - c.min(0)))
        order[start:end] = idx[np.lexsort((idx, c[:, axis]))]
        mid = start + (end - start) // 2
        left = len(bounds)
        bounds += [None, None]
        info += [None, None]
        info[node] = (left, left + 1, start, 0)
        stack.append((left + 1, mid, end))
        stack.append((left, start, mid))
    return Bvh(
        np.ascontiguousarray(np.stack(bounds)),
        np.ascontiguousarray(np.array(info, dtype=np.int64)),
        np.ascontiguousarray(ids[order]),
        mesh,
    )
