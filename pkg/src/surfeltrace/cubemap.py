"""Cubemap geometry and seamless bilinear lookup.

Faces follow the OpenGL order ``+x, -x, +y, -y, +z, -z``. Texel ``(row, col)``
of a face covers ``v`` in ``[row, row+1)/R`` and ``u`` in ``[col, col+1)/R``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

# (major axis, sign, sc axis, sc sign, tc axis, tc sign) per face
_FACES = (
    (0, 1.0, 2, -1.0, 1, -1.0),
    (0, -1.0, 2, 1.0, 1, -1.0),
    (1, 1.0, 0, 1.0, 2, 1.0),
    (1, -1.0, 0, 1.0, 2, -1.0),
    (2, 1.0, 0, 1.0, 1, -1.0),
    (2, -1.0, 0, -1.0, 1, -1.0),
)


def face_direction(face, s, t) -> np.ndarray:
    """Unnormalized direction for face coordinates ``s, t`` in ``[-1, 1]``."""
    face = np.asarray(face)
    s, t = np.asarray(s, dtype=np.float64), np.asarray(t, dtype=np.float64)
    face, s, t = np.broadcast_arrays(face, s, t)
    out = np.zeros(s.shape + (3,))
    for f, (ma, ms, sa, ss, ta, ts) in enumerate(_FACES):
        m = face == f
        out[m, ma] = ms
        out[m, sa] = ss * s[m]
        out[m, ta] = ts * t[m]
    return out


def direction_to_face(d):
    """Face index and ``(s, t)`` in ``[-1, 1]`` for directions ``(..., 3)``."""
    d = np.asarray(d, dtype=np.float64)
    a = np.abs(d)
    axis = np.argmax(a, axis=-1)
    comp = np.take_along_axis(d, axis[..., None], -1)[..., 0]
    face = axis * 2 + (comp < 0)
    s = np.zeros(d.shape[:-1])
    t = np.zeros(d.shape[:-1])
    for f, (ma, ms, sa, ss, ta, ts) in enumerate(_FACES):
        m = face == f
        inv = 1.0 / np.abs(d[m, ma])
        s[m] = ss * d[m, sa] * inv
        t[m] = ts * d[m, ta] * inv
    return face, s, t


def texel_directions(R: int) -> np.ndarray:
    """Unit directions of texel centers, shape (6, R, R, 3)."""
    c = (np.arange(R) + 0.5) / R * 2.0 - 1.0
    t, s = np.meshgrid(c, c, indexing="ij")
    d = np.stack([face_direction(f, s, t) for f in range(6)])
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _corner_area(x, y):
    return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))


def texel_solid_angles(R: int) -> np.ndarray:
    """Exact solid angle of every texel, shape (6, R, R); sums to 4*pi."""
    e = np.arange(R + 1) / R * 2.0 - 1.0
    x0, x1 = e[:-1], e[1:]
    # rows index t, columns index s
    om = (
        _corner_area(x0[None, :], x0[:, None]) - _corner_area(x0[None, :], x1[:, None])
        - _corner_area(x1[None, :], x0[:, None]) + _corner_area(x1[None, :], x1[:, None])
    )
    return np.broadcast_to(np.abs(om), (6, R, R)).copy()


def _lookup_plan(dirs: np.ndarray, R: int):
    """Flat texel indices (P, 4) and bilinear weights (P, 4) for directions."""
    face, s, t = direction_to_face(dirs)
    x = (s + 1.0) * 0.5 * R - 0.5
    y = (t + 1.0) * 0.5 * R - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    idx = np.zeros(face.shape + (4,), dtype=np.int64)
    wts = np.zeros(face.shape + (4,))
    taps = ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy))
    for k, (dx, dy, w) in enumerate(taps):
        cx, cy = x0 + dx, y0 + dy
        out_x = (cx < 0) | (cx >= R)
        out_y = (cy < 0) | (cy >= R)
        corner = out_x & out_y
        edge = out_x ^ out_y
        f2, cx2, cy2 = face.copy(), cx.copy(), cy.copy()
        if np.any(edge):
            # re-project the tap center onto whichever face it lands on
            sd = (cx[edge] + 0.5) / R * 2.0 - 1.0
            td = (cy[edge] + 0.5) / R * 2.0 - 1.0
            nf, ns, nt = direction_to_face(face_direction(face[edge], sd, td))
            f2[edge] = nf
            cx2[edge] = np.clip(np.floor((ns + 1.0) * 0.5 * R), 0, R - 1).astype(np.int64)
            cy2[edge] = np.clip(np.floor((nt + 1.0) * 0.5 * R), 0, R - 1).astype(np.int64)
        cx2 = np.clip(cx2, 0, R - 1)
        cy2 = np.clip(cy2, 0, R - 1)
        idx[..., k] = (f2 * R + cy2) * R + cx2
        wts[..., k] = np.where(corner, 0.0, w)
    wts /= wts.sum(-1, keepdims=True)
    return idx, wts


def lookup(cube, dirs):
    """Seamless bilinear lookup of a (6, R, R, C) cubemap along ``dirs``.

    Works on numpy arrays and on torch tensors (differentiable in ``cube``).
    """
    R = cube.shape[1]
    d_np = dirs.detach().numpy() if isinstance(dirs, torch.Tensor) else np.asarray(dirs)
    lead = d_np.shape[:-1]
    idx, w = _lookup_plan(d_np.reshape(-1, 3), R)
    if isinstance(cube, torch.Tensor):
        flat = cube.reshape(6 * R * R, -1)
        vals = flat[torch.from_numpy(idx.reshape(-1))].reshape(idx.shape + (flat.shape[1],))
        out = (vals * torch.from_numpy(w)[..., None]).sum(-2)
        return out.reshape(lead + (flat.shape[1],))
    flat = np.asarray(cube).reshape(6 * R * R, -1)
    out = (flat[idx] * w[..., None]).sum(-2)
    return out.reshape(lead + (flat.shape[1],))


def nearest_texel(dirs, R: int) -> np.ndarray:
    """Flat texel index containing each direction."""
    face, s, t = direction_to_face(dirs)
    col = np.clip(np.floor((s + 1.0) * 0.5 * R), 0, R - 1).astype(np.int64)
    row = np.clip(np.floor((t + 1.0) * 0.5 * R), 0, R - 1).astype(np.int64)
    return (face * R + row) * R + col


def hilbert_order(R: int) -> np.ndarray:
    """Flat ``row * R + col`` indices of an R x R grid along a Hilbert curve.

    The curve starts at ``(0, 0)`` and ends at ``(0, R - 1)``.
    """
    if R & (R - 1):
        raise ValueError("Hilbert order needs a power-of-two resolution")
    out = np.empty(R * R, dtype=np.int64)
    for d in range(R * R):
        x = y = 0
        t, s = d, 1
        while s < R:
            rx = 1 & (t // 2)
            ry = 1 & (t ^ rx)
            if ry == 0:
                if rx == 1:
                    x, y = s - 1 - x, s - 1 - y
                x, y = y, x
            x += s * rx
            y += s * ry
            t //= 4
            s *= 2
        out[d] = y * R + x
    return out


def _oriented(order: np.ndarray, R: int, k: int) -> np.ndarray:
    row, col = np.divmod(order, R)
    if k & 1:
        row, col = col, row
    if k & 2:
        row = R - 1 - row
    if k & 4:
        col = R - 1 - col
    return row * R + col


@lru_cache(maxsize=8)
def hilbert_tour(R: int) -> np.ndarray:
    """Texel order visiting all six faces with adjacent consecutive texels.

    Each face is walked by an oriented Hilbert curve; face order and
    orientations are found by depth-first search. Non power-of-two
    resolutions fall back to face-major row order.
    """
    if R & (R - 1):
        return np.arange(6 * R * R)
    base = hilbert_order(R)
    centers = texel_directions(R) * 1.0
    centers /= np.abs(centers).max(-1, keepdims=True)
    centers = centers.reshape(6, R * R, 3)
    seqs = {(f, k): _oriented(base, R, k) for f in range(6) for k in range(8)}
    limit = 3.0 / R

    def search(path):
        if len(path) == 6:
            return path
        used = {f for f, _ in path}
        for f in range(6):
            if f in used:
                continue
            for k in range(8):
                if path:
                    pf, pk = path[-1]
                    gap = centers[pf, seqs[(pf, pk)][-1]] - centers[f, seqs[(f, k)][0]]
                    if np.linalg.norm(gap) > limit:
                        continue
                found = search(path + [(f, k)])
                if found:
                    return found
        return None

    tour = search([])
    if tour is None:
        return np.arange(6 * R * R)
    return np.concatenate([f * R * R + seqs[(f, k)] for f, k in tour])
