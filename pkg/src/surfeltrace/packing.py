"""Flat array layouts consumed by the trace kernels."""

from __future__ import annotations

import numpy as np

GEOM_STRIDE = 16
# geom row slots
MU, TU, TV, NRM = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)
SU, SV, OPA = 12, 13, 14
N_BASE_OUT = 9
# forward output columns
COLOR, OPACITY, DEPTH, NORMAL, DIST = slice(0, 3), 3, 4, slice(5, 8), 8


def pack_gaussian(g) -> np.ndarray:
    """Geometry row of one :class:`~surfeltrace.scene.ActivatedGaussian`."""
    row = np.zeros(GEOM_STRIDE)
    row[MU] = g.mu
    row[TU] = g.t_u
    row[TV] = g.t_v
    row[NRM] = g.n
    row[SU], row[SV] = g.s
    row[OPA] = g.o
    return row


def pack_gaussians(gs) -> tuple[np.ndarray, np.ndarray]:
    gs = list(gs)
    geom = np.zeros((len(gs), GEOM_STRIDE))
    sh = np.zeros((len(gs), 27))
    for i, g in enumerate(gs):
        geom[i] = pack_gaussian(g)
        sh[i] = np.asarray(g.sh).reshape(-1)[:27]
    return geom, sh


def as_rays(origins, dirs, t_min=0.0, t_max=np.inf):
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(d / np.linalg.norm(d, axis=1, keepdims=True))
    n = o.shape[0]
    lo = np.ascontiguousarray(np.broadcast_to(np.asarray(t_min, dtype=np.float64), (n,)))
    hi = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    if np.any(lo < 0) or np.any(hi <= lo):
        raise ValueError("ray intervals must satisfy 0 <= t_min < t_max")
    return o, d, lo, hi


def empty_features(n: int) -> np.ndarray:
    return np.zeros((n, 0))
