"""Pure-Python implementation of the trace kernels.

Mirrors :mod:`surfeltrace._core` call for call. It is orders of magnitude
slower and is meant for small scenes and for machines without a compiler.
"""

from __future__ import annotations

import bisect
import math

import numpy as np

PARALLEL_EPS = 1e-9
MAX_CHUNKS = 16

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)


def _sh_basis(d):
    x, y, z = d
    return (
        _C0, -_C1 * y, _C1 * z, -_C1 * x,
        _C2[0] * x * y, _C2[1] * y * z, _C2[2] * (2 * z * z - x * x - y * y),
        _C2[3] * x * z, _C2[4] * (x * x - y * y),
    )


class HitBuffer:
    """Keeps the ``k`` smallest ``(tau, id)`` keys seen so far, sorted."""

    __slots__ = ("k", "keys", "alphas")

    def __init__(self, k: int):
        self.k = k
        self.keys: list[tuple[float, int]] = []
        self.alphas: dict[int, float] = {}

    def full(self) -> bool:
        return len(self.keys) == self.k

    def bound(self, hi: float) -> float:
        if self.full() and self.keys[-1][0] < hi:
            return self.keys[-1][0]
        return hi

    def offer(self, tau: float, gid: int, alpha: float) -> None:
        key = (tau, gid)
        if self.full():
            if not key < self.keys[-1]:
                return
            del self.alphas[self.keys.pop()[1]]
        bisect.insort(self.keys, key)
        self.alphas[gid] = alpha

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        for tau, gid in self.keys:
            yield gid, tau, self.alphas[gid]


class _Ctx:
    def __init__(self, geom, sh, feat, prim_gid, node_bounds, node_info,
                 alpha_min, t_cut, k, want_color, near, far, brute):
        self.geom = np.asarray(geom, dtype=np.float64).tolist()
        self.n_gauss = len(self.geom)
        sh = np.asarray(sh, dtype=np.float64)
        self.n_sh = sh.shape[1] // 3 if sh.ndim == 2 else 0
        self.sh = sh.tolist()
        feat = np.asarray(feat, dtype=np.float64)
        self.n_feat = feat.shape[1] if feat.ndim == 2 else 0
        self.feat = feat.tolist()
        self.prim_gid = [int(x) for x in prim_gid]
        self.node_bounds = np.asarray(node_bounds, dtype=np.float64).tolist()
        self.node_info = np.asarray(node_info, dtype=np.int64).tolist()
        self.alpha_min = alpha_min
        self.t_cut = t_cut
        self.k = k
        self.want_color = bool(want_color) and self.n_sh > 0
        self.near = near
        self.far = far
        self.brute = brute

    def splat(self, gid, ro, rd, tmin, tmax):
        g = self.geom[gid]
        denom = g[9] * rd[0] + g[10] * rd[1] + g[11] * rd[2]
        if abs(denom) < PARALLEL_EPS:
            return None
        tau = ((g[0] - ro[0]) * g[9] + (g[1] - ro[1]) * g[10] + (g[2] - ro[2]) * g[11]) / denom
        if not (tmin < tau < tmax):
            return None
        dx = ro[0] + tau * rd[0] - g[0]
        dy = ro[1] + tau * rd[1] - g[1]
        dz = ro[2] + tau * rd[2] - g[2]
        u = (dx * g[3] + dy * g[4] + dz * g[5]) / g[12]
        v = (dx * g[6] + dy * g[7] + dz * g[8]) / g[13]
        alpha = g[14] * math.exp(-0.5 * (u * u + v * v))
        if alpha < self.alpha_min:
            return None
        return tau, alpha

    def depth_map(self, tau):
        if self.near > 0.0:
            return self.far / (self.far - self.near) * (1.0 - self.near / tau)
        return tau

    def depth_map_grad(self, tau):
        if self.near > 0.0:
            return self.far / (self.far - self.near) * self.near / (tau * tau)
        return 1.0

    def color(self, gid, Y):
        c = self.sh[gid]
        out = []
        for ch in range(3):
            acc = 0.5
            for l in range(self.n_sh):
                acc += c[l * 3 + ch] * Y[l]
            out.append(acc if acc > 0.0 else 0.0)
        return out


def _ray_box(b, ro, inv):
    t0, t1 = -math.inf, math.inf
    for ax in range(3):
        if inv[ax] == math.inf:
            # direction component is zero: slab test reduces to containment
            if ro[ax] < b[ax] or ro[ax] > b[ax + 3]:
                return None
            continue
        a = (b[ax] - ro[ax]) * inv[ax]
        bb = (b[ax + 3] - ro[ax]) * inv[ax]
        if a > bb:
            a, bb = bb, a
        t0 = max(t0, a)
        t1 = min(t1, bb)
    return (t0, t1) if t0 <= t1 else None


def _collect(c: _Ctx, ro, rd, inv, tmin, tmax, last):
    buf = HitBuffer(c.k)
    if c.brute:
        for gid in range(c.n_gauss):
            hit = c.splat(gid, ro, rd, tmin, tmax)
            if hit is not None and (hit[0], gid) > last:
                buf.offer(hit[0], gid, hit[1])
        return list(buf)
    if not c.node_info:
        return []
    lo = max(tmin, last[0])
    stack = [0]
    while stack:
        node = stack.pop()
        span = _ray_box(c.node_bounds[node], ro, inv)
        if span is None:
            continue
        hi = buf.bound(tmax)
        if span[1] < lo - 1e-9 * (1.0 + abs(lo)) or span[0] > hi + 1e-9 * (1.0 + abs(hi)):
            continue
        left, right, start, count = c.node_info[node]
        if count == 0:
            stack += [right, left]
            continue
        for t in range(start, start + count):
            gid = c.prim_gid[t]
            hit = c.splat(gid, ro, rd, tmin, tmax)
            if hit is not None and (hit[0], gid) > last:
                buf.offer(hit[0], gid, hit[1])
    return list(buf)


def _trace_one(c: _Ctx, ro, rd, tmin, tmax):
    """Returns ``(out, hits)``; each hit is ``(gid, tau, alpha, w, T, m, sign, col)``."""
    inv = [1.0 / x if x != 0.0 else math.inf for x in rd]
    out = [0.0] * (9 + c.n_feat)
    Y = _sh_basis(rd) if c.want_color else None
    T, A, B = 1.0, 0.0, 0.0
    last = (-math.inf, -1)
    hits = []
    done = False
    while not done:
        batch = _collect(c, ro, rd, inv, tmin, tmax, last)
        if not batch:
            break
        for gid, tau, alpha in batch:
            g = c.geom[gid]
            w = T * alpha
            col = None
            if c.want_color:
                col = c.color(gid, Y)
                for ch in range(3):
                    out[ch] += w * col[ch]
            out[4] += w * tau
            sign = 1.0 if g[9] * rd[0] + g[10] * rd[1] + g[11] * rd[2] < 0.0 else -1.0
            for a in range(3):
                out[5 + a] += w * sign * g[9 + a]
            m = c.depth_map(tau)
            out[8] += 2.0 * w * (m * A - B)
            A += w
            B += w * m
            for f in range(c.n_feat):
                out[9 + f] += w * c.feat[gid][f]
            hits.append((gid, tau, alpha, w, T, m, sign, col))
            T *= 1.0 - alpha
            last = (tau, gid)
            if T < c.t_cut:
                done = True
                break
        if len(batch) < c.k:
            break
    out[3] = 1.0 - T
    return out, hits


def trace_forward(geom, sh, feat, prim_gid, node_bounds, node_info,
                  ray_o, ray_d, tmin, tmax, alpha_min=0.01, t_cut=0.03, k=16,
                  want_color=True, near=0.0, far=1.0, record=0, brute=False, threads=1):
    c = _Ctx(geom, sh, feat, prim_gid, node_bounds, node_info,
             alpha_min, t_cut, k, want_color, near, far, brute)
    n = len(ray_o)
    out = np.zeros((n, 9 + c.n_feat))
    nh = np.zeros(n, dtype=np.int64)
    rid = np.full((n, record), -1, dtype=np.int64)
    rtau = np.zeros((n, record))
    rw = np.zeros((n, record))
    if c.n_gauss == 0:
        return out, nh, rid, rtau, rw
    ro_all = np.asarray(ray_o, dtype=np.float64).tolist()
    rd_all = np.asarray(ray_d, dtype=np.float64).tolist()
    for r in range(n):
        row, hits = _trace_one(c, ro_all[r], rd_all[r], float(tmin[r]), float(tmax[r]))
        out[r] = row
        nh[r] = len(hits)
        for i, h in enumerate(hits[:record]):
            rid[r, i], rtau[r, i], rw[r, i] = h[0], h[1], h[3]
    return out, nh, rid, rtau, rw


def chunk_layout(n_rays: int):
    size = max(64, -(-n_rays // MAX_CHUNKS))
    return size, -(-n_rays // size)


def _backward_one(c: _Ctx, ro, rd, tmin, tmax, gout, acc, geometry):
    _, hits = _trace_one(c, ro, rd, tmin, tmax)
    if not hits:
        return
    Y = _sh_basis(rd) if c.want_color else None
    n_sh3 = 3 * c.n_sh
    Wtot = sum(h[3] for h in hits)
    WMtot = sum(h[3] * h[5] for h in hits)
    A = B = 0.0
    gws, gms = [], []
    for gid, tau, alpha, w, T, m, sign, col in hits:
        g = c.geom[gid]
        gW = gout[3] + gout[4] * tau
        if c.want_color:
            gW += gout[0] * col[0] + gout[1] * col[1] + gout[2] * col[2]
        gW += sign * (gout[5] * g[9] + gout[6] * g[10] + gout[7] * g[11])
        for f in range(c.n_feat):
            gW += gout[9 + f] * c.feat[gid][f]
        after_w = Wtot - A - w
        after_b = WMtot - B - w * m
        gws.append(gW + 2.0 * gout[8] * (m * (A - after_w) - (B - after_b)))
        gms.append(2.0 * gout[8] * w * (A - after_w))
        A += w
        B += w * m
    S = 0.0
    for i in range(len(hits) - 1, -1, -1):
        gid, tau, alpha, w, T, m, sign, col = hits[i]
        g = c.geom[gid]
        ga = acc[gid]
        gW, gm = gws[i], gms[i]
        galpha = T * (gW - S)
        S = gW * alpha + (1.0 - alpha) * S
        denom = g[9] * rd[0] + g[10] * rd[1] + g[11] * rd[2]
        d = [ro[a] + tau * rd[a] - g[a] for a in range(3)]
        u = (d[0] * g[3] + d[1] * g[4] + d[2] * g[5]) / g[12]
        v = (d[0] * g[6] + d[1] * g[7] + d[2] * g[8]) / g[13]
        G = math.exp(-0.5 * (u * u + v * v))
        ga[14] += galpha * G
        if c.want_color:
            for ch in range(3):
                if col[ch] > 0.0:
                    for l in range(c.n_sh):
                        ga[16 + l * 3 + ch] += gout[ch] * w * Y[l]
        for f in range(c.n_feat):
            ga[16 + n_sh3 + f] += gout[9 + f] * w
        if not geometry:
            continue
        gG = galpha * g[14]
        gu = -gG * u * G
        gv = -gG * v * G
        gd = [gu * g[3 + a] / g[12] + gv * g[6 + a] / g[13] for a in range(3)]
        ga[12] += -gu * u / g[12]
        ga[13] += -gv * v / g[13]
        gtt = gout[4] * w + gm * c.depth_map_grad(tau)
        gtt += gd[0] * rd[0] + gd[1] * rd[1] + gd[2] * rd[2]
        for a in range(3):
            ga[3 + a] += gu * d[a] / g[12]
            ga[6 + a] += gv * d[a] / g[13]
            ga[a] += -gd[a] + gtt * g[9 + a] / denom
            ga[9 + a] += -gtt * d[a] / denom + sign * gout[5 + a] * w


def trace_backward(geom, sh, feat, prim_gid, node_bounds, node_info,
                   ray_o, ray_d, tmin, tmax, grad_out, alpha_min=0.01, t_cut=0.03,
                   k=16, want_color=True, near=0.0, far=1.0, geometry=True,
                   brute=False, threads=1):
    c = _Ctx(geom, sh, feat, prim_gid, node_bounds, node_info,
             alpha_min, t_cut, k, want_color, near, far, brute)
    n_param = 16 + 3 * c.n_sh + c.n_feat
    n = len(ray_o)
    if n == 0 or c.n_gauss == 0:
        return np.zeros((c.n_gauss, n_param))
    ro_all = np.asarray(ray_o, dtype=np.float64).tolist()
    rd_all = np.asarray(ray_d, dtype=np.float64).tolist()
    gout_all = np.asarray(grad_out, dtype=np.float64).tolist()
    size, n_chunks = chunk_layout(n)
    total = np.zeros((c.n_gauss, n_param))
    for ci in range(n_chunks):
        acc = [[0.0] * n_param for _ in range(c.n_gauss)]
        for r in range(ci * size, min(n, (ci + 1) * size)):
            _backward_one(c, ro_all[r], rd_all[r], float(tmin[r]), float(tmax[r]),
                          gout_all[r], acc, geometry)
        total += np.asarray(acc)
    return total
