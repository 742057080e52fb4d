# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled traversal, blending and adjoint kernels.

Array layouts are shared with :mod:`surfeltrace._pycore`; see
:mod:`surfeltrace.packing` for how they are produced.

``geom`` rows hold ``mu(3) t_u(3) t_v(3) n(3) s_u s_v o pad``.  Gradient rows
returned by :func:`trace_backward` use the same first 16 slots followed by
``3*K`` SH slots and ``F`` feature slots.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.math cimport exp, fabs, INFINITY
from libc.stdlib cimport calloc, free, malloc

DEF GEOM_STRIDE = 16
DEF STACK_SIZE = 256
DEF PARALLEL_EPS = 1e-9
DEF MAX_CHUNKS = 16

cdef double SH_C0 = 0.28209479177387814
cdef double SH_C1 = 0.4886025119029199
cdef double SH_C2_0 = 1.0925484305920792
cdef double SH_C2_1 = -1.0925484305920792
cdef double SH_C2_2 = 0.31539156525252005
cdef double SH_C2_3 = -1.0925484305920792
cdef double SH_C2_4 = 0.5462742152960396


cdef struct Ctx:
    # scene
    const double* geom
    const double* sh
    const double* feat
    int n_gauss
    int n_sh
    int n_feat
    # bvh
    const long* prim_gid
    const double* node_bounds
    const long* node_info
    int n_nodes
    # options
    double alpha_min
    double t_cut
    int k
    int want_color
    double near
    double far
    int brute


cdef struct Scratch:
    double* ktau
    double* kalpha
    int* kid
    int* stack
    double* stack_t
    # per-hit replay records (backward)
    int* h_id
    double* h_tau
    double* h_alpha
    double* h_w
    double* h_T
    double* h_m
    double* h_col
    double* h_sign
    double* h_gw
    double* h_gm
    double* out


cdef inline void sh_basis(const double* d, double* Y) noexcept nogil:
    cdef double x = d[0], y = d[1], z = d[2]
    Y[0] = SH_C0
    Y[1] = -SH_C1 * y
    Y[2] = SH_C1 * z
    Y[3] = -SH_C1 * x
    Y[4] = SH_C2_0 * x * y
    Y[5] = SH_C2_1 * y * z
    Y[6] = SH_C2_2 * (2.0 * z * z - x * x - y * y)
    Y[7] = SH_C2_3 * x * z
    Y[8] = SH_C2_4 * (x * x - y * y)


cdef inline double dot3(const double* a, const double* b) noexcept nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


cdef inline int splat_eval(const Ctx* c, int gid, const double* ro, const double* rd,
                           double tmin, double tmax, double* tau_out, double* alpha_out) noexcept nogil:
    """Exact plane hit and opacity of one Gaussian; 0 when rejected."""
    cdef const double* g = c.geom + gid * GEOM_STRIDE
    cdef double denom = dot3(g + 9, rd)
    cdef double tau, dx, dy, dz, u, v, alpha
    if fabs(denom) < PARALLEL_EPS:
        return 0
    tau = ((g[0] - ro[0]) * g[9] + (g[1] - ro[1]) * g[10] + (g[2] - ro[2]) * g[11]) / denom
    if not (tau > tmin and tau < tmax):
        return 0
    dx = ro[0] + tau * rd[0] - g[0]
    dy = ro[1] + tau * rd[1] - g[1]
    dz = ro[2] + tau * rd[2] - g[2]
    u = (dx * g[3] + dy * g[4] + dz * g[5]) / g[12]
    v = (dx * g[6] + dy * g[7] + dz * g[8]) / g[13]
    alpha = g[14] * exp(-0.5 * (u * u + v * v))
    if alpha < c.alpha_min:
        return 0
    tau_out[0] = tau
    alpha_out[0] = alpha
    return 1


cdef inline bint key_greater(double tau_a, int id_a, double tau_b, int id_b) noexcept nogil:
    if tau_a > tau_b:
        return True
    if tau_a < tau_b:
        return False
    return id_a > id_b


cdef inline void kbuf_insert(const Ctx* c, Scratch* s, int* count, double tau, double alpha, int gid) noexcept nogil:
    cdef int n = count[0]
    cdef int pos
    if n == c.k and not key_greater(s.ktau[n - 1], s.kid[n - 1], tau, gid):
        return
    if n < c.k:
        n = n + 1
    pos = n - 1
    while pos > 0 and key_greater(s.ktau[pos - 1], s.kid[pos - 1], tau, gid):
        s.ktau[pos] = s.ktau[pos - 1]
        s.kalpha[pos] = s.kalpha[pos - 1]
        s.kid[pos] = s.kid[pos - 1]
        pos -= 1
    s.ktau[pos] = tau
    s.kalpha[pos] = alpha
    s.kid[pos] = gid
    count[0] = n


cdef inline bint ray_box(const double* b, const double* ro, const double* inv,
                         double* tnear, double* tfar) noexcept nogil:
    cdef double t0 = -INFINITY, t1 = INFINITY, a, bb, tmp
    cdef int ax
    for ax in range(3):
        a = (b[ax] - ro[ax]) * inv[ax]
        bb = (b[ax + 3] - ro[ax]) * inv[ax]
        if a > bb:
            tmp = a
            a = bb
            bb = tmp
        if a > t0:
            t0 = a
        if bb < t1:
            t1 = bb
    tnear[0] = t0
    tfar[0] = t1
    return t0 <= t1


cdef int collect(const Ctx* c, Scratch* s, const double* ro, const double* rd, const double* inv,
                 double tmin, double tmax, double last_tau, int last_id) noexcept nogil:
    """Gather the k smallest (tau, id) keys beyond the last processed key."""
    cdef int count = 0
    cdef int sp = 0, node, left, right, start, cnt, t, gid, gi
    cdef double tnear, tfar, hi, tau, alpha, tl = 0.0, tr = 0.0
    cdef bint hit_l, hit_r
    cdef double lo = tmin if tmin > last_tau else last_tau
    if c.brute:
        for gi in range(c.n_gauss):
            if splat_eval(c, gi, ro, rd, tmin, tmax, &tau, &alpha):
                if key_greater(tau, gi, last_tau, last_id):
                    kbuf_insert(c, s, &count, tau, alpha, gi)
        return count
    if c.n_nodes == 0:
        return 0
    # stack entries carry the entry distance so stale far nodes are skipped
    if not ray_box(c.node_bounds, ro, inv, &tnear, &tfar):
        return 0
    if tfar < lo - 1e-9 * (1.0 + fabs(lo)):
        return 0
    s.stack[0] = 0
    s.stack_t[0] = tnear
    sp = 1
    while sp > 0:
        sp -= 1
        node = s.stack[sp]
        hi = tmax
        if count == c.k and s.ktau[count - 1] < hi:
            hi = s.ktau[count - 1]
        if s.stack_t[sp] > hi + 1e-9 * (1.0 + fabs(hi)):
            continue
        left = <int>c.node_info[node * 4]
        right = <int>c.node_info[node * 4 + 1]
        start = <int>c.node_info[node * 4 + 2]
        cnt = <int>c.node_info[node * 4 + 3]
        if cnt > 0:
            for t in range(start, start + cnt):
                gid = <int>c.prim_gid[t]
                if splat_eval(c, gid, ro, rd, tmin, tmax, &tau, &alpha):
                    if key_greater(tau, gid, last_tau, last_id):
                        kbuf_insert(c, s, &count, tau, alpha, gid)
            continue
        if sp + 2 > STACK_SIZE:
            continue
        hit_l = child_span(c, left, ro, inv, lo, hi, &tl)
        hit_r = child_span(c, right, ro, inv, lo, hi, &tr)
        if hit_l and hit_r:
            if tl <= tr:
                s.stack[sp] = right
                s.stack_t[sp] = tr
                s.stack[sp + 1] = left
                s.stack_t[sp + 1] = tl
            else:
                s.stack[sp] = left
                s.stack_t[sp] = tl
                s.stack[sp + 1] = right
                s.stack_t[sp + 1] = tr
            sp += 2
        elif hit_l:
            s.stack[sp] = left
            s.stack_t[sp] = tl
            sp += 1
        elif hit_r:
            s.stack[sp] = right
            s.stack_t[sp] = tr
            sp += 1
    return count


cdef inline bint child_span(const Ctx* c, int node, const double* ro, const double* inv,
                            double lo, double hi, double* tn) noexcept nogil:
    cdef double tnear, tfar
    if not ray_box(c.node_bounds + node * 6, ro, inv, &tnear, &tfar):
        return False
    if tfar < lo - 1e-9 * (1.0 + fabs(lo)) or tnear > hi + 1e-9 * (1.0 + fabs(hi)):
        return False
    tn[0] = tnear
    return True


cdef inline double depth_map(const Ctx* c, double tau) noexcept nogil:
    if c.near > 0.0:
        return c.far / (c.far - c.near) * (1.0 - c.near / tau)
    return tau


cdef inline double depth_map_grad(const Ctx* c, double tau) noexcept nogil:
    if c.near > 0.0:
        return c.far / (c.far - c.near) * c.near / (tau * tau)
    return 1.0


cdef inline void hit_color(const Ctx* c, int gid, const double* Y, double* col) noexcept nogil:
    cdef const double* g = c.sh + gid * c.n_sh * 3
    cdef int ch, l
    cdef double acc
    for ch in range(3):
        acc = 0.5
        for l in range(c.n_sh):
            acc = acc + g[l * 3 + ch] * Y[l]
        col[ch] = acc if acc > 0.0 else 0.0


cdef int trace_one(const Ctx* c, Scratch* s, const double* ro, const double* rd,
                   double tmin, double tmax, double* out, int n_out,
                   int record, long* rec_id, double* rec_tau, double* rec_w,
                   int store) noexcept nogil:
    """Blend one ray front to back. Returns the number of blended hits.

    ``out`` layout: color(3) opacity depth normal(3) dist feat(F).
    When ``store`` is set, per-hit records are written to the scratch arrays.
    """
    cdef double inv[3]
    cdef double Y[9]
    cdef double col[3]
    cdef double T = 1.0, w, tau, alpha, m, sign, A = 0.0, B = 0.0
    cdef double last_tau = -INFINITY
    cdef int last_id = -1
    cdef int count, j, gid, ax, f, nh = 0
    cdef bint done = False
    cdef const double* g
    for ax in range(3):
        if rd[ax] != 0.0:
            inv[ax] = 1.0 / rd[ax]
        else:
            inv[ax] = INFINITY
    for j in range(n_out):
        out[j] = 0.0
    if c.want_color:
        sh_basis(rd, Y)
    while not done:
        count = collect(c, s, ro, rd, inv, tmin, tmax, last_tau, last_id)
        if count == 0:
            break
        for j in range(count):
            gid = s.kid[j]
            tau = s.ktau[j]
            alpha = s.kalpha[j]
            g = c.geom + gid * GEOM_STRIDE
            w = T * alpha
            if c.want_color:
                hit_color(c, gid, Y, col)
                out[0] += w * col[0]
                out[1] += w * col[1]
                out[2] += w * col[2]
            out[4] += w * tau
            sign = 1.0 if dot3(g + 9, rd) < 0.0 else -1.0
            out[5] += w * sign * g[9]
            out[6] += w * sign * g[10]
            out[7] += w * sign * g[11]
            m = depth_map(c, tau)
            out[8] += 2.0 * w * (m * A - B)
            A += w
            B += w * m
            for f in range(c.n_feat):
                out[9 + f] += w * c.feat[gid * c.n_feat + f]
            if nh < record:
                rec_id[nh] = gid
                rec_tau[nh] = tau
                rec_w[nh] = w
            if store:
                s.h_id[nh] = gid
                s.h_tau[nh] = tau
                s.h_alpha[nh] = alpha
                s.h_w[nh] = w
                s.h_T[nh] = T
                s.h_m[nh] = m
                s.h_sign[nh] = sign
                if c.want_color:
                    s.h_col[nh * 3] = col[0]
                    s.h_col[nh * 3 + 1] = col[1]
                    s.h_col[nh * 3 + 2] = col[2]
            nh += 1
            T = T * (1.0 - alpha)
            last_tau = tau
            last_id = gid
            if T < c.t_cut:
                done = True
                break
        if count < c.k:
            break
    out[3] = 1.0 - T
    return nh


cdef void backward_one(const Ctx* c, Scratch* s, const double* ro, const double* rd,
                       double tmin, double tmax, const double* gout, double* acc,
                       int n_param, int geometry) noexcept nogil:
    """Reverse-mode pass for one ray, accumulating into ``acc`` (N x n_param)."""
    cdef int nh, i, ch, l, f, gid
    cdef double Y[9]
    cdef double Wtot = 0.0, WMtot = 0.0, A = 0.0, B = 0.0
    cdef double gW, gm, gtau, galpha, gG, gu, gv, S, absum, sgnsum, wb
    cdef double dx, dy, dz, u, v, G, denom, gdx, gdy, gdz, gtt
    cdef double* gacc
    cdef const double* g
    nh = trace_one(c, s, ro, rd, tmin, tmax, s.out, 9 + c.n_feat, 0, NULL, NULL, NULL, 1)
    if nh == 0:
        return
    if c.want_color:
        sh_basis(rd, Y)
    for i in range(nh):
        Wtot += s.h_w[i]
        WMtot += s.h_w[i] * s.h_m[i]
    # front to back: gradient w.r.t. each blend weight (distortion needs prefix sums)
    for i in range(nh):
        gid = s.h_id[i]
        g = c.geom + gid * GEOM_STRIDE
        wb = s.h_w[i]
        gW = gout[3] + gout[4] * s.h_tau[i]
        if c.want_color:
            gW += gout[0] * s.h_col[i * 3] + gout[1] * s.h_col[i * 3 + 1] + gout[2] * s.h_col[i * 3 + 2]
        gW += s.h_sign[i] * (gout[5] * g[9] + gout[6] * g[10] + gout[7] * g[11])
        for f in range(c.n_feat):
            gW += gout[9 + f] * c.feat[gid * c.n_feat + f]
        absum = s.h_m[i] * (A - (Wtot - A - wb)) - (B - (WMtot - B - wb * s.h_m[i]))
        sgnsum = A - (Wtot - A - wb)
        s.h_gw[i] = gW + gout[8] * 2.0 * absum
        s.h_gm[i] = gout[8] * 2.0 * wb * sgnsum
        A += wb
        B += wb * s.h_m[i]
    # back to front: alpha gradients without dividing by (1 - alpha)
    S = 0.0
    i = nh - 1
    while i >= 0:
        gid = s.h_id[i]
        g = c.geom + gid * GEOM_STRIDE
        gacc = acc + gid * n_param
        gW = s.h_gw[i]
        gm = s.h_gm[i]
        wb = s.h_w[i]
        galpha = s.h_T[i] * (gW - S)
        S = gW * s.h_alpha[i] + (1.0 - s.h_alpha[i]) * S
        denom = dot3(g + 9, rd)
        dx = ro[0] + s.h_tau[i] * rd[0] - g[0]
        dy = ro[1] + s.h_tau[i] * rd[1] - g[1]
        dz = ro[2] + s.h_tau[i] * rd[2] - g[2]
        u = (dx * g[3] + dy * g[4] + dz * g[5]) / g[12]
        v = (dx * g[6] + dy * g[7] + dz * g[8]) / g[13]
        G = exp(-0.5 * (u * u + v * v))
        gacc[14] += galpha * G
        if c.want_color:
            for ch in range(3):
                if s.h_col[i * 3 + ch] > 0.0:
                    for l in range(c.n_sh):
                        gacc[16 + l * 3 + ch] += gout[ch] * wb * Y[l]
        for f in range(c.n_feat):
            gacc[16 + 3 * c.n_sh + f] += gout[9 + f] * wb
        if geometry:
            gG = galpha * g[14]
            gu = -gG * u * G
            gv = -gG * v * G
            gdx = gu * g[3] / g[12] + gv * g[6] / g[13]
            gdy = gu * g[4] / g[12] + gv * g[7] / g[13]
            gdz = gu * g[5] / g[12] + gv * g[8] / g[13]
            gacc[12] += -gu * u / g[12]
            gacc[13] += -gv * v / g[13]
            gacc[3] += gu * dx / g[12]
            gacc[4] += gu * dy / g[12]
            gacc[5] += gu * dz / g[12]
            gacc[6] += gv * dx / g[13]
            gacc[7] += gv * dy / g[13]
            gacc[8] += gv * dz / g[13]
            gtau = gout[4] * wb + gm * depth_map_grad(c, s.h_tau[i])
            gtt = gtau + gdx * rd[0] + gdy * rd[1] + gdz * rd[2]
            gacc[0] += -gdx + gtt * g[9] / denom
            gacc[1] += -gdy + gtt * g[10] / denom
            gacc[2] += -gdz + gtt * g[11] / denom
            gacc[9] += -gtt * dx / denom + s.h_sign[i] * gout[5] * wb
            gacc[10] += -gtt * dy / denom + s.h_sign[i] * gout[6] * wb
            gacc[11] += -gtt * dz / denom + s.h_sign[i] * gout[7] * wb
        i -= 1


cdef Scratch* new_scratch(int n_gauss, int k, int n_out, int with_records) noexcept nogil:
    cdef Scratch* s = <Scratch*>calloc(1, sizeof(Scratch))
    cdef int n = n_gauss + 1
    s.ktau = <double*>malloc((k + 1) * sizeof(double))
    s.kalpha = <double*>malloc((k + 1) * sizeof(double))
    s.kid = <int*>malloc((k + 1) * sizeof(int))
    s.stack = <int*>malloc(STACK_SIZE * sizeof(int))
    s.stack_t = <double*>malloc(STACK_SIZE * sizeof(double))
    s.out = <double*>malloc(n_out * sizeof(double))
    if with_records:
        s.h_id = <int*>malloc(n * sizeof(int))
        s.h_tau = <double*>malloc(n * sizeof(double))
        s.h_alpha = <double*>malloc(n * sizeof(double))
        s.h_w = <double*>malloc(n * sizeof(double))
        s.h_T = <double*>malloc(n * sizeof(double))
        s.h_m = <double*>malloc(n * sizeof(double))
        s.h_col = <double*>malloc(3 * n * sizeof(double))
        s.h_sign = <double*>malloc(n * sizeof(double))
        s.h_gw = <double*>malloc(n * sizeof(double))
        s.h_gm = <double*>malloc(n * sizeof(double))
    return s


cdef void free_scratch(Scratch* s) noexcept nogil:
    free(s.ktau)
    free(s.kalpha)
    free(s.kid)
    free(s.stack)
    free(s.stack_t)
    free(s.out)
    free(s.h_id)
    free(s.h_tau)
    free(s.h_alpha)
    free(s.h_w)
    free(s.h_T)
    free(s.h_m)
    free(s.h_col)
    free(s.h_sign)
    free(s.h_gw)
    free(s.h_gm)
    free(s)


cdef void fill_ctx(Ctx* c, const double[:, ::1] geom, const double[:, ::1] sh, const double[:, ::1] feat,
                   const long[::1] prim_gid,
                   const double[:, ::1] node_bounds, const long[:, ::1] node_info,
                   double alpha_min, double t_cut, int k, bint want_color,
                   double near, double far, bint brute):
    c.n_gauss = geom.shape[0]
    c.geom = &geom[0, 0] if geom.shape[0] > 0 else NULL
    c.n_sh = sh.shape[1] // 3
    c.sh = &sh[0, 0] if sh.shape[0] > 0 and sh.shape[1] > 0 else NULL
    c.n_feat = feat.shape[1]
    c.feat = &feat[0, 0] if feat.shape[0] > 0 and feat.shape[1] > 0 else NULL
    c.prim_gid = &prim_gid[0] if prim_gid.shape[0] > 0 else NULL
    c.n_nodes = node_bounds.shape[0]
    c.node_bounds = &node_bounds[0, 0] if node_bounds.shape[0] > 0 else NULL
    c.node_info = &node_info[0, 0] if node_info.shape[0] > 0 else NULL
    c.alpha_min = alpha_min
    c.t_cut = t_cut
    c.k = k
    c.want_color = 1 if (want_color and c.n_sh > 0) else 0
    c.near = near
    c.far = far
    c.brute = 1 if brute else 0


def trace_forward(const double[:, ::1] geom, const double[:, ::1] sh, const double[:, ::1] feat,
                  const long[::1] prim_gid,
                  const double[:, ::1] node_bounds, const long[:, ::1] node_info,
                  const double[:, ::1] ray_o, const double[:, ::1] ray_d,
                  const double[::1] tmin, const double[::1] tmax,
                  double alpha_min=0.01, double t_cut=0.03, int k=16,
                  bint want_color=True, double near=0.0, double far=1.0,
                  int record=0, bint brute=False, int threads=1):
    """Trace a batch of rays; returns ``(out, nhits, rec_id, rec_tau, rec_w)``.

    ``out`` has columns color(3) opacity depth normal(3) dist feat(F), with
    depth/normal/feat being unnormalized weighted sums.
    """
    cdef Ctx c
    fill_ctx(&c, geom, sh, feat, prim_gid, node_bounds, node_info,
             alpha_min, t_cut, k, want_color, near, far, brute)
    cdef Py_ssize_t n_rays = ray_o.shape[0]
    cdef int n_out = 9 + c.n_feat
    out_np = np.zeros((n_rays, n_out), dtype=np.float64)
    nh_np = np.zeros(n_rays, dtype=np.int64)
    rid_np = np.full((n_rays, max(record, 1)), -1, dtype=np.int64)
    rtau_np = np.zeros((n_rays, max(record, 1)), dtype=np.float64)
    rw_np = np.zeros((n_rays, max(record, 1)), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef long[::1] nh = nh_np
    cdef long[:, ::1] rid = rid_np
    cdef double[:, ::1] rtau = rtau_np
    cdef double[:, ::1] rw = rw_np
    cdef Scratch* s
    cdef Py_ssize_t r
    if n_rays == 0 or c.n_gauss == 0:
        return out_np, nh_np, rid_np[:, :record], rtau_np[:, :record], rw_np[:, :record]
    with nogil, parallel(num_threads=threads):
        s = new_scratch(c.n_gauss, c.k, n_out, 0)
        for r in prange(n_rays, schedule='dynamic', chunksize=64):
            nh[r] = trace_one(&c, s, &ray_o[r, 0], &ray_d[r, 0], tmin[r], tmax[r],
                              &out[r, 0], n_out, record,
                              &rid[r, 0], &rtau[r, 0], &rw[r, 0], 0)
        free_scratch(s)
    return out_np, nh_np, rid_np[:, :record], rtau_np[:, :record], rw_np[:, :record]


def chunk_layout(Py_ssize_t n_rays):
    """Fixed ray-chunk size used for gradient accumulation (worker independent)."""
    cdef Py_ssize_t size = max(64, (n_rays + MAX_CHUNKS - 1) // MAX_CHUNKS)
    return size, (n_rays + size - 1) // size


def trace_backward(const double[:, ::1] geom, const double[:, ::1] sh, const double[:, ::1] feat,
                   const long[::1] prim_gid,
                   const double[:, ::1] node_bounds, const long[:, ::1] node_info,
                   const double[:, ::1] ray_o, const double[:, ::1] ray_d,
                   const double[::1] tmin, const double[::1] tmax,
                   const double[:, ::1] grad_out,
                   double alpha_min=0.01, double t_cut=0.03, int k=16,
                   bint want_color=True, double near=0.0, double far=1.0,
                   bint geometry=True, bint brute=False, int threads=1):
    """Adjoint of :func:`trace_forward`; returns per-Gaussian gradient rows."""
    cdef Ctx c
    fill_ctx(&c, geom, sh, feat, prim_gid, node_bounds, node_info,
             alpha_min, t_cut, k, want_color, near, far, brute)
    cdef Py_ssize_t n_rays = ray_o.shape[0]
    cdef int n_param = 16 + 3 * c.n_sh + c.n_feat
    size, n_chunks = chunk_layout(n_rays)
    cdef Py_ssize_t chunk_size = size
    cdef Py_ssize_t nch = n_chunks
    if n_rays == 0 or c.n_gauss == 0:
        return np.zeros((c.n_gauss, n_param), dtype=np.float64)
    acc_np = np.zeros((nch, c.n_gauss * n_param), dtype=np.float64)
    cdef double[:, ::1] acc = acc_np
    cdef Scratch* s
    cdef Py_ssize_t ci, r, r0, r1
    with nogil, parallel(num_threads=threads):
        s = new_scratch(c.n_gauss, c.k, 9 + c.n_feat, 1)
        for ci in prange(nch, schedule='dynamic', chunksize=1):
            r0 = ci * chunk_size
            r1 = r0 + chunk_size
            if r1 > n_rays:
                r1 = n_rays
            for r in range(r0, r1):
                backward_one(&c, s, &ray_o[r, 0], &ray_d[r, 0], tmin[r], tmax[r],
                             &grad_out[r, 0], &acc[ci, 0], n_param, geometry)
        free_scratch(s)
    total = acc_np[0].copy()
    for ci in range(1, nch):
        total += acc_np[ci]
    return total.reshape(c.n_gauss, n_param)
