# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: simplex noise, BVH closest-triangle queries, marching cubes.

Each function has a numpy twin in ``_fallback.py`` with the same signature and
the same floating-point operation order, so both backends agree to the last
bit on simplex noise and to rounding on the rest.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt

cnp.import_array()

cdef double F3 = 1.0 / 3.0
cdef double G3 = 1.0 / 6.0

cdef int GRAD3[12][3]
GRAD3[:] = [
    [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
    [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
    [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
]


cdef inline double _corner(double x, double y, double z, int g) nogil:
    cdef double t = 0.6 - x * x - y * y - z * z
    cdef double t2
    if t < 0.0:
        return 0.0
    t2 = t * t
    return t2 * t2 * (GRAD3[g][0] * x + GRAD3[g][1] * y + GRAD3[g][2] * z)


def simplex3(const double[:, ::1] pts, const cnp.int64_t[::1] perm):
    """3-D simplex noise at each row of ``pts``; ``perm`` has 512 entries."""
    cdef Py_ssize_t m = pts.shape[0], n
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double x, y, z, s, t, x0, y0, z0, x1, y1, z1, x2, y2, z2, x3, y3, z3, v
    cdef long i, j, k, ii, jj, kk
    cdef int i1, j1, k1, i2, j2, k2, g0, g1, g2, g3
    with nogil:
        for n in range(m):
            x = pts[n, 0]
            y = pts[n, 1]
            z = pts[n, 2]
            s = (x + y + z) * F3
            i = <long>floor(x + s)
            j = <long>floor(y + s)
            k = <long>floor(z + s)
            t = (i + j + k) * G3
            x0 = x - (i - t)
            y0 = y - (j - t)
            z0 = z - (k - t)
            if x0 >= y0:
                if y0 >= z0:
                    i1 = 1; j1 = 0; k1 = 0; i2 = 1; j2 = 1; k2 = 0
                elif x0 >= z0:
                    i1 = 1; j1 = 0; k1 = 0; i2 = 1; j2 = 0; k2 = 1
                else:
                    i1 = 0; j1 = 0; k1 = 1; i2 = 1; j2 = 0; k2 = 1
            else:
                if y0 < z0:
                    i1 = 0; j1 = 0; k1 = 1; i2 = 0; j2 = 1; k2 = 1
                elif x0 < z0:
                    i1 = 0; j1 = 1; k1 = 0; i2 = 0; j2 = 1; k2 = 1
                else:
                    i1 = 0; j1 = 1; k1 = 0; i2 = 1; j2 = 1; k2 = 0
            x1 = x0 - i1 + G3
            y1 = y0 - j1 + G3
            z1 = z0 - k1 + G3
            x2 = x0 - i2 + 2.0 * G3
            y2 = y0 - j2 + 2.0 * G3
            z2 = z0 - k2 + 2.0 * G3
            x3 = x0 - 1.0 + 3.0 * G3
            y3 = y0 - 1.0 + 3.0 * G3
            z3 = z0 - 1.0 + 3.0 * G3
            ii = i & 255
            jj = j & 255
            kk = k & 255
            g0 = perm[ii + perm[jj + perm[kk]]] % 12
            g1 = perm[ii + i1 + perm[jj + j1 + perm[kk + k1]]] % 12
            g2 = perm[ii + i2 + perm[jj + j2 + perm[kk + k2]]] % 12
            g3 = perm[ii + 1 + perm[jj + 1 + perm[kk + 1]]] % 12
            v = 32.0 * (((_corner(x0, y0, z0, g0) + _corner(x1, y1, z1, g1))
                         + _corner(x2, y2, z2, g2)) + _corner(x3, y3, z3, g3))
            if v > 1.0:
                v = 1.0
            elif v < -1.0:
                v = -1.0
            out[n] = v
    return out_arr


cdef inline double _dot(double ax, double ay, double az, double bx, double by, double bz) nogil:
    return ax * bx + ay * by + az * bz


cdef inline int _closest_on_triangle(
    double px, double py, double pz,
    double ax, double ay, double az,
    double bx, double by, double bz,
    double cx, double cy, double cz,
    double* q,
) nogil:
    """Closest point on triangle abc; writes ``q`` and returns the feature code.

    0 face, 1 edge ab, 2 edge bc, 3 edge ca, 4 vertex a, 5 vertex b, 6 vertex c.
    """
    cdef double abx = bx - ax, aby = by - ay, abz = bz - az
    cdef double acx = cx - ax, acy = cy - ay, acz = cz - az
    cdef double apx = px - ax, apy = py - ay, apz = pz - az
    cdef double d1 = _dot(abx, aby, abz, apx, apy, apz)
    cdef double d2 = _dot(acx, acy, acz, apx, apy, apz)
    cdef double bpx, bpy, bpz, cpx, cpy, cpz, d3, d4, d5, d6, va, vb, vc, v, w, denom
    if d1 <= 0.0 and d2 <= 0.0:
        q[0] = ax; q[1] = ay; q[2] = az
        return 4
    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        q[0] = bx; q[1] = by; q[2] = bz
        return 5
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        q[0] = ax + v * abx; q[1] = ay + v * aby; q[2] = az + v * abz
        return 1
    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        q[0] = cx; q[1] = cy; q[2] = cz
        return 6
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        q[0] = ax + w * acx; q[1] = ay + w * acy; q[2] = az + w * acz
        return 3
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q[0] = bx + w * (cx - bx); q[1] = by + w * (cy - by); q[2] = bz + w * (cz - bz)
        return 2
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    q[0] = ax + abx * v + acx * w
    q[1] = ay + aby * v + acy * w
    q[2] = az + abz * v + acz * w
    return 0


cdef inline double _box_dist2(double px, double py, double pz,
                              const double[:, ::1] lo, const double[:, ::1] hi, Py_ssize_t n) nogil:
    cdef double d = 0.0, e
    e = lo[n, 0] - px
    if e > 0.0:
        d += e * e
    else:
        e = px - hi[n, 0]
        if e > 0.0:
            d += e * e
    e = lo[n, 1] - py
    if e > 0.0:
        d += e * e
    else:
        e = py - hi[n, 1]
        if e > 0.0:
            d += e * e
    e = lo[n, 2] - pz
    if e > 0.0:
        d += e * e
    else:
        e = pz - hi[n, 2]
        if e > 0.0:
            d += e * e
    return d


def closest_points(
    const double[:, ::1] pts,
    const double[:, :, ::1] tris,
    const double[:, ::1] node_lo,
    const double[:, ::1] node_hi,
    const cnp.int64_t[::1] node_left,
    const cnp.int64_t[::1] node_right,
    const cnp.int64_t[::1] node_start,
    const cnp.int64_t[::1] node_count,
    const cnp.int64_t[::1] order,
):
    """Nearest triangle for every query point by BVH traversal.

    ``tris`` is (F, 3, 3); leaves cover ``order[start:start+count]``.
    Returns (squared distance, closest point, face index, feature code).
    """
    cdef Py_ssize_t m = pts.shape[0]
    dist_arr = np.empty(m, dtype=np.float64)
    cp_arr = np.empty((m, 3), dtype=np.float64)
    face_arr = np.empty(m, dtype=np.int64)
    feat_arr = np.empty(m, dtype=np.int8)
    cdef double[::1] dist = dist_arr
    cdef double[:, ::1] cp = cp_arr
    cdef cnp.int64_t[::1] face = face_arr
    cdef cnp.int8_t[::1] feat = feat_arr
    cdef Py_ssize_t stack[128]
    cdef Py_ssize_t top, node, a, b, r, f, n
    cdef double px, py, pz, best, d, da, db, dx, dy, dz
    cdef double q[3]
    cdef int code, best_code
    cdef Py_ssize_t best_face
    cdef double bq0, bq1, bq2
    with nogil:
        for n in range(m):
            px = pts[n, 0]
            py = pts[n, 1]
            pz = pts[n, 2]
            best = 1e300
            best_face = -1
            best_code = 0
            bq0 = 0.0; bq1 = 0.0; bq2 = 0.0
            top = 0
            stack[top] = 0
            top = 1
            while top > 0:
                top -= 1
                node = stack[top]
                if _box_dist2(px, py, pz, node_lo, node_hi, node) >= best:
                    continue
                if node_left[node] < 0:
                    for r in range(node_start[node], node_start[node] + node_count[node]):
                        f = order[r]
                        code = _closest_on_triangle(
                            px, py, pz,
                            tris[f, 0, 0], tris[f, 0, 1], tris[f, 0, 2],
                            tris[f, 1, 0], tris[f, 1, 1], tris[f, 1, 2],
                            tris[f, 2, 0], tris[f, 2, 1], tris[f, 2, 2],
                            q,
                        )
                        dx = px - q[0]
                        dy = py - q[1]
                        dz = pz - q[2]
                        d = dx * dx + dy * dy + dz * dz
                        if d < best or (d == best and f < best_face):
                            best = d
                            best_face = f
                            best_code = code
                            bq0 = q[0]; bq1 = q[1]; bq2 = q[2]
                else:
                    a = node_left[node]
                    b = node_right[node]
                    da = _box_dist2(px, py, pz, node_lo, node_hi, a)
                    db = _box_dist2(px, py, pz, node_lo, node_hi, b)
                    # push the farther child first so the nearer one is popped next
                    if da <= db:
                        if db < best:
                            stack[top] = b
                            top += 1
                        if da < best:
                            stack[top] = a
                            top += 1
                    else:
                        if da < best:
                            stack[top] = a
                            top += 1
                        if db < best:
                            stack[top] = b
                            top += 1
            dist[n] = best
            face[n] = best_face
            feat[n] = best_code
            cp[n, 0] = bq0
            cp[n, 1] = bq1
            cp[n, 2] = bq2
    return dist_arr, cp_arr, face_arr, feat_arr


# (corner offset, axis) for each of the 12 cube edges
cdef int EDGE_ORIGIN[12][3]
cdef int EDGE_AXIS[12]
EDGE_ORIGIN[:] = [
    [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
    [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
]
EDGE_AXIS[:] = [0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2]
cdef int CORNER[8][3]
CORNER[:] = [
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
]


def marching_cubes(const double[:, :, ::1] vol, double iso, const cnp.int64_t[:, ::1] table):
    """Table-driven isosurface; returns (vertices in index space, faces).

    Vertices are ordered by global edge id ``((i*ny + j)*nz + k)*3 + axis`` so
    the output is canonical and matches the numpy implementation.
    """
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t i, j, k, a, e, c, tri, n_tris = 0, n_verts = 0, eid, ci, cj, ck
    cdef Py_ssize_t n_edges = nx * ny * nz * 3
    cdef int case, b
    cdef double v0, v1, t
    emap_arr = np.full(n_edges, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] emap = emap_arr

    with nogil:
        # pass 1: crossing edges get vertex ids in ascending edge-id order
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    v0 = vol[i, j, k]
                    for a in range(3):
                        ci = i + (a == 0)
                        cj = j + (a == 1)
                        ck = k + (a == 2)
                        if ci >= nx or cj >= ny or ck >= nz:
                            continue
                        v1 = vol[ci, cj, ck]
                        if (v0 < iso) != (v1 < iso):
                            emap[((i * ny + j) * nz + k) * 3 + a] = n_verts
                            n_verts += 1
        # pass 2: count triangles
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = 0
                    for c in range(8):
                        if vol[i + CORNER[c][0], j + CORNER[c][1], k + CORNER[c][2]] < iso:
                            case |= 1 << c
                    tri = 0
                    while tri < 16 and table[case, tri] >= 0:
                        tri += 3
                    n_tris += tri // 3

    verts_arr = np.empty((n_verts, 3), dtype=np.float64)
    faces_arr = np.empty((n_tris, 3), dtype=np.int64)
    cdef double[:, ::1] verts = verts_arr
    cdef cnp.int64_t[:, ::1] faces = faces_arr
    cdef Py_ssize_t f = 0

    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    for a in range(3):
                        eid = ((i * ny + j) * nz + k) * 3 + a
                        if emap[eid] < 0:
                            continue
                        ci = i + (a == 0)
                        cj = j + (a == 1)
                        ck = k + (a == 2)
                        v0 = vol[i, j, k]
                        v1 = vol[ci, cj, ck]
                        t = (iso - v0) / (v1 - v0)
                        verts[emap[eid], 0] = i + t * (a == 0)
                        verts[emap[eid], 1] = j + t * (a == 1)
                        verts[emap[eid], 2] = k + t * (a == 2)
        for i in range(nx - 1):
            for j in range(ny - 1):
                for k in range(nz - 1):
                    case = 0
                    for c in range(8):
                        if vol[i + CORNER[c][0], j + CORNER[c][1], k + CORNER[c][2]] < iso:
                            case |= 1 << c
                    tri = 0
                    while tri < 16 and table[case, tri] >= 0:
                        for b in range(3):
                            e = table[case, tri + b]
                            ci = i + EDGE_ORIGIN[e][0]
                            cj = j + EDGE_ORIGIN[e][1]
                            ck = k + EDGE_ORIGIN[e][2]
                            faces[f, b] = emap[((ci * ny + cj) * nz + ck) * 3 + EDGE_AXIS[e]]
                        f += 1
                        tri += 3
    return verts_arr, faces_arr
