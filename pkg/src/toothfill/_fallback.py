"""Vectorized numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and return conventions are identical; the operation order in
``simplex3`` mirrors the compiled loop so the two agree bit for bit.
"""

import numpy as np

F3 = 1.0 / 3.0
G3 = 1.0 / 6.0

GRAD3 = np.array(
    [
        [1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
        [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
        [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
    ],
    dtype=np.float64,
)


def _corner(x, y, z, g):
    t = 0.6 - x * x - y * y - z * z
    t2 = t * t
    gr = GRAD3[g]
    val = t2 * t2 * (gr[:, 0] * x + gr[:, 1] * y + gr[:, 2] * z)
    return np.where(t < 0.0, 0.0, val)


def simplex3(pts, perm):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    perm = np.asarray(perm, dtype=np.int64)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    s = (x + y + z) * F3
    i = np.floor(x + s).astype(np.int64)
    j = np.floor(y + s).astype(np.int64)
    k = np.floor(z + s).astype(np.int64)
    t = (i + j + k) * G3
    x0 = x - (i - t)
    y0 = y - (j - t)
    z0 = z - (k - t)

    xy = x0 >= y0
    yz = y0 >= z0
    xz = x0 >= z0
    # the six rank orderings of (x0, y0, z0), same branches as the compiled loop
    ca = xy & yz
    cb = xy & ~yz & xz
    cc = xy & ~yz & ~xz
    cd = ~xy & ~yz
    ce = ~xy & yz & ~xz
    cf = ~xy & yz & xz
    i1 = (ca | cb).astype(np.int64)
    j1 = (ce | cf).astype(np.int64)
    k1 = (cc | cd).astype(np.int64)
    i2 = (ca | cb | cc | cf).astype(np.int64)
    j2 = (ca | cd | ce | cf).astype(np.int64)
    k2 = (cb | cc | cd | ce).astype(np.int64)

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
    return np.clip(v, -1.0, 1.0)


def closest_on_triangles(p, a, b, c):
    """Ericson's closest point on triangle, vectorized over broadcast rows.

    Returns (closest point, feature code) with the same codes as the compiled
    kernel: 0 face, 1/2/3 edges ab/bc/ca, 4/5/6 vertices a/b/c.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...i,...i->...", ab, ap)
    d2 = np.einsum("...i,...i->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i->...", ab, bp)
    d4 = np.einsum("...i,...i->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i->...", ab, cp)
    d6 = np.einsum("...i,...i->...", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        q = a + ab * (vb * denom)[..., None] + ac * (vc * denom)[..., None]
        code = np.zeros(d1.shape, dtype=np.int8)

        m_bc = (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q = np.where(m_bc[..., None], b + w[..., None] * (c - b), q)
        code = np.where(m_bc, 2, code)

        m_ac = (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
        w = d2 / (d2 - d6)
        q = np.where(m_ac[..., None], a + w[..., None] * ac, q)
        code = np.where(m_ac, 3, code)

        m_c = (d6 >= 0.0) & (d5 <= d6)
        q = np.where(m_c[..., None], c, q)
        code = np.where(m_c, 6, code)

        m_ab = (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
        v = d1 / (d1 - d3)
        q = np.where(m_ab[..., None], a + v[..., None] * ab, q)
        code = np.where(m_ab, 1, code)

        m_b = (d3 >= 0.0) & (d4 <= d3)
        q = np.where(m_b[..., None], b, q)
        code = np.where(m_b, 5, code)

        m_a = (d1 <= 0.0) & (d2 <= 0.0)
        q = np.where(m_a[..., None], a, q)
        code = np.where(m_a, 4, code)
    return q, code.astype(np.int8)


def closest_points(pts, tris, node_lo, node_hi, node_left, node_right,
                   node_start, node_count, order):
    """Brute-force nearest triangle in chunks; the BVH arrays are ignored."""
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.float64)
    m = pts.shape[0]
    nf = tris.shape[0]
    dist = np.empty(m, dtype=np.float64)
    cp = np.empty((m, 3), dtype=np.float64)
    face = np.empty(m, dtype=np.int64)
    feat = np.empty(m, dtype=np.int8)
    a = tris[None, :, 0]
    b = tris[None, :, 1]
    c = tris[None, :, 2]
    chunk = max(1, 400_000 // max(nf, 1))
    for s in range(0, m, chunk):
        p = pts[s:s + chunk, None, :]
        q, code = closest_on_triangles(p, a, b, c)
        d = np.sum((p - q) ** 2, axis=-1)
        best = np.argmin(d, axis=1)
        rows = np.arange(p.shape[0])
        dist[s:s + chunk] = d[rows, best]
        cp[s:s + chunk] = q[rows, best]
        face[s:s + chunk] = best
        feat[s:s + chunk] = code[rows, best]
    return dist, cp, face, feat


EDGE_ORIGIN = np.array(
    [
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 0],
        [0, 0, 1], [1, 0, 1], [0, 1, 1], [0, 0, 1],
        [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    ],
    dtype=np.int64,
)
EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)
CORNER = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    dtype=np.int64,
)


def marching_cubes(vol, iso, table):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    table = np.asarray(table, dtype=np.int64)
    nx, ny, nz = vol.shape
    inside = vol < iso

    # crossing edges, ids ascending
    eids = []
    for axis in range(3):
        sl_a = [slice(None)] * 3
        sl_b = [slice(None)] * 3
        sl_a[axis] = slice(0, -1)
        sl_b[axis] = slice(1, None)
        cross = inside[tuple(sl_a)] != inside[tuple(sl_b)]
        idx = np.argwhere(cross)
        eids.append(((idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]) * 3 + axis)
    eids = np.sort(np.concatenate(eids)) if eids else np.zeros(0, np.int64)
    axis = eids % 3
    base = eids // 3
    i, j, k = base // (ny * nz), (base // nz) % ny, base % nz
    onehot = np.eye(3, dtype=np.int64)[axis]
    v0 = vol[i, j, k]
    v1 = vol[i + onehot[:, 0], j + onehot[:, 1], k + onehot[:, 2]]
    t = (iso - v0) / (v1 - v0)
    verts = np.stack([i, j, k], axis=1).astype(np.float64) + t[:, None] * onehot

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNER):
        case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    case = case.ravel()
    cells = np.nonzero((case != 0) & (case != 255))[0]
    rows = table[case[cells]]
    n_tri = (rows >= 0).sum(axis=1) // 3
    if cells.size == 0 or n_tri.sum() == 0:
        return verts, np.zeros((0, 3), dtype=np.int64)
    valid = rows >= 0
    cell_rep = np.repeat(cells, valid.sum(axis=1))
    edges = rows[valid]
    ci = cell_rep // ((ny - 1) * (nz - 1))
    cj = (cell_rep // (nz - 1)) % (ny - 1)
    ck = cell_rep % (nz - 1)
    org = EDGE_ORIGIN[edges]
    gid = (((ci + org[:, 0]) * ny + (cj + org[:, 1])) * nz + (ck + org[:, 2])) * 3 + EDGE_AXIS[edges]
    faces = np.searchsorted(eids, gid).reshape(-1, 3)
    return verts, faces.astype(np.int64)
