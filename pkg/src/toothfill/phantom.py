"""Procedural dental arches for dataset-free runs and tests.

Each arch is 14 closed, non-intersecting tooth blobs (superellipsoids with
occlusal cusps) on a parabolic curve, sitting on a swept gingiva slab. Units
are millimetre-like. Lower teeth point to +z with their occlusal plane at
``OCCLUSAL_Z``; the upper arch is the mirror image across a plane just above
it, lifted just enough to keep ``JAW_CLEARANCE`` between the jaws, so the two
arches of one seed occlude without touching.
"""

from functools import lru_cache

import numpy as np

from .meshio import LabeledArch, SignedDistance, TriangleMesh, concatenate, icosphere

OCCLUSAL_Z = 10.0
OCCLUSAL_GAP = 0.3
JAW_CLEARANCE = 0.2
TOOTH_GAP = 0.4
SEAT_GAP = 0.15
GINGIVA_WIDTH = 14.0
GINGIVA_DEPTH = 8.0
ARCH_CURVATURE = 0.045

# (mesiodistal width, buccolingual depth, crown height, cusps) for tooth positions 1..7
_UPPER_TEETH = [
    (8.5, 7.0, 10.0, 0), (6.5, 6.0, 9.0, 0), (7.5, 8.0, 10.0, 1), (7.0, 9.0, 8.0, 2),
    (6.5, 9.0, 7.5, 2), (10.5, 11.0, 7.0, 4), (9.5, 10.5, 6.5, 4),
]
_LOWER_TEETH = [
    (5.5, 6.0, 9.0, 0), (6.0, 6.5, 9.0, 0), (7.0, 7.5, 10.0, 1), (7.0, 8.0, 8.0, 2),
    (7.0, 8.5, 7.5, 2), (11.0, 10.5, 7.0, 4), (10.5, 10.0, 6.5, 4),
]


def _tooth_mesh(width, depth, height, cusps, rng, subdivisions=3):
    """Star-shaped tooth blob centred at the origin, occlusal side +z."""
    ico = icosphere(subdivisions)
    d = ico.vertices
    a, b, c = width / 2.0, depth / 2.0, height / 2.0
    p = rng.uniform(2.6, 3.4)
    r = (np.abs(d[:, 0] / a) ** p + np.abs(d[:, 1] / b) ** p + np.abs(d[:, 2] / c) ** p) ** (-1.0 / p)
    if cusps == 1:
        dirs = np.array([[0.0, 0.0, 1.0]])
    elif cusps > 1:
        phi = np.arange(cusps) * 2 * np.pi / cusps + np.pi / cusps + rng.uniform(-0.2, 0.2)
        dirs = np.stack([0.45 * np.cos(phi), 0.45 * np.sin(phi), np.ones_like(phi)], axis=1)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        dirs = np.zeros((0, 3))
    bump = np.zeros(len(d))
    for cd in dirs:
        amp = rng.uniform(0.06, 0.11)
        bump += amp * np.exp(-np.sum((d - cd) ** 2, axis=1) / 0.12)
    # bumps fade out toward the equator so the blob keeps a flat-ish base
    bump *= np.clip(d[:, 2], 0.0, None) ** 2
    return TriangleMesh(d * (r * (1.0 + bump))[:, None], ico.faces)


def _parabola_arclength(curvature, x_max=60.0, n=6001):
    x = np.linspace(0.0, x_max, n)
    dy = 2.0 * curvature * x
    seg = np.sqrt(1.0 + 0.25 * (dy[1:] + dy[:-1]) ** 2) * np.diff(x)
    return x, np.concatenate([[0.0], np.cumsum(seg)])


def _point_on_arch(s, curvature, table):
    """Position and tangent angle at signed arc length ``s`` from the midline."""
    xs, ss = table
    x = np.sign(s) * np.interp(np.abs(s), ss, xs)
    return np.array([x, curvature * x * x]), np.arctan(2.0 * curvature * x)


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _gingiva(curvature, table, s_lo, s_hi, top_of, step=0.8):
    """Swept rectangular slab with a subdivided perimeter and capped ends."""
    n_st = int(np.ceil((s_hi - s_lo) / step)) + 1
    stations = np.linspace(s_lo, s_hi, n_st)
    hw, h = GINGIVA_WIDTH / 2.0, GINGIVA_DEPTH
    # perimeter in the (normal offset, height-below-top) plane, counter-clockwise
    top = [(u, 0.0) for u in np.linspace(-hw, hw, 9)[:-1]]
    right = [(hw, -z) for z in np.linspace(0.0, h, 5)[:-1]]
    bottom = [(u, -h) for u in np.linspace(hw, -hw, 9)[:-1]]
    left = [(-hw, -z) for z in np.linspace(h, 0.0, 5)[:-1]]
    ring = np.array(top + right + bottom + left)
    m = len(ring)
    verts = []
    for s in stations:
        pos, theta = _point_on_arch(s, curvature, table)
        normal = np.array([-np.sin(theta), np.cos(theta)])
        z_top = top_of(s)
        xy = pos[None, :] + ring[:, :1] * normal[None, :]
        verts.append(np.column_stack([xy, z_top + ring[:, 1]]))
    verts = np.concatenate(verts)
    faces = []
    for k in range(n_st - 1):
        for j in range(m):
            a, b = k * m + j, k * m + (j + 1) % m
            c, d = a + m, b + m
            faces += [[a, b, d], [a, d, c]]
    # end caps: fan around the ring centroid
    for k, flip in ((0, True), (n_st - 1, False)):
        centre = len(verts)
        verts = np.vstack([verts, verts[k * m:(k + 1) * m].mean(axis=0)])
        for j in range(m):
            tri = [centre, k * m + j, k * m + (j + 1) % m]
            faces.append(tri[::-1] if flip else tri)
    mesh = TriangleMesh(verts, np.array(faces))
    return mesh if mesh.signed_volume() > 0 else mesh.flipped()


def _lower_style_arch(rng, teeth_dims, curvature, quadrants):
    """Arch with teeth pointing to +z; ``quadrants`` = (quadrant at -x, quadrant at +x)."""
    table = _parabola_arclength(curvature)
    widths = [w * rng.uniform(0.95, 1.05) for w, *_ in teeth_dims]

    def place(blob, s, jitter, height):
        pos, theta = _point_on_arch(s, curvature, table)
        rot = _rot_z(theta + jitter)
        centre = np.array([pos[0], pos[1], OCCLUSAL_Z - height / 2.0])
        return blob.transformed(lambda v: v @ rot.T + centre)

    teeth, placed = [], []
    for side, quadrant in ((-1.0, quadrants[0]), (1.0, quadrants[1])):
        s, prev = 0.0, None
        for i, (_, depth, height, cusps) in enumerate(teeth_dims):
            depth *= rng.uniform(0.95, 1.05)
            height *= rng.uniform(0.95, 1.05)
            blob = _tooth_mesh(widths[i], depth, height, cusps, rng)
            jitter = rng.uniform(-0.05, 0.05)
            s += widths[i] / 2.0 + (0.5 * TOOTH_GAP if prev is None else TOOTH_GAP + widths[i - 1] / 2.0)
            # slide along the arch until the blob clears the midline or its neighbour
            while True:
                mesh = place(blob, side * s, jitter, height)
                if prev is None:
                    clear = np.min(side * mesh.vertices[:, 0]) >= 0.5 * TOOTH_GAP
                else:
                    clear = prev.query(mesh.vertices).min() >= TOOTH_GAP
                if clear:
                    break
                s += 0.1
            prev = SignedDistance(mesh)
            teeth.append((10 * quadrant + i + 1, mesh))
            placed.append((side * s, widths[i], mesh.vertices[:, 2].min()))

    def top_of(s):
        near = [b for sp, w, b in placed if abs(s - sp) <= w / 2.0 + 3.0]
        if not near:
            near = [min(placed, key=lambda t: abs(s - t[0]))[2]]
        return min(near) - SEAT_GAP

    s_end = max(abs(sp) for sp, _, _ in placed) + widths[-1] / 2.0 + 2.0
    gum = _gingiva(curvature, table, -s_end, s_end, top_of)
    meshes = [gum] + [m for _, m in teeth]
    labels = np.concatenate([np.zeros(gum.n_vertices, np.int64)]
                            + [np.full(m.n_vertices, fdi, np.int64) for fdi, m in teeth])
    return concatenate(meshes), labels


def _jaw_lift(seed, upper: TriangleMesh) -> float:
    """Upward shift that keeps ``upper`` at least ``JAW_CLEARANCE`` from the lower arch."""
    lower, _ = _jaw(seed, "lower")

    def near_plane(mesh, half):
        z = mesh.vertices[:, 2]
        faces = np.all(np.abs(z[mesh.faces] - OCCLUSAL_Z) < half + 1.0, axis=1)
        return np.abs(z - OCCLUSAL_Z) < half, faces

    # only the occlusal band can come close; its faces stand in for the whole (open) mesh
    lo_v, lo_f = near_plane(lower, 3.0)
    up_v, up_f = near_plane(upper, 3.0)
    lo_pts, up_pts = lower.vertices[lo_v], upper.vertices[up_v]
    sd_lower, sd_upper = SignedDistance(lower.submesh(lo_f)), SignedDistance(upper.submesh(up_f))
    lift = 0.0
    while True:
        gap = min(sd_lower.query(up_pts + [0.0, 0.0, lift]).min(),
                  sd_upper.query(lo_pts - [0.0, 0.0, lift]).min())
        if gap >= JAW_CLEARANCE:
            return lift
        # a shift of d changes every distance by at most d
        lift += max(JAW_CLEARANCE - gap, 0.02)


def generate_phantom_arch(seed: int, jaw: str = "lower") -> LabeledArch:
    """Deterministic phantom arch; the upper and lower arch of one seed occlude."""
    if jaw not in ("lower", "upper"):
        raise ValueError(f"jaw must be 'upper' or 'lower', got {jaw!r}")
    mesh, labels = _jaw(int(seed), jaw)
    return LabeledArch(mesh, labels.copy(), f"phantom-{seed}-{jaw}", jaw)


@lru_cache(maxsize=8)
def _jaw(seed: int, jaw: str):
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0 if jaw == "lower" else 1])
    if jaw == "lower":
        mesh, labels = _lower_style_arch(rng, _LOWER_TEETH, ARCH_CURVATURE, (4, 3))
    else:
        mesh, labels = _lower_style_arch(rng, _UPPER_TEETH, ARCH_CURVATURE * 0.93, (1, 2))
        mirror_z = 2.0 * OCCLUSAL_Z + OCCLUSAL_GAP
        mesh = TriangleMesh(mesh.vertices * [1.0, 1.0, -1.0] + [0.0, -0.8, mirror_z],
                            mesh.faces[:, ::-1])
        mesh = mesh.transformed(lambda v: v + [0.0, 0.0, _jaw_lift(seed, mesh)])
    mesh.vertices.flags.writeable = False
    mesh.faces.flags.writeable = False
    return mesh, labels


def generate_phantom_pair(seed: int):
    """(lower, upper) arches sharing one seed."""
    return generate_phantom_arch(seed, "lower"), generate_phantom_arch(seed, "upper")
