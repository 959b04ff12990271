"""Procedural meshes: soft-body test objects, rigid colliders and cloth.

All closed meshes are watertight with outward-facing triangles. Soft objects
rest on the ground plane ``y = 0`` and are roughly 1 m in size.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def merge_vertices(vertices, faces, decimals=9):
    """Weld vertices that coincide after rounding; drop collapsed faces."""
    key = np.round(np.asarray(vertices, dtype=np.float64), decimals)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    # keep vertices in first-occurrence order for stable indexing
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    new_v = np.asarray(vertices, dtype=np.float64)[first[order]]
    f = remap[inverse.reshape(-1)][np.asarray(faces)]
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    return TriMesh(new_v, f[keep])


def grid(n, m, size=(1.0, 1.0)):
    """Flat ``n x m`` vertex grid in the x-y plane, centred at the origin."""
    xs, ys = np.meshgrid(np.linspace(-size[0] / 2, size[0] / 2, n),
                         np.linspace(-size[1] / 2, size[1] / 2, m), indexing="ij")
    v = np.c_[xs.ravel(), ys.ravel(), np.zeros(n * m)]
    faces = []
    for i in range(n - 1):
        for j in range(m - 1):
            a = i * m + j
            faces += [(a, a + m, a + 1), (a + 1, a + m, a + m + 1)]
    return TriMesh(v, faces)


def cube_surface(n):
    """Unit cube ``[-0.5, 0.5]^3`` with every face split into ``n x n`` quads."""
    t = np.linspace(-0.5, 0.5, n + 1)
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u, w = np.meshgrid(t, t, indexing="ij")
            pts = np.zeros((n + 1, n + 1, 3))
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            pts[..., axis] = 0.5 * sign
            pts[..., a1] = u
            pts[..., a2] = w
            base = len(verts) and sum(len(x) for x in verts)
            verts.append(pts.reshape(-1, 3))
            for i in range(n):
                for j in range(n):
                    a = base + i * (n + 1) + j
                    b, c, d = a + (n + 1), a + 1, a + n + 2
                    # (a1, a2, axis) is right-handed, so (a, b, c) faces +axis
                    if sign > 0:
                        faces += [(a, b, c), (c, b, d)]
                    else:
                        faces += [(a, c, b), (c, d, b)]
    return merge_vertices(np.concatenate(verts), faces)


def icosphere(subdivisions=2, radius=1.0):
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriMesh(np.array(verts) * radius, f)


def revolve(radii, heights, segments):
    """Closed surface of revolution about +y.

    ``radii[0]`` and ``radii[-1]`` must be 0 (the poles).
    """
    radii, heights = np.asarray(radii, float), np.asarray(heights, float)
    rings = len(radii) - 2
    theta = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    verts = [[0.0, heights[0], 0.0]]
    for r, h in zip(radii[1:-1], heights[1:-1]):
        verts += np.c_[r * np.cos(theta), np.full(segments, h), -r * np.sin(theta)].tolist()
    verts.append([0.0, heights[-1], 0.0])
    top = len(verts) - 1
    faces = []
    ring = lambda k, s: 1 + k * segments + (s % segments)  # noqa: E731
    for s in range(segments):
        faces.append((0, ring(0, s + 1), ring(0, s)))
        faces.append((top, ring(rings - 1, s), ring(rings - 1, s + 1)))
        for k in range(rings - 1):
            a, b = ring(k, s), ring(k, s + 1)
            c, d = ring(k + 1, s), ring(k + 1, s + 1)
            faces += [(a, b, c), (b, d, c)]
    return TriMesh(np.array(verts), faces)


def torus(major=0.35, minor=0.15, n_major=48, n_minor=24):
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)
    w = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)
    uu, ww = np.meshgrid(u, w, indexing="ij")
    r = major + minor * np.cos(ww)
    v = np.stack([r * np.cos(uu), minor * np.sin(ww), r * np.sin(uu)], -1).reshape(-1, 3)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = i * n_minor + (j + 1) % n_minor
            d = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            faces += [(a, c, b), (b, c, d)]
    return TriMesh(v, faces)


def superellipsoid(half_axes, n=14, exponent=2.0):
    """Subdivided cube pushed onto ``sum |x_i / a_i|^e = 1`` (rounded-box look for large ``e``)."""
    cube = cube_surface(n)
    p = cube.vertices
    d = p / np.linalg.norm(p, axis=1, keepdims=True)
    s = np.sum(np.abs(d) ** exponent, axis=1) ** (-1.0 / exponent)
    return cube.with_vertices(d * s[:, None] * np.asarray(half_axes, float))


def signed_volume(mesh):
    v = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def place_on_ground(mesh, height=0.0):
    v = mesh.vertices.copy()
    v[:, 1] -= v[:, 1].min() - height
    return mesh.with_vertices(v)


# ----------------------------------------------------------------------------
# named objects

def _bottle():
    s = np.linspace(0, 1, 30)
    body = 0.16 * np.ones_like(s)
    neck = 0.16 - 0.1 * np.clip((s - 0.6) / 0.2, 0, 1) ** 2 * (3 - 2 * np.clip((s - 0.6) / 0.2, 0, 1))
    r = np.where(s < 0.6, body, neck)
    h = s * 0.8
    return revolve(np.r_[0, 0.12, r, 0.05, 0], np.r_[0, 0, h, 0.8, 0.8], 36)


def _capsule():
    a = np.linspace(-np.pi / 2, np.pi / 2, 19)[1:-1]
    lower = np.c_[0.2 * np.cos(a[: len(a) // 2 + 1]), 0.2 + 0.2 * np.sin(a[: len(a) // 2 + 1])]
    mid_h = np.linspace(0.2, 0.7, 12)[1:-1]
    upper = np.c_[0.2 * np.cos(a[len(a) // 2:]), 0.7 + 0.2 * np.sin(a[len(a) // 2:])]
    prof = np.r_[lower, np.c_[np.full_like(mid_h, 0.2), mid_h], upper]
    return revolve(np.r_[0, prof[:, 0], 0], np.r_[0, prof[:, 1], 0.9], 40)


def _egg():
    t = np.linspace(0, np.pi, 34)
    r = 0.3 * np.sin(t) * (1 - 0.15 * np.cos(t))
    h = 0.42 * (1 - np.cos(t))
    r[0] = r[-1] = 0.0
    return revolve(r, h, 36)


def _ball():
    t = np.linspace(0, np.pi, 34)
    return revolve(0.35 * np.sin(t).round(15), 0.35 * (1 - np.cos(t)), 36)


SOFT_OBJECTS = {
    # name: (builder, stiffness, damping)
    "ball": (_ball, 0.6, 0.02),
    "bottle": (_bottle, 0.9, 0.02),
    "box": (lambda: cube_surface(14).with_vertices(cube_surface(14).vertices * [0.6, 0.5, 0.6]), 0.8, 0.03),
    "capsule": (_capsule, 0.7, 0.02),
    "donut": (torus, 0.5, 0.02),
    "egg": (_egg, 0.75, 0.02),
    "flipflop": (lambda: superellipsoid((0.5, 0.06, 0.2), n=16, exponent=4.0), 0.4, 0.04),
    "pillow": (lambda: superellipsoid((0.45, 0.15, 0.35), n=16, exponent=3.0), 0.3, 0.05),
}


def soft_object(name):
    """``(mesh, stiffness, damping)`` for a named soft body, resting on ``y = 0``."""
    builder, stiffness, damping = SOFT_OBJECTS[name]
    return place_on_ground(builder()), stiffness, damping


def collider(name):
    """Convex rigid collider centred at its own origin."""
    if name == "sphere":
        return icosphere(2, 0.12)
    if name == "box":
        return cube_surface(3).with_vertices(cube_surface(3).vertices * [0.22, 0.22, 0.22])
    if name == "cylinder":
        c = revolve([0, 0.08, 0.08, 0.08, 0.08, 0], [-0.15, -0.15, -0.05, 0.05, 0.15, 0.15], 20)
        return c
    if name == "needle":
        return revolve([0, 0.03, 0.03, 0.03, 0], [-0.25, -0.2, 0.0, 0.2, 0.25], 12)
    raise KeyError(f"unknown collider {name!r}")


COLLIDERS = ("sphere", "box", "cylinder", "needle")
