"""Triangle meshes, mesh graphs, contact patches and coordinate normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .errors import (
    DegenerateFaceError,
    DegenerateGeometryError,
    InvalidArgumentError,
    MeshParseError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with float64 vertices and 0-based int64 faces.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
    faces : array_like, shape (F, 3)
        Vertex index triples. Every index must lie in ``[0, N)`` and no
        triangle may repeat an index.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise InvalidArgumentError(f"vertices must be (N, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise InvalidArgumentError(f"faces must be (F, 3), got {f.shape}")
        if len(v) < 3 or len(f) < 1:
            raise InvalidArgumentError(
                f"mesh needs >= 3 vertices and >= 1 face, got {len(v)} and {len(f)}"
            )
        if f.min() < 0 or f.max() >= len(v):
            raise InvalidArgumentError(
                f"face index out of range [0, {len(v)}): min {f.min()}, max {f.max()}"
            )
        bad = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DegenerateFaceError(i, f[i])
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same connectivity, new vertex positions."""
        return TriMesh(vertices, self.faces)

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(
            self.faces, other.faces
        )


@dataclass(frozen=True, eq=False)
class MeshGraph:
    """Undirected graph over mesh vertices.

    ``edges`` is an (E, 2) int64 array, each row ``(i, j)`` with ``i < j``,
    rows sorted lexicographically and unique.
    """

    positions: np.ndarray
    edges: np.ndarray
    source_face_count: int = 0

    def __post_init__(self):
        p = np.ascontiguousarray(self.positions, dtype=np.float64)
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if p.ndim != 2 or p.shape[1] != 3 or len(p) == 0:
            raise InvalidArgumentError(f"positions must be non-empty (N, 3), got {p.shape}")
        if len(e):
            if (e[:, 0] == e[:, 1]).any():
                raise InvalidArgumentError("graph contains a self-loop")
            if e.min() < 0 or e.max() >= len(p):
                raise InvalidArgumentError("edge endpoint out of range")
            e = _canonical_edges(e)
        e = np.ascontiguousarray(e)
        p.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "edges", e)

    @property
    def n_nodes(self):
        return len(self.positions)

    @property
    def n_edges(self):
        return len(self.edges)

    def with_positions(self, positions):
        return MeshGraph(positions, self.edges, self.source_face_count)

    def connected_components(self):
        """Number of connected components (isolated nodes count as one each)."""
        n = self.n_nodes
        a = sparse.coo_matrix(
            (np.ones(self.n_edges), (self.edges[:, 0], self.edges[:, 1])), shape=(n, n)
        )
        return int(csgraph.connected_components(a, directed=False)[0])


def _canonical_edges(e):
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


# ----------------------------------------------------------------------------
# I/O

def load_mesh(path):
    """Read an OBJ or OFF file into a :class:`TriMesh`.

    Polygons with more than three corners are fan-triangulated around their
    first vertex. The format is chosen by extension, falling back to an
    ``OFF`` header sniff.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".off" or text.lstrip().startswith("OFF"):
        vertices, polys, lines = _parse_off(path, text)
    else:
        vertices, polys, lines = _parse_obj(path, text)
    if len(vertices) < 3:
        raise MeshParseError(path, len(text.splitlines()), "fewer than 3 vertices")
    tris = []
    for poly, lineno in zip(polys, lines):
        for idx in poly:
            if idx < 0 or idx >= len(vertices):
                raise MeshParseError(path, lineno, f"vertex index {idx} out of range")
        tris.extend((poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1))
    if not tris:
        raise MeshParseError(path, len(text.splitlines()), "no faces")
    return TriMesh(np.array(vertices, dtype=np.float64), np.array(tris, dtype=np.int64))


def _parse_obj(path, text):
    vertices, polys, lines = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
            try:
                vertices.append([float(t) for t in tok[1:4]])
            except ValueError as exc:
                raise MeshParseError(path, lineno, str(exc)) from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise MeshParseError(path, lineno, "face needs at least 3 vertices")
            try:
                # "f 1/2/3" style: only the position index matters
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError as exc:
                raise MeshParseError(path, lineno, str(exc)) from None
            n = len(vertices)
            poly = [i - 1 if i > 0 else n + i for i in idx]
            if len(set(poly)) != len(poly):
                raise DegenerateFaceError(len(polys), poly)
            polys.append(poly)
            lines.append(lineno)
    return vertices, polys, lines


def _parse_off(path, text):
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((lineno, line))
    if not rows or not rows[0][1].startswith("OFF"):
        raise MeshParseError(path, rows[0][0] if rows else 1, "missing OFF header")
    head = rows[0][1][3:].split()
    body = rows[1:]
    if not head:
        if not body:
            raise MeshParseError(path, rows[0][0], "missing counts line")
        head = body[0][1].split()
        body = body[1:]
    try:
        nv, nf = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise MeshParseError(path, rows[0][0], "malformed counts line") from None
    if len(body) < nv + nf:
        raise MeshParseError(path, rows[-1][0], f"expected {nv} vertices and {nf} faces")
    vertices, polys, lines = [], [], []
    for lineno, line in body[:nv]:
        try:
            vertices.append([float(t) for t in line.split()[:3]])
        except ValueError as exc:
            raise MeshParseError(path, lineno, str(exc)) from None
        if len(vertices[-1]) != 3:
            raise MeshParseError(path, lineno, "vertex needs 3 coordinates")
    for lineno, line in body[nv:nv + nf]:
        try:
            tok = [int(t) for t in line.split()]
        except ValueError as exc:
            raise MeshParseError(path, lineno, str(exc)) from None
        if not tok or len(tok) < tok[0] + 1 or tok[0] < 3:
            raise MeshParseError(path, lineno, "malformed face record")
        poly = tok[1:tok[0] + 1]
        if len(set(poly)) != len(poly):
            raise DegenerateFaceError(len(polys), poly)
        polys.append(poly)
        lines.append(lineno)
    return vertices, polys, lines


def save_obj(mesh, path):
    """Write ``mesh`` as OBJ. Coordinates use 17 significant digits so a
    load after save reproduces them bitwise."""
    path = Path(path)
    out = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(out) + "\n")
    return path


def save_off(mesh, path):
    path = Path(path)
    out = ["OFF", f"{mesh.n_vertices} {mesh.n_faces} 0"]
    out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices.tolist()]
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    path.write_text("\n".join(out) + "\n")
    return path


# ----------------------------------------------------------------------------
# graphs

def build_graph(mesh):
    """Graph whose nodes are mesh vertices and whose edges are the
    deduplicated triangle sides."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    return MeshGraph(mesh.vertices, _canonical_edges(e), source_face_count=mesh.n_faces)


def extract_patch(graph, anchor, k):
    """Induced subgraph on the ``k`` vertices closest to ``anchor``.

    Distances are Euclidean; ties go to the lower vertex index. Selected
    vertices keep their original relative order.

    Returns
    -------
    patch : MeshGraph
    index_map : ndarray of int64, shape (k,)
        ``index_map[i]`` is the original index of patch node ``i``.
    """
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(anchor)):
        raise InvalidArgumentError(f"anchor must be finite, got {anchor}")
    n = graph.n_nodes
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"patch size k={k} must be in [1, {n}]")
    d2 = np.sum((graph.positions - anchor) ** 2, axis=1)
    order = np.lexsort((np.arange(n), d2))
    index_map = np.sort(order[:k])
    lookup = np.full(n, -1, dtype=np.int64)
    lookup[index_map] = np.arange(k)
    e = lookup[graph.edges]
    e = e[(e >= 0).all(axis=1)]
    patch = MeshGraph(graph.positions[index_map], e, graph.source_face_count)
    return patch, index_map


@dataclass(frozen=True)
class NormalizationTransform:
    """``p' = (p - center) / scale``."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0:
            raise InvalidArgumentError(f"scale must be positive, got {self.scale}")

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    def apply_vectors(self, vectors):
        return np.asarray(vectors, dtype=np.float64) / self.scale


def normalize_pair(soft, rigid):
    """Center on the soft centroid and divide by the soft bounding-box
    diagonal. The rigid graph gets the same transform, so relative placement
    is preserved."""
    p = soft.positions
    diag = float(np.linalg.norm(p.max(axis=0) - p.min(axis=0)))
    if diag == 0.0:
        raise DegenerateGeometryError("soft graph vertices all coincide (zero bounding box)")
    t = NormalizationTransform(p.mean(axis=0), diag)
    return soft.with_positions(t.apply(p)), rigid.with_positions(t.apply(rigid.positions)), t
