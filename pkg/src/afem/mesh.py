"""Conforming triangulations with newest-vertex-bisection refinement.

Triangles are stored as vertex triples ``(v0, v1, v2)`` in counterclockwise
order. The refinement edge of a triangle is always ``(v1, v2)``, i.e. the edge
opposite the newest vertex ``v0``. Bisection inserts the midpoint ``m`` of that
edge and produces the children ``(m, v0, v1)`` and ``(m, v2, v0)``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mesh",
    "MeshError",
    "GEOMETRIES",
    "build_initial_mesh",
    "bisect",
    "refine",
    "uniform_refine",
    "shape_regularity",
    "min_angle",
    "overlay",
    "is_conforming",
    "write_vtk",
    "write_text",
    "read_text",
]


class MeshError(ValueError):
    """Invalid geometry request or incompatible meshes."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation.

    Attributes
    ----------
    points : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise, refinement edge ``v1-v2``
    tags : (nt,) int array of subdomain tags
    generation : (nt,) int array of refinement depths
    root : fingerprint of the initial mesh this one descends from
    """

    points: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    generation: np.ndarray
    root: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("points", "triangles", "tags", "generation"):
            getattr(self, name).setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.points.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def _edge_data(self):
        if "edges" not in self._cache:
            t = self.triangles
            nv = self.n_vertices
            # local edge k is opposite local vertex k
            loc = np.stack([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]], axis=1)
            lo = loc.min(axis=2).ravel()
            hi = loc.max(axis=2).ravel()
            keys = lo.astype(np.int64) * nv + hi
            ukeys, inverse = np.unique(keys, return_inverse=True)
            edges = np.stack([ukeys // nv, ukeys % nv], axis=1)
            t2e = inverse.reshape(-1, 3)
            ne = edges.shape[0]
            e2t = -np.ones((ne, 2), dtype=np.int64)
            e2loc = -np.ones((ne, 2), dtype=np.int64)
            tri_ids = np.repeat(np.arange(t.shape[0]), 3)
            loc_ids = np.tile(np.arange(3), t.shape[0])
            order = np.argsort(inverse, kind="stable")
            inv_sorted = inverse[order]
            first = np.ones(order.size, dtype=bool)
            first[1:] = inv_sorted[1:] != inv_sorted[:-1]
            slot = np.where(first, 0, 1)
            if np.any(~first[1:] & ~first[:-1]):
                raise MeshError("edge shared by more than two triangles")
            e2t[inv_sorted, slot] = tri_ids[order]
            e2loc[inv_sorted, slot] = loc_ids[order]
            self._cache["edges"] = (edges, t2e, e2t, e2loc)
        return self._cache["edges"]

    @property
    def edges(self) -> np.ndarray:
        """(ne, 2) vertex pairs, smaller index first."""
        return self._edge_data()[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """(nt, 3) edge ids; local edge k is opposite local vertex k."""
        return self._edge_data()[1]

    @property
    def edge_tris(self) -> np.ndarray:
        """(ne, 2) adjacent triangle ids, second entry -1 on the boundary."""
        return self._edge_data()[2]

    @property
    def edge_local(self) -> np.ndarray:
        """(ne, 2) local edge index inside each adjacent triangle."""
        return self._edge_data()[3]

    @property
    def boundary_edges(self) -> np.ndarray:
        return self.edge_tris[:, 1] < 0

    @property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    def areas(self) -> np.ndarray:
        p = self.points[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_lengths(self) -> np.ndarray:
        d = self.points[self.edges[:, 1]] - self.points[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def diameters(self) -> np.ndarray:
        return self.edge_lengths()[self.tri_edges].max(axis=1)

    def centroids(self) -> np.ndarray:
        return self.points[self.triangles].mean(axis=1)


def _fingerprint(points, triangles) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(points, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(triangles, dtype=np.int64).tobytes())
    return h.hexdigest()[:16]


def _orient(points, triangles):
    """Make triangles counterclockwise with the longest edge opposite v0."""
    t = np.array(triangles, dtype=np.int64)
    p = points[t]
    cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    if np.any(cross == 0):
        raise MeshError("degenerate triangle")
    flip = cross < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    out = np.empty_like(t)
    for i, tri in enumerate(t):
        best = None
        for k in range(3):
            a, b = tri[(k + 1) % 3], tri[(k + 2) % 3]
            length = np.hypot(*(points[a] - points[b]))
            # longest edge; ties by lexicographically smallest vertex pair
            key = (-length, min(a, b), max(a, b))
            if best is None or key < best[0]:
                best = (key, k)
        k = best[1]
        out[i] = [tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]]
    return out


def from_arrays(points, triangles, tags=None) -> Mesh:
    """Build an initial mesh, assigning refinement edges by longest edge."""
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise MeshError("non-finite coordinates")
    tris = _orient(points, triangles)
    nt = tris.shape[0]
    tags = np.zeros(nt, dtype=np.int64) if tags is None else np.asarray(tags, dtype=np.int64)
    mesh = Mesh(points, tris, tags, np.zeros(nt, dtype=np.int64),
                root=_fingerprint(points, tris))
    if not is_conforming(mesh):
        raise MeshError("initial mesh is not conforming")
    return mesh


def _unit_square():
    pts = [(0, 0), (1, 0), (1, 1), (0, 1)]
    return pts, [(0, 1, 2), (0, 2, 3)], [0, 0]


def _unit_square_2x2():
    pts = [(x, y) for y in (0, 0.5, 1) for x in (0, 0.5, 1)]
    # diagonals through the centre vertex 4
    tris = [(4, 0, 1), (4, 1, 2), (4, 2, 5), (4, 5, 8),
            (4, 8, 7), (4, 7, 6), (4, 6, 3), (4, 3, 0)]
    return pts, tris, [0] * 8


def _kellogg():
    pts = [(x, y) for y in (-1, 0, 1) for x in (-1, 0, 1)]
    # origin is vertex 4; each quadrant square is cut by its diagonal through it
    tris = [(4, 5, 8), (4, 8, 7),   # quadrant 1: (0,1)^2
            (4, 7, 6), (4, 6, 3),   # quadrant 2: (-1,0)x(0,1)
            (4, 3, 0), (4, 0, 1),   # quadrant 3: (-1,0)^2
            (4, 1, 2), (4, 2, 5)]   # quadrant 4: (0,1)x(-1,0)
    return pts, tris, [1, 1, 2, 2, 3, 3, 4, 4]


GEOMETRIES = {
    "unit_square": _unit_square,
    "unit_square_2x2": _unit_square_2x2,
    "kellogg": _kellogg,
}


def build_initial_mesh(domain: str) -> Mesh:
    """Return the initial triangulation of a registered geometry."""
    try:
        builder = GEOMETRIES[domain]
    except KeyError:
        raise MeshError(f"unknown geometry {domain!r}; known: {sorted(GEOMETRIES)}") from None
    pts, tris, tags = builder()
    return from_arrays(pts, tris, tags)


def _close(mesh: Mesh, marked_edges: np.ndarray) -> np.ndarray:
    """Mark refinement edges of every triangle touching a marked edge."""
    t2e = mesh.tri_edges
    ref = t2e[:, 0]
    while True:
        touched = marked_edges[t2e].any(axis=1)
        todo = touched & ~marked_edges[ref]
        if not todo.any():
            return marked_edges
        marked_edges[ref[todo]] = True


def _split(tris, tags, gen, keys, mids, nv):
    """Bisect every triangle whose refinement edge has a midpoint in ``keys``."""
    a = np.minimum(tris[:, 1], tris[:, 2]).astype(np.int64)
    b = np.maximum(tris[:, 1], tris[:, 2]).astype(np.int64)
    k = a * nv + b
    pos = np.searchsorted(keys, k)
    pos = np.minimum(pos, max(keys.size - 1, 0))
    hit = keys.size > 0
    hit = (keys[pos] == k) if hit else np.zeros(k.size, dtype=bool)
    if not hit.any():
        return tris, tags, gen, False
    m = mids[pos[hit]]
    s = tris[hit]
    c1 = np.stack([m, s[:, 0], s[:, 1]], axis=1)
    c2 = np.stack([m, s[:, 2], s[:, 0]], axis=1)
    # children stay adjacent to each other in the triangle list
    kids = np.stack([c1, c2], axis=1).reshape(-1, 3)
    new_tris = np.concatenate([tris[~hit], kids])
    new_tags = np.concatenate([tags[~hit], np.repeat(tags[hit], 2)])
    new_gen = np.concatenate([gen[~hit], np.repeat(gen[hit] + 1, 2)])
    order = np.argsort(np.concatenate([np.flatnonzero(~hit),
                                       np.repeat(np.flatnonzero(hit), 2)]), kind="stable")
    return new_tris[order], new_tags[order], new_gen[order], True


def _refine_edges(mesh: Mesh, marked_edges: np.ndarray) -> Mesh:
    marked_edges = _close(mesh, marked_edges.copy())
    if not marked_edges.any():
        return mesh
    nv = mesh.n_vertices
    ids = np.flatnonzero(marked_edges)
    e = mesh.edges[ids]
    new_pts = 0.5 * (mesh.points[e[:, 0]] + mesh.points[e[:, 1]])
    points = np.concatenate([mesh.points, new_pts])
    base = points.shape[0]
    keys = e[:, 0].astype(np.int64) * base + e[:, 1]
    mids = nv + np.arange(ids.size)
    tris = mesh.triangles.copy()
    tags = mesh.tags.copy()
    gen = mesh.generation.copy()
    # at most two rounds: a triangle with all three edges marked is split
    # along its refinement edge, then each child along its own
    for _ in range(3):
        tris, tags, gen, changed = _split(tris, tags, gen, keys, mids, base)
        if not changed:
            break
    return Mesh(points, tris, tags, gen, root=mesh.root)


def bisect(mesh: Mesh, marked) -> Mesh:
    """Bisect each marked triangle once, plus the closure needed for conformity."""
    marked = np.asarray(sorted(set(int(i) for i in marked)), dtype=np.int64)
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise IndexError("marked triangle id out of range")
    flags = np.zeros(mesh.n_edges, dtype=bool)
    flags[mesh.tri_edges[marked, 0]] = True
    return _refine_edges(mesh, flags)


def refine(mesh: Mesh, marked) -> Mesh:
    """Split all three edges of each marked triangle (three bisections), plus closure.

    Marking every triangle halves the mesh size, which is the refinement used
    inside the adaptive loop.
    """
    marked = np.asarray(sorted(set(int(i) for i in marked)), dtype=np.int64)
    if marked.size and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise IndexError("marked triangle id out of range")
    flags = np.zeros(mesh.n_edges, dtype=bool)
    flags[mesh.tri_edges[marked].ravel()] = True
    return _refine_edges(mesh, flags)


def uniform_refine(mesh: Mesh, rounds: int = 1) -> Mesh:
    """Bisect every triangle ``rounds`` times."""
    for _ in range(rounds):
        mesh = bisect(mesh, range(mesh.n_triangles))
    return mesh


def shape_regularity(mesh: Mesh) -> float:
    """max over triangles of diam(T) / |T|^(1/2)."""
    return float(np.max(mesh.diameters() / np.sqrt(mesh.areas())))


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle of the mesh, in radians."""
    p = mesh.points[mesh.triangles]
    angles = []
    for k in range(3):
        u = p[:, (k + 1) % 3] - p[:, k]
        v = p[:, (k + 2) % 3] - p[:, k]
        cos = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(np.min(angles))


def is_conforming(mesh: Mesh) -> bool:
    """Edge-incidence audit: interior edges have 2 triangles, boundary edges 1,
    and no vertex lies in the interior of a boundary edge (no hanging nodes)."""
    try:
        edges = mesh.edges
        e2t = mesh.edge_tris
    except MeshError:
        return False
    if np.any(mesh.areas() <= 0):
        return False
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.triangles.ravel()] = True
    if not used.all():
        return False
    bnd = edges[e2t[:, 1] < 0]
    if bnd.size == 0:
        return True
    from scipy.spatial import cKDTree

    # a hanging vertex sits strictly inside an edge that only one side sees
    a = mesh.points[bnd[:, 0]]
    b = mesh.points[bnd[:, 1]]
    d = b - a
    length = np.hypot(d[:, 0], d[:, 1])
    near = cKDTree(mesh.points).query_ball_point(0.5 * (a + b), 0.5 * length * (1 - 1e-9))
    for i, cand in enumerate(near):
        cand = [v for v in cand if v not in (bnd[i, 0], bnd[i, 1])]
        if not cand:
            continue
        rel = mesh.points[cand] - a[i]
        cross = np.abs(d[i, 0] * rel[:, 1] - d[i, 1] * rel[:, 0])
        if np.any(cross <= 1e-12 * length[i] ** 2):
            return False
    return True


def overlay(mesh_a: Mesh, mesh_b: Mesh) -> Mesh:
    """Smallest common NVB refinement of two refinements of the same initial mesh."""
    if mesh_a.root != mesh_b.root:
        raise MeshError("meshes do not refine the same initial mesh")
    target = {tuple(p) for p in mesh_b.points.tolist()}
    out = mesh_a
    while True:
        e = out.edges[out.tri_edges[:, 0]]
        mids = 0.5 * (out.points[e[:, 0]] + out.points[e[:, 1]])
        marked = [i for i, m in enumerate(mids.tolist()) if tuple(m) in target]
        if not marked:
            return out
        out = bisect(out, marked)


def write_vtk(mesh: Mesh, path, point_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid (cell type 5)."""
    lines = ["# vtk DataFile Version 3.0", "afem mesh", "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_vertices} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.points]
    nt = mesh.n_triangles
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    lines.append(f"CELL_DATA {nt}")
    for name, arr in (("subdomain", mesh.tags), ("generation", mesh.generation)):
        lines += [f"SCALARS {name} int 1", "LOOKUP_TABLE default"]
        lines += [str(int(v)) for v in arr]
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_vertices}")
        for name, arr in point_data.items():
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{float(v):.17g}" for v in arr]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_text(mesh: Mesh, path) -> None:
    """Plain-text format: counts, coordinates, then ``v0 v1 v2 tag generation``."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.points]
    lines += [f"{a} {b} {c} {t} {g}" for (a, b, c), t, g
              in zip(mesh.triangles.tolist(), mesh.tags.tolist(), mesh.generation.tolist())]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_text(path) -> Mesh:
    with open(path) as fh:
        nv, nt = (int(s) for s in fh.readline().split())
        pts = np.array([[float(s) for s in fh.readline().split()] for _ in range(nv)])
        rows = np.array([[int(s) for s in fh.readline().split()] for _ in range(nt)],
                        dtype=np.int64).reshape(nt, 5)
    return Mesh(pts, rows[:, :3].copy(), rows[:, 3].copy(), rows[:, 4].copy(),
                root=_fingerprint(pts, rows[:, :3]))
