"""Conforming triangulations with newest-vertex bisection.

Triangles are stored as vertex triples ``(v0, v1, v2)`` in counterclockwise
order, where ``v0`` is the newest vertex and the refinement edge is
``(v1, v2)``.  Local edge ``i`` is the edge opposite local vertex ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np


class BoundaryEdge(ValueError):
    """A jump frame was requested on an edge of the domain boundary."""


@dataclass(eq=False)
class Mesh2D:
    """Conforming triangle mesh with refinement-edge bookkeeping.

    Parameters
    ----------
    vertices : ndarray (N, 2)
    triangles : ndarray (T, 3)
        Vertex ids; the refinement edge of each triangle is opposite its
        first vertex.
    root : ndarray (T,), optional
        Index of the initial-mesh triangle each triangle descends from.
    generation : ndarray (T,), optional
        Number of bisections separating a triangle from its root.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    root: np.ndarray | None = None
    generation: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        tri = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        area = _signed_area(self.vertices, tri)
        if np.any(area == 0):
            raise ValueError("degenerate triangle")
        flip = area < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        self.triangles = tri
        n = len(tri)
        self.root = np.arange(n) if self.root is None else np.asarray(self.root, dtype=np.int64)
        self.generation = (
            np.zeros(n, dtype=np.int64) if self.generation is None else np.asarray(self.generation, dtype=np.int64)
        )
        for arr in (self.vertices, self.triangles, self.root, self.generation):
            arr.setflags(write=False)

    # -- sizes ---------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    # -- topology ------------------------------------------------------------

    @cached_property
    def _edge_data(self):
        tri = self.triangles
        local = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)  # (T, 3, 2)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        inv = inv.ravel()
        tri_edges = inv.reshape(-1, 3)
        owner = np.repeat(np.arange(len(tri)), 3)
        order = np.lexsort((owner, inv))
        counts = np.bincount(inv, minlength=len(edges))
        if np.any(counts > 2):
            raise ValueError("non-manifold mesh: an edge has more than two triangles")
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_tris = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_tris[:, 0] = owner[order][start]
        two = counts == 2
        edge_tris[two, 1] = owner[order][start[two] + 1]
        return edges, tri_edges, edge_tris

    @property
    def edges(self) -> np.ndarray:
        """Edge vertex pairs, sorted ascending within each row."""
        return self._edge_data[0]

    @property
    def tri_edges(self) -> np.ndarray:
        """``tri_edges[t, i]`` is the edge opposite local vertex ``i``."""
        return self._edge_data[1]

    @property
    def edge_tris(self) -> np.ndarray:
        """Adjacent triangles per edge, ``-1`` in column 1 on the boundary."""
        return self._edge_data[2]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edge_tris[:, 1] < 0

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.edges[self.boundary_edges].ravel()] = True
        return mask

    # -- geometry ------------------------------------------------------------

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_area(self.vertices, self.triangles)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def edge_normals(self) -> np.ndarray:
        """Unit normals, fixed per edge: the tangent from lower to higher vertex id turned clockwise."""
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        d = d / self.edge_lengths[:, None]
        return np.stack([d[:, 1], -d[:, 0]], axis=1)

    @cached_property
    def h(self) -> np.ndarray:
        """Longest edge per triangle."""
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @cached_property
    def min_angles(self) -> np.ndarray:
        """Smallest interior angle per triangle in radians."""
        P = self.vertices[self.triangles]
        out = np.full(self.n_triangles, np.inf)
        for i in range(3):
            a = P[:, (i + 1) % 3] - P[:, i]
            b = P[:, (i + 2) % 3] - P[:, i]
            cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out = np.minimum(out, np.arccos(np.clip(cos, -1, 1)))
        return out

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)


def _signed_area(V, tri) -> np.ndarray:
    a, b, c = V[tri[:, 0]], V[tri[:, 1]], V[tri[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


@dataclass
class RefinementMap:
    """Relation between a mesh and its refinement.

    Attributes
    ----------
    parent : ndarray (T_new,)
        Triangle of the coarse mesh containing each new triangle.
    generation : ndarray (T_new,)
        Bisection count from the root of each new triangle.
    new_vertices : ndarray
        Ids of the midpoints created by the refinement.
    """

    parent: np.ndarray
    generation: np.ndarray
    new_vertices: np.ndarray

    def children(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.parent == t)

    @property
    def refined(self) -> np.ndarray:
        """Coarse triangles that were split."""
        counts = np.bincount(self.parent)
        return np.flatnonzero(counts > 1)


def compose_parents(*parents) -> np.ndarray:
    """Ancestor map across several refinement steps (coarsest first)."""
    out = np.asarray(parents[-1])
    for p in reversed(parents[:-1]):
        out = np.asarray(p)[out]
    return out


def bisect(mesh: Mesh2D, marked) -> tuple[Mesh2D, RefinementMap]:
    """Newest-vertex bisection of the marked triangles with conforming closure.

    Each marked triangle is bisected at least once.  The closure marks the
    refinement edge of every triangle that has any marked edge; triangles
    are then split into 2, 3 or 4 children.
    """
    marked = np.unique(np.asarray(list(marked) if not isinstance(marked, np.ndarray) else marked, dtype=np.int64))
    T = mesh.triangles
    n_tri = len(T)
    if marked.size == 0:
        same = Mesh2D(mesh.vertices, T, mesh.root, mesh.generation)
        return same, RefinementMap(np.arange(n_tri), mesh.generation.copy(), np.zeros(0, dtype=np.int64))
    if marked.min() < 0 or marked.max() >= n_tri:
        raise IndexError("marked triangle id out of range")
    te = mesh.tri_edges
    em = np.zeros(mesh.n_edges, dtype=bool)
    em[te[marked, 0]] = True
    while True:
        need = em[te].any(axis=1) & ~em[te[:, 0]]
        if not need.any():
            break
        em[te[need, 0]] = True

    V = mesh.vertices
    medges = np.flatnonzero(em)
    mid = np.full(mesh.n_edges, -1, dtype=np.int64)
    mid[medges] = len(V) + np.arange(len(medges))
    e = mesh.edges[medges]
    newV = np.vstack([V, 0.5 * (V[e[:, 0]] + V[e[:, 1]])])

    v0, v1, v2 = T[:, 0], T[:, 1], T[:, 2]
    m0, m1, m2 = mid[te[:, 0]], mid[te[:, 1]], mid[te[:, 2]]
    ids = np.arange(n_tri)
    ref = m0 >= 0
    sA = ref & (m2 >= 0)
    sB = ref & (m1 >= 0)
    pieces = [
        (ids[~ref], 0, 0, T[~ref]),
        (ids[ref & ~sA], 0, 1, np.stack([m0, v0, v1], 1)[ref & ~sA]),
        (ids[sA], 0, 2, np.stack([m2, m0, v0], 1)[sA]),
        (ids[sA], 1, 2, np.stack([m2, v1, m0], 1)[sA]),
        (ids[ref & ~sB], 2, 1, np.stack([m0, v2, v0], 1)[ref & ~sB]),
        (ids[sB], 2, 2, np.stack([m1, m0, v2], 1)[sB]),
        (ids[sB], 3, 2, np.stack([m1, v0, m0], 1)[sB]),
    ]
    parent = np.concatenate([p[0] for p in pieces])
    slot = np.concatenate([np.full(len(p[0]), p[1]) for p in pieces])
    depth = np.concatenate([np.full(len(p[0]), p[2]) for p in pieces])
    tris = np.concatenate([p[3] for p in pieces]).reshape(-1, 3)
    order = np.lexsort((slot, parent))
    parent, depth, tris = parent[order], depth[order], tris[order]
    gen = mesh.generation[parent] + depth
    new = Mesh2D(newV, tris, mesh.root[parent], gen)
    return new, RefinementMap(parent, gen, mid[medges])


def uniform_refine(mesh: Mesh2D, levels: int = 1, return_parents: bool = False):
    """Bisect every triangle ``levels`` times (with closure).

    With ``return_parents`` the ancestor of every fine triangle in ``mesh``
    is returned as well.
    """
    if levels < 0:
        raise ValueError("levels must be nonnegative")
    anc = np.arange(mesh.n_triangles)
    for _ in range(levels):
        mesh, rmap = bisect(mesh, np.arange(mesh.n_triangles))
        anc = anc[rmap.parent]
    return (mesh, anc) if return_parents else mesh


def edge_jump_frame(mesh: Mesh2D, edge: int):
    """Adjacent triangles, unit normal and length of an interior edge.

    The jump of ``xi`` over the edge is ``(xi|_T - xi|_T') . n`` with
    ``(T, T')`` the returned pair.
    """
    t0, t1 = mesh.edge_tris[edge]
    if t1 < 0:
        raise BoundaryEdge(f"edge {edge} lies on the domain boundary")
    return (int(t0), int(t1)), mesh.edge_normals[edge].copy(), float(mesh.edge_lengths[edge])


def audit_conformity(mesh: Mesh2D) -> int:
    """Number of hanging nodes (vertices at the midpoint of some edge)."""
    mids = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    key = lambda P: {tuple(r) for r in np.round(P, 12)}  # noqa: E731
    return len(key(mids) & key(mesh.vertices))


# ---------------------------------------------------------------------------
# initial meshes
# ---------------------------------------------------------------------------


def _structured(nx: int, ny: int, keep_square, h: float) -> Mesh2D:
    """Squares of a grid split along the rising diagonal, right angles newest."""
    vid = -np.ones((nx + 1, ny + 1), dtype=np.int64)
    tris = []
    for i in range(nx):
        for j in range(ny):
            if keep_square(i, j):
                for a, b in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)]:
                    vid[a, b] = 0
    coords = np.argwhere(vid == 0)
    vid[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    for i in range(nx):
        for j in range(ny):
            if keep_square(i, j):
                tris.append((vid[i + 1, j], vid[i + 1, j + 1], vid[i, j]))
                tris.append((vid[i, j + 1], vid[i, j], vid[i + 1, j + 1]))
    return Mesh2D(coords * h, np.array(tris))


def initial_lshape(h0: float = 0.1) -> Mesh2D:
    """L-shape ``(0,1)^2`` minus ``[0.5,1]^2`` on a uniform grid of width about ``h0``."""
    if h0 <= 0:
        raise ValueError("h0 must be positive")
    half = max(1, int(round(0.5 / h0)))
    n = 2 * half
    return _structured(n, n, lambda i, j: not (i >= half and j >= half), 1.0 / n)


def unit_square(h0: float = 0.25) -> Mesh2D:
    if h0 <= 0:
        raise ValueError("h0 must be positive")
    n = max(1, int(round(1.0 / h0)))
    return _structured(n, n, lambda i, j: True, 1.0 / n)


def reference_triangle() -> Mesh2D:
    return Mesh2D(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))


def initial_mesh(domain: str, h0: float) -> Mesh2D:
    if domain == "lshape":
        return initial_lshape(h0)
    if domain == "unit-square":
        return unit_square(h0)
    raise ValueError(f"unknown domain {domain!r}")


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------


def mesh_to_text(mesh: Mesh2D) -> str:
    lines = [str(mesh.n_vertices)]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines.append(str(mesh.n_triangles))
    lines += [f"{a} {b} {c} 0" for a, b, c in mesh.triangles]
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> Mesh2D:
    tok = text.split("\n")
    tok = [t for t in tok if t.strip()]
    nv = int(tok[0])
    V = np.array([[float(v) for v in t.split()] for t in tok[1 : 1 + nv]])
    nt = int(tok[1 + nv])
    rows = np.array([[int(v) for v in t.split()] for t in tok[2 + nv : 2 + nv + nt]], dtype=np.int64)
    tri = np.empty((nt, 3), dtype=np.int64)
    for k, (a, b, c, e) in enumerate(rows):
        tri[k] = np.roll([a, b, c], -e)
    return Mesh2D(V, tri)


def save_mesh(mesh: Mesh2D, path) -> None:
    Path(path).write_text(mesh_to_text(mesh))


def load_mesh(path) -> Mesh2D:
    return mesh_from_text(Path(path).read_text())
