"""Lagrange finite elements on triangles: reference basis, quadrature, dof maps.

The reference triangle has vertices (0,0), (1,0), (0,1).  Local vertex
``i`` of a mesh triangle maps to reference vertex ``i``.
"""

from __future__ import annotations

from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi, roots_legendre

from .mesh import Mesh2D

# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def triangle_quadrature(degree: int):
    """Collapsed Gauss rule on the reference triangle, exact for ``degree``.

    Returns points (n, 2) and weights summing to the reference area 1/2.
    """
    n = max(1, -(-(degree + 1) // 2))
    xs, ws = roots_jacobi(n, 1.0, 0.0)
    s = 0.5 * (1 + xs)
    ws = ws / 4.0
    xt, wt = roots_legendre(n)
    t = 0.5 * (1 + xt)
    wt = wt / 2.0
    S, Tt = np.meshgrid(s, t, indexing="ij")
    pts = np.stack([S.ravel(), ((1 - S) * Tt).ravel()], axis=1)
    w = np.outer(ws, wt).ravel()
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


@lru_cache(maxsize=64)
def line_quadrature(degree: int):
    """Gauss-Legendre on [0, 1] exact for ``degree``."""
    n = max(1, -(-(degree + 1) // 2))
    x, w = roots_legendre(n)
    return 0.5 * (1 + x), 0.5 * w


# ---------------------------------------------------------------------------
# reference element
# ---------------------------------------------------------------------------


class LagrangeElement:
    """Nodal Lagrange basis of order ``p`` on the reference triangle.

    Node order: vertices, then ``p-1`` nodes per local edge (edge ``i`` runs
    from local vertex ``i+1`` to ``i+2``), then interior nodes.
    """

    def __init__(self, p: int):
        if p < 0:
            raise ValueError("order must be nonnegative")
        self.p = p
        self.nodes = self._nodes(p)
        self.n = len(self.nodes)
        self.exponents = [(a, b) for s in range(p + 1) for a in range(s, -1, -1) for b in [s - a]]
        V = self._monomials(self.nodes)
        self.coef = np.linalg.inv(V)

    @staticmethod
    def _nodes(p):
        if p == 0:
            return np.array([[1 / 3, 1 / 3]])
        vert = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        pts = [vert]
        s = np.arange(1, p) / p
        for i in range(3):
            a, b = vert[(i + 1) % 3], vert[(i + 2) % 3]
            pts.append(a + s[:, None] * (b - a))
        inner = [(i / p, j / p) for j in range(1, p) for i in range(1, p) if i + j < p]
        if inner:
            pts.append(np.array(inner))
        return np.vstack(pts)

    def _monomials(self, x, dx=0, dy=0):
        x = np.atleast_2d(x)
        out = np.zeros((len(x), len(self.exponents)))
        for k, (a, b) in enumerate(self.exponents):
            if a < dx or b < dy:
                continue
            ca = np.prod(np.arange(a - dx + 1, a + 1)) if dx else 1.0
            cb = np.prod(np.arange(b - dy + 1, b + 1)) if dy else 1.0
            out[:, k] = ca * cb * x[:, 0] ** (a - dx) * x[:, 1] ** (b - dy)
        return out

    def values(self, x) -> np.ndarray:
        """Basis values (n_points, n)."""
        return self._monomials(x) @ self.coef

    def gradients(self, x) -> np.ndarray:
        """Reference gradients (n_points, n, 2)."""
        return np.stack([self._monomials(x, 1, 0) @ self.coef, self._monomials(x, 0, 1) @ self.coef], axis=-1)

    def hessians(self, x) -> np.ndarray:
        """Reference Hessians (n_points, n, 2, 2)."""
        xx = self._monomials(x, 2, 0) @ self.coef
        xy = self._monomials(x, 1, 1) @ self.coef
        yy = self._monomials(x, 0, 2) @ self.coef
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)


@lru_cache(maxsize=16)
def lagrange(p: int) -> LagrangeElement:
    return LagrangeElement(p)


# ---------------------------------------------------------------------------
# global space
# ---------------------------------------------------------------------------


class FESpace:
    """Continuous Lagrange space of order ``p`` with homogeneous Dirichlet data.

    Attributes
    ----------
    elem_dofs : ndarray (T, n_loc)
        Global dof ids per triangle in reference node order.
    free : ndarray
        Ids of dofs not on the boundary.
    """

    def __init__(self, mesh: Mesh2D, p: int = 1):
        if p < 1:
            raise ValueError("FE order must be >= 1")
        self.mesh = mesh
        self.p = p
        self.element = lagrange(p)
        self._build_dofs()

    def _build_dofs(self):
        mesh, p = self.mesh, self.p
        N, E, T = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        ne = p - 1
        ni = (p - 1) * (p - 2) // 2
        tri = mesh.triangles
        cols = [tri]
        for i in range(3):
            e = mesh.tri_edges[:, i]
            start = tri[:, (i + 1) % 3]
            end = tri[:, (i + 2) % 3]
            k = np.arange(ne)
            fwd = N + e[:, None] * ne + k[None, :]
            bwd = N + e[:, None] * ne + (ne - 1 - k)[None, :]
            cols.append(np.where((start < end)[:, None], fwd, bwd))
        if ni:
            cols.append(N + E * ne + np.arange(T)[:, None] * ni + np.arange(ni)[None, :])
        self.elem_dofs = np.hstack(cols).astype(np.int64)
        self.n_dofs = N + E * ne + T * ni
        bnd = np.zeros(self.n_dofs, dtype=bool)
        bnd[:N] = mesh.boundary_vertices
        be = np.flatnonzero(mesh.boundary_edges)
        if ne:
            bnd[(N + be[:, None] * ne + np.arange(ne)[None, :]).ravel()] = True
        self.boundary = bnd
        self.free = np.flatnonzero(~bnd)
        self.free_index = np.full(self.n_dofs, -1, dtype=np.int64)
        self.free_index[self.free] = np.arange(len(self.free))

    @property
    def n_free(self) -> int:
        return len(self.free)

    # -- element geometry --------------------------------------------------

    @cached_property
    def B(self) -> np.ndarray:
        """Affine maps ``x = x0 + B xi`` per triangle, (T, 2, 2)."""
        P = self.mesh.vertices[self.mesh.triangles]
        return np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=-1)

    @cached_property
    def x0(self) -> np.ndarray:
        return self.mesh.vertices[self.mesh.triangles[:, 0]]

    @cached_property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.B)

    @cached_property
    def Binv(self) -> np.ndarray:
        return np.linalg.inv(self.B)

    @cached_property
    def coords(self) -> np.ndarray:
        """Physical coordinates of all dofs."""
        X = np.empty((self.n_dofs, 2))
        pts = self.map_points(np.arange(self.mesh.n_triangles), self.element.nodes)
        X[self.elem_dofs.ravel()] = pts.reshape(-1, 2)
        return X

    def map_points(self, tris, xi) -> np.ndarray:
        """Physical points of reference points ``xi`` (n, 2) on triangles ``tris``; (len(tris), n, 2)."""
        return self.x0[tris][:, None, :] + np.einsum("tij,nj->tni", self.B[tris], xi)

    def to_reference(self, tris, x) -> np.ndarray:
        """Reference coordinates of physical points ``x`` (len(tris), n, 2)."""
        return np.einsum("tij,tnj->tni", self.Binv[tris], x - self.x0[tris][:, None, :])

    def physical_gradients(self, ref_grads, tris=None) -> np.ndarray:
        """Map reference gradients (..., 2) with leading triangle axis to physical ones."""
        Binv = self.Binv if tris is None else self.Binv[tris]
        return np.einsum("tji,t...j->t...i", Binv, ref_grads)

    # -- functions -----------------------------------------------------------

    def full(self, u_free) -> np.ndarray:
        """Extend free-dof values (n_free, ...) by zeros on the boundary."""
        u_free = np.asarray(u_free)
        out = np.zeros((self.n_dofs,) + u_free.shape[1:], dtype=u_free.dtype)
        out[self.free] = u_free
        return out

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of a callable ``fn(x) -> values`` for points (n, 2)."""
        return np.asarray(fn(self.coords), dtype=float)

    def laplace_matrix(self) -> sp.csr_matrix:
        """Unit-coefficient stiffness matrix on all dofs."""
        qp, qw = triangle_quadrature(2 * self.p - 2)
        return stiffness_matrix(self, np.ones((self.mesh.n_triangles, len(qw))), qp, qw)


def stiffness_matrix(space: FESpace, coef_at_qp, qp=None, qw=None) -> sp.csr_matrix:
    """Stiffness matrix on all dofs with coefficient values at quadrature points.

    Parameters
    ----------
    coef_at_qp : ndarray (T, n_q)
        Coefficient at the points ``qp`` of each triangle.
    qp, qw : ndarray
        Reference quadrature points and weights.
    """
    el = space.element
    G = space.physical_gradients(np.broadcast_to(el.gradients(qp), (space.mesh.n_triangles,) + el.gradients(qp).shape))
    wq = qw[None, :] * np.abs(space.det)[:, None] * coef_at_qp
    Ke = np.einsum("tq,tqid,tqjd->tij", wq, G, G)
    return _assemble(space, Ke)


def _assemble(space: FESpace, Ke) -> sp.csr_matrix:
    dofs = space.elem_dofs
    n = dofs.shape[1]
    rows = np.repeat(dofs, n, axis=1).ravel()
    cols = np.tile(dofs, (1, n)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs)).tocsr()
    K.sum_duplicates()
    return K


def prolongation(coarse: FESpace, fine: FESpace, ancestors) -> sp.csr_matrix:
    """Nodal interpolation from ``coarse`` to ``fine`` as a sparse matrix.

    Parameters
    ----------
    ancestors : ndarray (T_fine,)
        Coarse triangle containing each fine triangle.
    """
    ancestors = np.asarray(ancestors)
    dofs, first = np.unique(fine.elem_dofs.ravel(), return_index=True)
    t_f, i_f = np.divmod(first, fine.elem_dofs.shape[1])
    pts = fine.map_points(t_f, fine.element.nodes)[np.arange(len(t_f)), i_f]
    t_c = ancestors[t_f]
    xi = coarse.to_reference(t_c, pts[:, None, :])[:, 0, :]
    vals = coarse.element.values(xi)
    cols = coarse.elem_dofs[t_c]
    vals[np.abs(vals) < 1e-13] = 0.0
    rows = np.repeat(dofs, cols.shape[1])
    P = sp.coo_matrix((vals.ravel(), (rows, cols.ravel())), shape=(fine.n_dofs, coarse.n_dofs)).tocsr()
    P.eliminate_zeros()
    return P
