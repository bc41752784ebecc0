"""Stochastic Galerkin system for the discretized lognormal coefficient.

Discrete functions on ``V_N(Lambda_d; T, p)`` are stored as coefficient
tensors of shape ``(n_free, |Lambda_d|)``: rows are the free FE dofs, columns
the multi-indices of ``Lambda_d`` in lexicographic order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .chaos import MultiIndexSet, triple_product_table
from .fe import FESpace, _assemble, prolongation, triangle_quadrature
from .field import DiscreteCoefficient


class NoConvergence(RuntimeError):
    """Iterative solve did not reach the requested tolerance."""

    def __init__(self, maxit, residual):
        super().__init__(f"no convergence after {maxit} iterations (relative residual {residual:.3e})")
        self.maxit = maxit
        self.residual = residual


def coefficient_weights(space: FESpace, cspace: FESpace, ancestors, degree: int) -> np.ndarray:
    """``C[t, k, i, j] = int_t psi_k grad(phi_i) . grad(phi_j)``.

    ``psi_k`` is the ``k``-th nodal basis function of the coefficient space
    on the ancestor of triangle ``t``; ``phi`` are the local basis functions of
    ``space``.  The quadrature is exact for ``degree``.
    """
    qp, qw = triangle_quadrature(degree)
    T = space.mesh.n_triangles
    tris = np.arange(T)
    xq = space.map_points(tris, qp)
    xi = cspace.to_reference(ancestors, xq)
    psi = cspace.element.values(xi.reshape(-1, 2)).reshape(T, len(qw), -1)
    g = space.element.gradients(qp)
    G = space.physical_gradients(np.broadcast_to(g, (T,) + g.shape))
    w = qw[None, :] * np.abs(space.det)[:, None]
    return np.einsum("tq,tqk,tqid,tqjd->tkij", w, psi, G, G, optimize=True)


def assemble_stiffness(space: FESpace, a_mode, cspace: FESpace | None = None, ancestors=None) -> sp.csr_matrix:
    """Stiffness matrix of a nodal coefficient on the free dofs.

    Parameters
    ----------
    a_mode : ndarray
        Nodal values in ``cspace`` (defaults to ``space`` itself).
    cspace, ancestors : optional
        Coefficient space on a coarser mesh and the coarse triangle holding
        each triangle of ``space.mesh``.
    """
    if cspace is None:
        cspace, ancestors = space, np.arange(space.mesh.n_triangles)
    C = coefficient_weights(space, cspace, ancestors, cspace.p + 2 * space.p - 2)
    a_loc = np.asarray(a_mode, dtype=float)[cspace.elem_dofs[ancestors]]
    K = _assemble(space, np.einsum("tk,tkij->tij", a_loc, C))
    return K[space.free][:, space.free].tocsr()


def assemble_rhs(space: FESpace, f, lam: MultiIndexSet, n_modes: int | None = None) -> np.ndarray:
    """Load tensor ``b[j, mu] = delta_{mu 0} int f phi_j`` on the free dofs.

    ``f`` is a constant or a callable of points (n, 2).
    """
    n_modes = lam.M if n_modes is None else n_modes
    b = np.zeros((space.n_free, lam.size))
    qp, qw = triangle_quadrature(2 * space.p + 2)
    T = space.mesh.n_triangles
    if callable(f):
        fq = np.asarray(f(space.map_points(np.arange(T), qp).reshape(-1, 2)), dtype=float).reshape(T, -1)
    else:
        fq = np.full((T, len(qw)), float(f))
    phi = space.element.values(qp)
    loc = np.einsum("tq,q,qi->ti", fq * np.abs(space.det)[:, None], qw, phi)
    full = np.bincount(space.elem_dofs.ravel(), loc.ravel(), minlength=space.n_dofs)
    b[:, 0] = full[space.free]
    return b


class GalerkinOperator:
    """Matrix-free action of the stochastic Galerkin matrix.

    The coefficient is nodal on a coefficient mesh whose triangles contain
    those of the solution mesh.  Solution dofs are grouped into patches, one
    per (coefficient triangle, dof) pair, and the action reads

    ``Y = sum_k K_k W (S^1_k x ... x S^M_k)``

    where ``k`` runs over the local coefficient nodes, ``K_k`` is the
    patch-local stiffness matrix weighted with the nodal basis function
    ``psi_k`` and ``S^m_k[beta, mu] = sum_alpha A_m[k, alpha] tau(beta, alpha, mu)``
    contracts the rank-one nodal chaos factors with the triple products.

    Parameters
    ----------
    space : FESpace
    coeff : DiscreteCoefficient
    lam : MultiIndexSet
        ``Lambda_d``; padded with ones to the number of coefficient modes.
    """

    def __init__(self, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet):
        self.space = space
        self.coeff = coeff
        self.dims = lam.padded(coeff.n_modes)
        if len(self.dims) > coeff.n_modes:
            raise ValueError("index set has more modes than the coefficient")
        self.lam = MultiIndexSet(self.dims)
        self.ancestors = coeff.ancestors(space.mesh)
        cspace = coeff.space
        self.C = coefficient_weights(space, cspace, self.ancestors, cspace.p + 2 * space.p - 2)
        self._build_patches()
        self._build_coupling()

    @property
    def shape(self):
        return (self.space.n_free, self.lam.size)

    def _build_patches(self):
        space = self.space
        nf = space.n_free
        fi = space.free_index[space.elem_dofs]
        key = self.ancestors[:, None].astype(np.int64) * nf + fi
        mask = fi >= 0
        uniq, inv = np.unique(key[mask], return_inverse=True)
        pidx = np.full(fi.shape, -1, dtype=np.int64)
        pidx[mask] = inv
        self.patch_free = uniq % nf
        patch_anc = uniq // nf
        P = len(uniq)
        self.n_patch = P
        both = mask[:, :, None] & mask[:, None, :]
        t, i, j = np.nonzero(both)
        rows, cols = pidx[t, i], pidx[t, j]
        nk = self.C.shape[1]
        self.K = [
            sp.csr_matrix((self.C[t, k, i, j], (rows, cols)), shape=(P, P)) for k in range(nk)
        ]
        for K in self.K:
            K.sum_duplicates()
        self.patch_cnode = self.coeff.space.elem_dofs[patch_anc]  # (P, nk)
        self.R = sp.csr_matrix((np.ones(P), (self.patch_free, np.arange(P))), shape=(nf, P))

    def _build_coupling(self):
        coeff = self.coeff
        scalar = coeff.scale.copy()
        self.active = []
        self.S = {}
        for m, (A, d) in enumerate(zip(coeff.factors, self.dims)):
            if d == 1:
                scalar = scalar * A[:, 0]
                continue
            na = min(A.shape[1], 2 * d - 1)
            tau = triple_product_table(d, na, d)
            self.active.append(m)
            self.S[m] = np.einsum("ca,bam->cbm", A[:, :na], tau)
        self.scalar = scalar

    # -- action ----------------------------------------------------------

    def _coupling(self, X, cnodes):
        """Apply ``scalar_c * (x_m S^m_c)`` rowwise; X has shape (P, |Lambda|)."""
        P = X.shape[0]
        Y = X * self.scalar[cnodes][:, None]
        for m in self.active:
            d = self.dims[m]
            pre = int(np.prod(self.dims[:m]))
            post = self.lam.size // (pre * d)
            Z = Y.reshape(P, pre, d, post).transpose(0, 2, 1, 3).reshape(P, d, pre * post)
            St = self.S[m][cnodes].transpose(0, 2, 1)
            Z = np.matmul(St, Z)
            Y = Z.reshape(P, d, pre, post).transpose(0, 2, 1, 3).reshape(P, -1)
        return Y

    def apply(self, W) -> np.ndarray:
        """Galerkin matrix times a coefficient tensor (n_free, |Lambda|)."""
        W = np.asarray(W, dtype=float).reshape(self.shape)
        Xp = W[self.patch_free]
        out = np.zeros((self.n_patch, self.lam.size))
        for k, K in enumerate(self.K):
            out += K @ self._coupling(Xp, self.patch_cnode[:, k])
        return self.R @ out

    __matmul__ = apply

    def diag(self) -> np.ndarray:
        """Diagonal of the Galerkin matrix as a tensor (n_free, |Lambda|)."""
        out = np.zeros((self.n_patch, self.lam.size))
        idx = self.lam.indices()
        for k, K in enumerate(self.K):
            c = self.patch_cnode[:, k]
            s = np.broadcast_to(self.scalar[c][:, None], out.shape).copy()
            for m in self.active:
                dm = np.einsum("cbb->cb", self.S[m])[c]
                s *= dm[:, idx[:, m]]
            out += K.diagonal()[:, None] * s
        return self.R @ out

    def to_dense(self) -> np.ndarray:
        """Explicit matrix in the flattened (dof-major) ordering; small instances only."""
        n = self.space.n_free * self.lam.size
        return np.column_stack([self.apply(e).ravel() for e in np.eye(n)])

    def energy(self, W) -> float:
        """``B(w, w)``."""
        W = np.asarray(W, dtype=float).reshape(self.shape)
        return float(np.sum(W * self.apply(W)))

    # -- preconditioner ----------------------------------------------------

    @cached_property
    def mean_coefficient(self) -> np.ndarray:
        """Nodal ``a_0`` including all modes."""
        return self.coeff.mean()

    @cached_property
    def mean_stiffness(self) -> sp.csr_matrix:
        return assemble_stiffness(self.space, self.mean_coefficient, self.coeff.space, self.ancestors)

    @cached_property
    def _mean_lu(self):
        return spla.splu(self.mean_stiffness.tocsc())

    def precondition(self, R) -> np.ndarray:
        """Apply the inverse mean stiffness to every stochastic column."""
        R = np.asarray(R, dtype=float).reshape(self.shape)
        return self._mean_lu.solve(R)


@dataclass
class SolveInfo:
    iterations: int
    residual: float


def solve(op: GalerkinOperator, rhs, tol: float = 1e-10, maxit: int = 10000, x0=None,
          precondition: bool = True, return_info: bool = False):
    """Preconditioned CG for the Galerkin system.

    Returns the coefficient tensor (and a :class:`SolveInfo`).  Raises
    :class:`NoConvergence` if the relative Euclidean residual exceeds
    ``tol`` after ``maxit`` iterations.
    """
    rhs = np.asarray(rhs, dtype=float).reshape(op.shape)
    n = rhs.size
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0:
        out = np.zeros(op.shape)
        return (out, SolveInfo(0, 0.0)) if return_info else out
    A = spla.LinearOperator((n, n), matvec=lambda v: op.apply(v).ravel(), dtype=float)
    M = None
    if precondition:
        M = spla.LinearOperator((n, n), matvec=lambda v: op.precondition(v).ravel(), dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = spla.cg(A, rhs.ravel(), x0=None if x0 is None else np.ravel(x0), rtol=tol, atol=0.0,
                      maxiter=maxit, M=M, callback=cb)
    res = np.linalg.norm(rhs.ravel() - A @ x) / bnorm
    if info != 0 and res > tol:
        raise NoConvergence(maxit, res)
    x = x.reshape(op.shape)
    return (x, SolveInfo(count[0], float(res))) if return_info else x


def prolongate_tensor(P: sp.spmatrix, W, old: MultiIndexSet, new: MultiIndexSet, n_modes: int) -> np.ndarray:
    """Spatial prolongation ``P`` (free-to-free) and zero padding from ``old`` to ``new``."""
    od, nd = old.padded(n_modes), new.padded(n_modes)
    if any(a > b for a, b in zip(od, nd)):
        raise ValueError("index sets are not nested")
    W = P @ np.asarray(W).reshape(-1, old.size)
    out = np.zeros((W.shape[0],) + nd)
    out[(slice(None),) + tuple(slice(0, d) for d in od)] = W.reshape((-1,) + od)
    return out.reshape(W.shape[0], -1)


def free_prolongation(coarse: FESpace, fine: FESpace, ancestors) -> sp.csr_matrix:
    """Nodal interpolation restricted to free dofs on both sides."""
    P = prolongation(coarse, fine, ancestors)
    return P[fine.free][:, coarse.free].tocsr()
