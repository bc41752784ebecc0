"""Residual error estimator for the stochastic Galerkin discretization.

The residual coefficients are

``r_mu = sum_{k, beta} psi_k(x) a_N[k, .] w_N[., beta] tau(beta, ., mu) grad(phi)``

with ``psi_k`` the nodal basis of the coefficient space.  Because the nodal
chaos coefficients factor as ``scale_k prod_m A_m[k, alpha_m]``, the
stochastic contraction at a node is a Kronecker product of small per-mode
matrices ``S^m_k[beta, mu] = sum_alpha A_m[k, alpha] tau(beta, alpha, mu)``.

All weighted norms ``|| sum_mu v_mu P_mu zeta ||_{pi_0}`` are evaluated
exactly, either through the doubly orthogonal transform (``sum_nu c_nu^2
|sum_mu v_mu z_{mu nu}|^2``) or through the equivalent per-mode Gram
matrices of ``P_k zeta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .chaos import ChaosBasis, MultiIndexSet, box_indices, gauss_hermite, lookahead_slab, triple_product_table
from .fe import FESpace, lagrange, line_quadrature, triangle_quadrature
from .field import DiscreteCoefficient

CHUNK_FLOATS = 2e7


class IndexNotInBoundary(ValueError):
    """Index subset is not contained in the boundary of the active set."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _kron_apply(Y, box, mats):
    """Apply per-mode matrices ``mats[m]`` (n_m x n'_m) to the trailing box axis of ``Y``."""
    lead = Y.shape[:-1]
    L = len(lead)
    Y = Y.reshape(lead + tuple(box))
    for m, A in enumerate(mats):
        if A is None:
            continue
        Y = np.moveaxis(np.tensordot(Y, A, axes=([L + m], [0])), -1, L + m)
    return Y.reshape(lead + (-1,))


def _coupling_tables(coeff: DiscreteCoefficient, dims, box, skip=()):
    """Per-mode nodal tables ``S^m[c, beta, mu]`` for ``beta < d_m``, ``mu < n_m``.

    Modes with ``d_m = n_m = 1`` reduce to the scalar ``A_m[c, 0]`` and are
    folded into the returned nodal scalar.  Modes in ``skip`` are left out
    entirely (neither table nor scalar).
    """
    scalar = coeff.scale.copy()
    tables = []
    for m, (A, d, n) in enumerate(zip(coeff.factors, dims, box)):
        if m in skip:
            tables.append(None)
            continue
        if d == 1 and n == 1:
            scalar = scalar * A[:, 0]
            tables.append(None)
            continue
        na = min(A.shape[1], d + n - 1)
        tau = triple_product_table(d, na, n)
        tables.append(np.einsum("ca,bam->cbm", A[:, :na], tau))
    return scalar, tables


def _couple(X, cnodes, scalar, tables, dims, box):
    """Rowwise stochastic contraction: X (R, |Lambda_d|) at coefficient nodes ``cnodes`` -> (R, |box|)."""
    R = X.shape[0]
    Y = X * scalar[cnodes][:, None]
    cur = list(dims)
    for m, S in enumerate(tables):
        if S is None:
            continue
        d, n = cur[m], box[m]
        pre = int(np.prod(cur[:m]))
        post = int(np.prod(cur[m + 1:]))
        Z = Y.reshape(R, pre, d, post).transpose(0, 2, 1, 3).reshape(R, d, pre * post)
        Z = np.matmul(S[cnodes].transpose(0, 2, 1), Z)
        Y = Z.reshape(R, n, pre, post).transpose(0, 2, 1, 3).reshape(R, -1)
        cur[m] = n
    return Y


def _chunks(n, per_item):
    size = max(1, int(CHUNK_FLOATS // max(per_item, 1)))
    for start in range(0, n, size):
        yield np.arange(start, min(n, start + size))


def _line_lagrange(nodes, s):
    """1D Lagrange basis on ``nodes`` evaluated at ``s``; (len(s), len(nodes))."""
    out = np.ones((len(s), len(nodes)))
    for i, xi in enumerate(nodes):
        for j, xj in enumerate(nodes):
            if i != j:
                out[:, i] *= (s - xj) / (xi - xj)
    return out


def _as_quad_values(f, pts):
    """Values of a constant or callable source at points (..., 2)."""
    if f is None:
        return np.zeros(pts.shape[:-1])
    if callable(f):
        return np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:-1])
    return np.full(pts.shape[:-1], float(f))


class _Context:
    """Geometry and gradient data shared by all estimator parts."""

    def __init__(self, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, W):
        self.space = space
        self.coeff = coeff
        self.cspace = coeff.space
        self.dims = lam.padded(coeff.n_modes)
        self.lam = MultiIndexSet(self.dims)
        W = np.asarray(W, dtype=float).reshape(space.n_free, self.lam.size)
        self.W = space.full(W)
        self.anc = coeff.ancestors(space.mesh)
        self.cnodes = self.cspace.elem_dofs[self.anc]  # (T, n_psi)
        self.n_psi = self.cnodes.shape[1]
        p = space.p
        self.chi = lagrange(p - 1)
        self.n_l = self.chi.n
        self.qdeg = 2 * (self.cspace.p + p - 1)

    # -- gradients of w at the chi nodes ------------------------------------

    def grad_lap(self, tris) -> np.ndarray:
        """``(grad w, lap w)`` at the chi nodes: (len(tris), n_l, 3, |Lambda|)."""
        sp_, el = self.space, self.space.element
        xi = self.chi.nodes
        g = sp_.physical_gradients(np.broadcast_to(el.gradients(xi), (len(tris),) + el.gradients(xi).shape), tris)
        Wl = self.W[sp_.elem_dofs[tris]]  # (t, n_phi, L)
        out = np.empty((len(tris), len(xi), 3, Wl.shape[-1]))
        out[:, :, :2] = np.einsum("tlid,tib->tldb", g, Wl)
        if sp_.p >= 2:
            BB = np.einsum("tia,tja->tij", sp_.Binv[tris], sp_.Binv[tris])
            lap = np.einsum("lnij,tij->tln", el.hessians(xi), BB)
            out[:, :, 2] = np.einsum("tln,tnb->tlb", lap, Wl)
        else:
            out[:, :, 2] = 0.0
        return out

    def coupled(self, data, tris, scalar, tables, box):
        """Contract data (t, ..., |Lambda|) at each local coefficient node: (t, n_psi, ..., |box|)."""
        t = len(tris)
        inner = data.shape[1:-1]
        rows = int(np.prod(inner))
        X = data.reshape(t * rows, -1)
        out = np.empty((t, self.n_psi) + inner + (int(np.prod(box)),))
        for k in range(self.n_psi):
            c = np.repeat(self.cnodes[tris, k], rows)
            out[:, k] = _couple(X, c, scalar, tables, self.dims, box).reshape((t,) + inner + (-1,))
        return out

    def psi_at(self, tris, x):
        """Coefficient basis values and physical gradients at physical points x (t, q, 2)."""
        cs = self.cspace
        a = self.anc[tris]
        xi = cs.to_reference(a, x)
        shp = xi.shape[:-1]
        vals = cs.element.values(xi.reshape(-1, 2)).reshape(shp + (-1,))
        grads = cs.element.gradients(xi.reshape(-1, 2)).reshape(shp + (-1, 2))
        return vals, cs.physical_gradients(grads, a)


# ---------------------------------------------------------------------------
# residual coefficients
# ---------------------------------------------------------------------------


@dataclass
class ResidualModes:
    """Element-wise representation of ``r_mu`` for ``mu`` in a box of indices.

    ``data[t, k, l, :, mu]`` holds the contracted ``(grad w, lap w)`` at
    coefficient node ``k`` and gradient node ``l`` of triangle ``t``.
    """

    ctx: _Context
    box: tuple
    data: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return box_indices(self.box)

    def values(self, tris, xi) -> np.ndarray:
        """``r_mu`` at reference points ``xi`` (n, 2) of triangles ``tris``; (t, n, 2, |box|)."""
        ctx = self.ctx
        tris = np.asarray(tris)
        x = ctx.space.map_points(tris, xi)
        psi, _ = ctx.psi_at(tris, x)
        chi = ctx.chi.values(xi)
        return np.einsum("tqk,ql,tkldb->tqdb", psi, chi, self.data[tris][:, :, :, :2])

    def divergence(self, tris, xi) -> np.ndarray:
        """``div r_mu`` at reference points; (t, n, |box|)."""
        ctx = self.ctx
        tris = np.asarray(tris)
        x = ctx.space.map_points(tris, xi)
        psi, dpsi = ctx.psi_at(tris, x)
        chi = ctx.chi.values(xi)
        D = self.data[tris]
        return np.einsum("tqkd,ql,tkldb->tqb", dpsi, chi, D[:, :, :, :2]) + np.einsum(
            "tqk,ql,tklb->tqb", psi, chi, D[:, :, :, 2]
        )


def residual_modes(W, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, box=None) -> ResidualModes:
    """Residual coefficients ``r_mu`` for all ``mu`` in ``box`` (default ``Lambda_{d + dhat - 1}``)."""
    ctx = _Context(space, coeff, lam, W)
    if box is None:
        box = tuple(d + dh - 1 for d, dh in zip(ctx.dims, coeff.dhat))
    box = tuple(int(b) for b in box) + (1,) * (coeff.n_modes - len(box))
    scalar, tables = _coupling_tables(coeff, ctx.dims, box)
    tris = np.arange(space.mesh.n_triangles)
    data = ctx.coupled(ctx.grad_lap(tris), tris, scalar, tables, box)
    return ResidualModes(ctx, box, data)


# ---------------------------------------------------------------------------
# explicit evaluation over an index subset
# ---------------------------------------------------------------------------


def _subset_box(indices, n_modes):
    idx = np.atleast_2d(np.asarray(indices, dtype=int))
    if idx.shape[1] < n_modes:
        idx = np.hstack([idx, np.zeros((len(idx), n_modes - idx.shape[1]), dtype=int)])
    elif idx.shape[1] > n_modes:
        if np.any(idx[:, n_modes:] != 0):
            raise ValueError("index uses modes beyond the coefficient")
        idx = idx[:, :n_modes]
    box = tuple(int(v) + 1 for v in idx.max(axis=0)) if len(idx) else (1,) * n_modes
    mask = np.zeros(int(np.prod(box)), dtype=bool)
    if len(idx):
        mask[np.ravel_multi_index(tuple(idx.T), box)] = True
    return box, mask


def _transforms(basis: ChaosBasis, box):
    return [basis.transform(m, n).Z * basis.transform(m, n).c[None, :] for m, n in enumerate(box)]


def explicit_parts(W, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, basis: ChaosBasis,
                   box, mask, f=None, parts=("vol", "jump", "l2")) -> dict:
    """Per-element squared norms of the residual restricted to ``box[mask]``.

    Returns a dict with any of
    ``vol``: ``h_T^2 ||sum_mu (f delta_mu0 + div r_mu) P_mu zeta||^2_{pi_0, T}``,
    ``jump``: ``h_T sum_{E in dT interior} ||sum_mu [r_mu] P_mu zeta||^2_{pi_0, E}``,
    ``l2``: ``||sum_mu r_mu P_mu zeta||^2_{pi_0, T}``.
    """
    ctx = _Context(space, coeff, lam, W)
    box = tuple(int(b) for b in box)
    mask = np.asarray(mask, dtype=bool)
    scalar, tables = _coupling_tables(coeff, ctx.dims, box)
    ZC = _transforms(basis, box)
    nb = int(np.prod(box))
    mesh = space.mesh
    T = mesh.n_triangles
    h = mesh.h
    out = {}
    qp, qw = triangle_quadrature(ctx.qdeg)
    chi_q = ctx.chi.values(qp)
    with_f = f is not None and mask[0]
    if "vol" in parts or "l2" in parts:
        vol = np.zeros(T)
        l2 = np.zeros(T)
        per = ctx.n_psi * ctx.n_l * 3 * nb + len(qw) * 3 * nb * 2
        for tris in _chunks(T, per):
            D = ctx.coupled(ctx.grad_lap(tris), tris, scalar, tables, box) * mask
            x = space.map_points(tris, qp)
            psi, dpsi = ctx.psi_at(tris, x)
            wq = qw[None, :] * np.abs(space.det[tris])[:, None]
            if "l2" in parts:
                r = np.einsum("tqk,ql,tkldb->tqdb", psi, chi_q, D[:, :, :, :2])
                Q = _kron_apply(r, box, ZC)
                l2[tris] = np.einsum("tq,tqdb->t", wq, Q**2)
            if "vol" in parts:
                div = np.einsum("tqkd,ql,tkldb->tqb", dpsi, chi_q, D[:, :, :, :2]) + np.einsum(
                    "tqk,ql,tklb->tqb", psi, chi_q, D[:, :, :, 2]
                )
                res = div  # strong residual f + div(a grad w)
                if with_f:
                    res[:, :, 0] += _as_quad_values(f, x)
                Q = _kron_apply(res, box, ZC)
                vol[tris] = h[tris] ** 2 * np.einsum("tq,tqb->t", wq, Q**2)
        if "vol" in parts:
            out["vol"] = vol
        if "l2" in parts:
            out["l2"] = l2
    if "jump" in parts:
        out["jump"] = _jumps(ctx, scalar, tables, box, mask, ZC)
    return out


def _jumps(ctx: _Context, scalar, tables, box, mask, ZC) -> np.ndarray:
    space = ctx.space
    mesh = space.mesh
    el = space.element
    interior = np.flatnonzero(~mesh.boundary_edges)
    jump = np.zeros(mesh.n_triangles)
    if len(interior) == 0:
        return jump
    p = space.p
    s_l = np.sort(line_quadrature(2 * p - 1)[0])  # p distinct points on [0, 1]
    sq, wq = line_quadrature(ctx.qdeg)
    chi_q = _line_lagrange(s_l, sq)
    nb = int(np.prod(box))
    per = ctx.n_psi * p * nb * 2 + len(wq) * nb * 3
    for sel in _chunks(len(interior), per):
        e = interior[sel]
        t1, t2 = mesh.edge_tris[e, 0], mesh.edge_tris[e, 1]
        a, b = mesh.vertices[mesh.edges[e, 0]], mesh.vertices[mesh.edges[e, 1]]
        n = mesh.edge_normals[e]
        xl = a[:, None, :] + s_l[None, :, None] * (b - a)[:, None, :]
        g = 0.0
        for t, sgn in ((t1, 1.0), (t2, -1.0)):
            xi = space.to_reference(t, xl)
            G = el.gradients(xi.reshape(-1, 2)).reshape(xi.shape[:2] + (el.n, 2))
            G = space.physical_gradients(G, t)
            gn = np.einsum("elid,ed->eli", G, n)
            g = g + sgn * np.einsum("eli,eib->elb", gn, ctx.W[space.elem_dofs[t]])
        D = ctx.coupled(g, t1, scalar, tables, box) * mask  # (e, k, l, box)
        xq = a[:, None, :] + sq[None, :, None] * (b - a)[:, None, :]
        psi, _ = ctx.psi_at(t1, xq)
        J = np.einsum("eqk,ql,eklb->eqb", psi, chi_q, D)
        Q = _kron_apply(J, box, ZC)
        ej = mesh.edge_lengths[e] * np.einsum("q,eqb->e", wq, Q**2)
        np.add.at(jump, t1, ej)
        np.add.at(jump, t2, ej)
    return jump * mesh.h


# ---------------------------------------------------------------------------
# public estimator parts
# ---------------------------------------------------------------------------


@dataclass
class DetEstimate:
    """Deterministic estimator: per-element volume and jump parts and the total."""

    volume: np.ndarray
    jump: np.ndarray

    @property
    def per_element(self) -> np.ndarray:
        return np.sqrt(self.volume**2 + self.jump**2)

    @property
    def total(self) -> float:
        return float(np.sqrt(np.sum(self.volume**2) + np.sum(self.jump**2)))


def eta_det(W, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, basis: ChaosBasis, f=1.0,
            restrict=None) -> DetEstimate:
    """Volume and jump indicators over ``Lambda_d`` or an index subset ``restrict``."""
    dims = lam.padded(coeff.n_modes)
    if restrict is None:
        box, mask = dims, np.ones(int(np.prod(dims)), dtype=bool)
    else:
        box, mask = _subset_box(restrict, coeff.n_modes)
    parts = explicit_parts(W, space, coeff, lam, basis, box, mask, f=f, parts=("vol", "jump"))
    return DetEstimate(np.sqrt(parts["vol"]), np.sqrt(parts["jump"]))


def boundary_contains(lam: MultiIndexSet, dhat, indices) -> bool:
    idx = np.atleast_2d(np.asarray(indices, dtype=int))
    n = max(lam.M, len(dhat), idx.shape[1])
    d = np.asarray(lam.padded(n))
    dh = np.asarray(tuple(dhat) + (1,) * (n - len(dhat)))
    idx = np.hstack([idx, np.zeros((len(idx), n - idx.shape[1]), dtype=int)])
    inside = np.all(idx < d, axis=1)
    outer = np.all((idx >= 0) & (idx < d + dh - 1), axis=1)
    return bool(np.all(outer & ~inside))


def eta_sto(W, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, basis: ChaosBasis,
            delta=None) -> float:
    """``||sum_{mu in delta} r_mu P_mu zeta||_{pi_0, D}``; ``delta=None`` means the whole boundary."""
    if delta is None:
        return float(np.sqrt(max(_boundary_sq(W, space, coeff, lam, basis), 0.0)))
    delta = np.atleast_2d(np.asarray(delta, dtype=int))
    if delta.size == 0:
        return 0.0
    if not boundary_contains(lam, coeff.dhat, delta):
        raise IndexNotInBoundary("index subset is not contained in the boundary of the active set")
    box, mask = _subset_box(delta, coeff.n_modes)
    l2 = explicit_parts(W, space, coeff, lam, basis, box, mask, parts=("l2",))["l2"]
    return float(np.sqrt(l2.sum()))


def eta_sto_explicit_boundary(W, space, coeff, lam, basis) -> float:
    """Whole-boundary ``eta_sto`` through the explicit path (small instances)."""
    dims = lam.padded(coeff.n_modes)
    box = tuple(d + dh - 1 for d, dh in zip(dims, coeff.dhat))
    inside = np.all(box_indices(box) < np.asarray(dims), axis=1)
    l2 = explicit_parts(W, space, coeff, lam, basis, box, ~inside, parts=("l2",))["l2"]
    return float(np.sqrt(l2.sum()))


def slab_box(lam: MultiIndexSet, n_modes: int, mode: int, q: int, cap: int):
    """Box and mask of the look-ahead slab of depth ``q`` in direction ``mode``."""
    lookahead_slab(lam, mode, q, cap)  # validates q
    dims = list(lam.padded(n_modes))
    box = list(dims)
    box[mode] = dims[mode] + q
    idx = box_indices(box)
    return tuple(box), idx[:, mode] >= dims[mode]


def eta_slabs(W, space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, basis: ChaosBasis, q) -> np.ndarray:
    """``eta_sto`` on each per-mode look-ahead slab."""
    M = coeff.n_modes
    q = np.broadcast_to(np.asarray(q, dtype=int), (M,))
    out = np.zeros(M)
    for m in range(M):
        box, mask = slab_box(lam, M, m, int(q[m]), coeff.dhat[m])
        l2 = explicit_parts(W, space, coeff, lam, basis, box, mask, parts=("l2",))["l2"]
        out[m] = np.sqrt(l2.sum())
    return out


# ---------------------------------------------------------------------------
# structured whole-boundary evaluation
# ---------------------------------------------------------------------------


def _boundary_sq(W, space, coeff, lam, basis) -> float:
    """``eta_sto(w, boundary)^2`` without materializing the boundary.

    The boundary ``Lambda_{d + dhat - 1} minus Lambda_d`` is split into
    disjoint product pieces.  Piece 0 has the active part outside
    ``Lambda_d`` and all inactive modes free.  Piece ``j`` (one per inactive
    mode) has the active part in ``Lambda_d``, earlier inactive modes at 0,
    mode ``j`` at least 1 and later inactive modes free.

    For two coefficient nodes ``k, k'`` the weighted inner product of the
    contracted gradients is ``w^T (x_m F^m_{kk'}) w'`` with
    ``F^m_{kk'} = S^m_k D G2^m D' (S^m_{k'})^T``, ``D, D'`` per-mode masks and
    ``G2^m`` the Gram matrix of ``P_j zeta``.  Only ``d_m x d_m`` matrices
    are applied to the coefficient tensor.  Inactive modes (``d_m = 1``)
    contribute scalars ``A_m[k]^T D G2^m D' A_m[k']`` per node pair.
    """
    ctx = _Context(space, coeff, lam, W)
    dims = ctx.dims
    M = coeff.n_modes
    act = [m for m in range(M) if dims[m] > 1]
    ina = [m for m in range(M) if dims[m] == 1]
    adofs = ctx.cspace.elem_dofs  # (n_anc, K)
    K = ctx.n_psi

    # active modes: node-pair matrices per ancestor for mask pairs (in, in), (in, all), (all, all)
    F = {}
    for m in act:
        d = dims[m]
        n = d + coeff.dhat[m] - 1
        A = coeff.factors[m]
        na = min(A.shape[1], d + n - 1)
        S = np.einsum("ca,bam->cbm", A[:, :na], triple_product_table(d, na, n))[adofs]
        G2 = basis.gram(m, n)
        Sin = S.copy()
        Sin[..., d:] = 0.0
        F[m, "ii"] = np.einsum("akbi,ij,alcj->aklbc", Sin, G2, Sin)
        F[m, "ia"] = np.einsum("akbi,ij,alcj->aklbc", Sin, G2, S)
        F[m, "aa"] = np.einsum("akbi,ij,alcj->aklbc", S, G2, S)

    # inactive modes: node-pair scalars per ancestor for the piece masks
    Q = {}
    for m in ina:
        A = coeff.factors[m][adofs]  # (n_anc, K, dhat)
        n = A.shape[-1]
        G2 = basis.gram(m, n)
        kinds = {"all": np.ones(n), "zero": np.eye(n)[0], "pos": 1.0 - np.eye(n)[0]}
        for ka, kb in product(kinds, repeat=2):
            Q[m, ka, kb] = np.einsum("aki,ij,alj->akl", A * kinds[ka], G2, A * kinds[kb])
    # with no active mode the outside piece is empty; keeping it would only add rounding noise
    pieces = [("o", {m: "all" for m in ina})] if act else []
    for j_pos, j in enumerate(ina):
        if coeff.dhat[j] < 2:
            continue
        kinds = {m: ("zero" if i < j_pos else "pos" if i == j_pos else "all") for i, m in enumerate(ina)}
        pieces.append(("i", kinds))
    scale = ctx.coeff.scale[adofs]
    H = {uv: np.zeros((len(adofs), K, K)) for uv in ("ii", "io", "oi", "oo")}
    for (ua, ka), (ub, kb) in product(pieces, repeat=2):
        h = scale[:, :, None] * scale[:, None, :]
        for m in ina:
            h = h * Q[m, ka[m], kb[m]]
        H[ua + ub] += h
    C = {
        "ii": H["ii"] - H["io"] - H["oi"] + H["oo"],
        "ia": H["io"] - H["oo"],
        "ai": H["oi"] - H["oo"],
        "aa": H["oo"],
    }

    qp, qw = triangle_quadrature(ctx.qdeg)
    chi_q = ctx.chi.values(qp)
    n_l = ctx.n_l
    L = ctx.lam.size
    T = space.mesh.n_triangles
    total = 0.0
    for tris in _chunks(T, 3 * K * K * n_l * 2 * L):
        t = len(tris)
        a = ctx.anc[tris]
        w = ctx.grad_lap(tris)[:, :, :2].reshape(t, n_l * 2, L)
        E = {}
        for key in ("ii", "ia", "aa"):
            V = np.broadcast_to(w[:, None, None], (t, K, K, n_l * 2, L)).reshape(t * K * K, n_l * 2, L)
            R = V.shape[1]
            for m in act:
                d = dims[m]
                pre = int(np.prod(dims[:m]))
                post = L // (pre * d)
                Fm = F[m, key][a].reshape(t * K * K, d, d)
                Z = V.reshape(-1, R, pre, d, post).transpose(0, 3, 1, 2, 4).reshape(-1, d, R * pre * post)
                Z = np.matmul(Fm, Z)
                V = Z.reshape(-1, d, R, pre, post).transpose(0, 2, 3, 1, 4).reshape(-1, R, L)
            V = V.reshape(t, K, K, n_l, 2, L)
            E[key] = np.einsum("tldb,tkmjdb->tkmlj", w.reshape(t, n_l, 2, L), V)
        E["ai"] = E["ia"].transpose(0, 2, 1, 4, 3)
        x = space.map_points(tris, qp)
        psi, _ = ctx.psi_at(tris, x)
        wq = qw[None, :] * np.abs(space.det[tris])[:, None]
        Mt = np.einsum("tq,tqk,tql,tqm,tqj->tkmlj", wq, psi, np.broadcast_to(chi_q, (t,) + chi_q.shape),
                       psi, np.broadcast_to(chi_q, (t,) + chi_q.shape), optimize=True)
        for key in ("ii", "ia", "ai", "aa"):
            total += float(np.einsum("tkmlj,tkm,tkmlj->", Mt, C[key][a], E[key], optimize=True))
    return total


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EstimatorReport:
    """All estimator contributions of one iterate."""

    det: DetEstimate
    eta_sto: float
    slabs: np.ndarray
    c_eq: float
    extra: dict = field(default_factory=dict)

    @property
    def eta_det(self) -> float:
        return self.det.total

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.eta_det**2 + self.c_eq**2 * self.eta_sto**2))


def eta_total(det: DetEstimate, sto: float, c_eq: float, slabs=None) -> EstimatorReport:
    if c_eq <= 0:
        raise ValueError("c_eq must be positive")
    slabs = np.zeros(0) if slabs is None else np.asarray(slabs, dtype=float)
    return EstimatorReport(det, float(sto), slabs, float(c_eq))


def estimate(W, space, coeff, lam, basis, f=1.0, q=1, c_eq=5.0) -> EstimatorReport:
    """Deterministic part, whole-boundary stochastic part and slab values."""
    det = eta_det(W, space, coeff, lam, basis, f=f)
    sto = eta_sto(W, space, coeff, lam, basis)
    slabs = eta_slabs(W, space, coeff, lam, basis, q)
    return eta_total(det, sto, c_eq, slabs)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass
class LipschitzDiagnostic:
    c_det: float
    c_sto: float
    mode_norms: list


def lipschitz_diagnostic(lam: MultiIndexSet, coeff: DiscreteCoefficient, basis: ChaosBasis) -> LipschitzDiagnostic:
    """Separable proxy of the Lipschitz constants ``c(Lambda_d)`` and ``c(boundary)``.

    ``||a_alpha||_inf`` is bounded by ``prod_m max_j |A_m[j, alpha_m]|``
    (times the largest nodal scale), which makes every sum factor over modes.
    With ``s_m(beta) = sum_{mu, alpha} a^m_alpha |tau(alpha, beta, mu)| ||P_mu zeta||``
    the active constant is ``prod_m sum_beta s_m(beta)^2``; the boundary sum
    is the box sum minus the ``Lambda_d`` sum.
    """
    dims = lam.padded(coeff.n_modes)
    sup = [np.abs(A).max(axis=0) for A in coeff.factors]
    smax = float(np.abs(coeff.scale).max())
    prod_in, prod_box, prod_mix = smax**2, smax**2, smax**2
    norms = []
    for m, (d, dh) in enumerate(zip(dims, coeff.dhat)):
        n = d + dh - 1
        nrm = np.sqrt(np.diag(basis.gram(m, n)))
        norms.append(nrm)
        tau = np.abs(triple_product_table(dh, d, n))  # (alpha, beta, mu)
        s_box = np.einsum("a,abm,m->b", sup[m], tau, nrm)
        s_in = np.einsum("a,abm,m->b", sup[m], tau[:, :, :d], nrm[:d])
        prod_in *= np.sum(s_in**2)
        prod_box *= np.sum(s_box**2)
        prod_mix *= np.sum(s_box * s_in)
    c_sto_sq = prod_box - 2 * prod_mix + prod_in
    return LipschitzDiagnostic(float(np.sqrt(prod_in)), float(np.sqrt(max(c_sto_sq, 0.0))), norms)


def additivity_terms(W, space, coeff, lam, basis, delta, n_gh: int | None = None):
    """Terms of the quasi-additivity inequality for ``delta`` inside the boundary.

    Returns ``(defect, bound)`` with
    ``defect = |eta(bd)^2 - eta(delta)^2 - eta(bd minus delta)^2|`` and
    ``bound = 2 ||zeta^2 - zeta||_{pi_0} ||g_delta . g_rest||_{pi_0, D} max(1, |D|)^(1/2)``,
    the product norm evaluated by tensor Gauss-Hermite quadrature in ``y``.
    Intended for instances with few modes.
    """
    dims = lam.padded(coeff.n_modes)
    M = coeff.n_modes
    box = tuple(d + dh - 1 for d, dh in zip(dims, coeff.dhat))
    idx = box_indices(box)
    bd = ~np.all(idx < np.asarray(dims), axis=1)
    d_box, d_mask = _subset_box(delta, M)
    in_delta = np.zeros(len(idx), dtype=bool)
    sub = box_indices(d_box)[d_mask]
    if len(sub):
        in_delta[np.ravel_multi_index(tuple(sub.T), box)] = True
    if np.any(in_delta & ~bd):
        raise IndexNotInBoundary("index subset is not contained in the boundary of the active set")
    rest = bd & ~in_delta

    def sq(mask):
        return explicit_parts(W, space, coeff, lam, basis, box, mask, parts=("l2",))["l2"].sum()

    defect = abs(sq(bd) - sq(in_delta) - sq(rest))
    # product norm by quadrature in y (standard Gaussian) and x
    n_gh = n_gh or int(2 * max(box) + 2)
    rm = residual_modes(W, space, coeff, lam, box)
    qp, qw = triangle_quadrature(rm.ctx.qdeg)
    tris = np.arange(space.mesh.n_triangles)
    r = rm.values(tris, qp)  # (t, q, 2, box)
    wx = qw[None, :] * np.abs(space.det)[:, None]
    y1, w1 = gauss_hermite(n_gh, 1.0)
    Y = np.array(list(product(y1, repeat=M)))
    Wy = np.prod(np.array(list(product(w1, repeat=M))), axis=1)
    P = basis.evaluate(idx, Y)  # (Ny, box)
    total = 0.0
    for s in _chunks(len(Y), r.size // max(len(idx), 1) * 2):
        gd = np.einsum("tqdb,yb->ytqd", r * in_delta, P[s])
        gr = np.einsum("tqdb,yb->ytqd", r * rest, P[s])
        prod_ = np.sum(gd * gr, axis=-1)
        total += float(np.einsum("y,tq,ytq->", Wy[s], wx, prod_**2))
    area = float(np.sum(space.mesh.areas))
    bound = 2 * basis.zeta_defect() * np.sqrt(total) * np.sqrt(max(1.0, area))
    return float(defect), float(bound)
