import math

import numpy as np
import pytest

from sgfem.chaos import ChaosBasis, ModeScaling, MultiIndexSet
from sgfem.estimator import (
    DetEstimate,
    IndexNotInBoundary,
    additivity_terms,
    estimate,
    eta_det,
    eta_slabs,
    eta_sto,
    eta_sto_explicit_boundary,
    eta_total,
    lipschitz_diagnostic,
    residual_modes,
)
from sgfem.fe import FESpace, triangle_quadrature
from sgfem.field import benchmark_modes, expand_lognormal, zero_field
from sgfem.galerkin import GalerkinOperator, assemble_rhs, solve
from sgfem.mesh import bisect, initial_lshape, uniform_refine, unit_square
from sgfem.oracles import hermite_quadrature, orthonormal_hermite


def setup(M=1, dims=(2,), dhat=(2,), theta=0.3, p=1, h0=0.5, boost=1.5, refine=False, seed=0):
    field = benchmark_modes(M)
    sc = ModeScaling(field.gamma_sup * boost, 1.0, theta)
    mesh = unit_square(h0)
    coeff = expand_lognormal(field, sc, dhat, mesh, 2)
    if refine:
        mesh, _ = bisect(mesh, [0, 3])
    sp = FESpace(mesh, p)
    lam = MultiIndexSet(dims)
    W = np.random.default_rng(seed).standard_normal((sp.n_free, lam.size))
    return sp, coeff, lam, ChaosBasis(coeff.sigma), W


def pointwise_flux(sp, coeff, lam, W, tris, xi, y):
    """``a_N(x, y) grad w_N(x, y)`` at reference points ``xi`` of ``tris`` for rows of ``y``.

    Uses the nodal coefficient realization and hand-evaluated Hermite
    polynomials only (solution mesh equals coefficient mesh).
    """
    M = coeff.n_modes
    idx = lam.indices(M)
    s2 = coeff.sigma**2
    P = np.ones((len(y), len(idx)))
    for m in range(M):
        for j, k in enumerate(idx[:, m]):
            P[:, j] *= orthonormal_hermite(int(k), y[:, m], s2[m])
    Wf = sp.full(W)
    out = np.zeros((len(y), len(tris), len(xi), 2))
    psi = coeff.space.element.values(xi)
    G = sp.element.gradients(xi)
    for i, t in enumerate(tris):
        a = coeff.realization(y)[:, coeff.space.elem_dofs[t]] @ psi.T  # (ny, nq)
        g = sp.physical_gradients(G[None], np.array([t]))[0]  # (nq, nloc, 2)
        wt = Wf[sp.elem_dofs[t]] @ P.T  # (nloc, ny)
        out[:, i] = a[:, :, None] * np.einsum("qld,ly->yqd", g, wt)
    return out


# --- residual modes -----------------------------------------------------------------


def test_residual_modes_unit_coefficient():
    field = zero_field(2)
    sc = ModeScaling(field.gamma_sup, 1.0, 0.3)
    mesh = unit_square(0.5)
    coeff = expand_lognormal(field, sc, (3, 2), mesh, 1)
    sp = FESpace(mesh, 2)
    lam = MultiIndexSet((2, 2))
    W = np.random.default_rng(0).standard_normal((sp.n_free, lam.size))
    rm = residual_modes(W, sp, coeff, lam)
    xi = np.array([[0.2, 0.3], [0.6, 0.1]])
    tris = np.arange(mesh.n_triangles)
    r = rm.values(tris, xi)
    Wf = sp.full(W)
    G = sp.physical_gradients(np.broadcast_to(sp.element.gradients(xi), (len(tris),) + sp.element.gradients(xi).shape), tris)
    grad = np.einsum("tqld,tlb->tqdb", G, Wf[sp.elem_dofs])
    idx = rm.indices
    inside = np.all(idx < 2, axis=1)
    assert np.allclose(r[..., inside], grad, atol=1e-13)
    assert np.all(np.abs(r[..., ~inside]) <= 1e-13)
    assert np.all(residual_modes(np.zeros_like(W), sp, coeff, lam).data == 0)


def test_residual_modes_vs_hermite_quadrature():
    sp, coeff, lam, basis, W = setup(M=1, dims=(2,), dhat=(2,), p=2)
    W *= 0.1
    rm = residual_modes(W, sp, coeff, lam)
    rng = np.random.default_rng(3)
    tris = rng.integers(0, sp.mesh.n_triangles, 10)
    xi = rng.dirichlet([1, 1, 1], 10)[:, :2]
    s2 = coeff.sigma[0] ** 2
    y, w = hermite_quadrature(20, s2)
    for t, x in zip(tris, xi):
        flux = pointwise_flux(sp, coeff, lam, W, [t], x[None], y[:, None])[:, 0, 0]  # (ny, 2)
        got = rm.values([t], x[None])[0, 0]  # (2, box)
        for mu in range(rm.box[0]):
            ref = np.sum(w[:, None] * flux * orthonormal_hermite(mu, y, s2)[:, None], axis=0)
            assert np.allclose(got[:, mu], ref, atol=1e-10)


# --- deterministic part -----------------------------------------------------------


def classical_p1_estimator(mesh, u, f=1.0):
    """Textbook residual estimator for ``-lap u = f`` with P1 ``u`` (nodal values, zero boundary)."""
    V = mesh.vertices
    grads = np.zeros((mesh.n_triangles, 2))
    for t, tri in enumerate(mesh.triangles):
        P = V[tri]
        A = np.array([P[1] - P[0], P[2] - P[0]])
        grads[t] = np.linalg.solve(A, [u[tri[1]] - u[tri[0]], u[tri[2]] - u[tri[0]]])
    h = np.array([max(np.linalg.norm(V[tri[i]] - V[tri[j]]) for i, j in ((0, 1), (1, 2), (2, 0))) for tri in mesh.triangles])
    vol = h**2 * f**2 * mesh.areas
    jump = np.zeros(mesh.n_triangles)
    for e, (t1, t2) in enumerate(mesh.edge_tris):
        if t2 < 0:
            continue
        a, b = V[mesh.edges[e]]
        n = np.array([b[1] - a[1], a[0] - b[0]]) / np.linalg.norm(b - a)
        j2 = ((grads[t1] - grads[t2]) @ n) ** 2 * np.linalg.norm(b - a)
        jump[t1] += h[t1] * j2
        jump[t2] += h[t2] * j2
    return vol, jump


@pytest.mark.parametrize("mesh", [unit_square(1.0), uniform_refine(unit_square(1.0), 2), initial_lshape(0.25)])
def test_eta_det_reduces_to_classical(mesh):
    field = zero_field(1)
    coeff = expand_lognormal(field, ModeScaling(field.gamma_sup, 1.0, 0.0), (1,), mesh, 1)
    sp = FESpace(mesh, 1)
    lam = MultiIndexSet((1,))
    W = np.random.default_rng(1).standard_normal((sp.n_free, 1))
    est = eta_det(W, sp, coeff, lam, ChaosBasis(coeff.sigma), f=1.0)
    vol, jump = classical_p1_estimator(mesh, sp.full(W)[:, 0])
    assert np.allclose(est.volume**2, vol, rtol=1e-12, atol=1e-14)
    assert np.allclose(est.jump**2, jump, rtol=1e-12, atol=1e-14)
    assert est.total**2 == pytest.approx(np.sum(vol) + np.sum(jump), rel=1e-12)


def test_eta_det_zero_residual():
    # u = x(1-x)y(1-y) lies in P4 with zero boundary values and f = -lap u
    field = zero_field(1)
    mesh = unit_square(0.5)
    coeff = expand_lognormal(field, ModeScaling(field.gamma_sup, 1.0, 0.0), (1,), mesh, 1)
    sp = FESpace(mesh, 4)
    u = sp.interpolate(lambda X: X[:, 0] * (1 - X[:, 0]) * X[:, 1] * (1 - X[:, 1]))
    f = lambda X: 2 * X[:, 1] * (1 - X[:, 1]) + 2 * X[:, 0] * (1 - X[:, 0])
    est = eta_det(u[sp.free][:, None], sp, coeff, MultiIndexSet((1,)), ChaosBasis(coeff.sigma), f=f)
    assert est.total <= 1e-12
    # zero data and zero iterate
    sp1 = FESpace(mesh, 1)
    z = eta_det(np.zeros((sp1.n_free, 1)), sp1, coeff, MultiIndexSet((1,)), ChaosBasis(coeff.sigma), f=0.0)
    assert z.total == 0.0


def test_det_estimate_sums():
    d = DetEstimate(np.array([1.0, 2.0]), np.array([2.0, 0.5]))
    assert d.total**2 == pytest.approx(np.sum(d.per_element**2), rel=1e-15)
    assert d.total**2 == pytest.approx(1 + 4 + 4 + 0.25)


def test_jump_dominates_volume_for_p1():
    field = benchmark_modes(2)
    sc = ModeScaling(field.gamma_sup, 1.0, 0.1)
    mesh = initial_lshape(0.1)
    coeff = expand_lognormal(field, sc, (6, 4), mesh, 3)
    sp = FESpace(mesh, 1)
    op = GalerkinOperator(sp, coeff, MultiIndexSet((1,)))
    U = solve(op, assemble_rhs(sp, 1.0, op.lam))
    est = eta_det(U, sp, coeff, op.lam, ChaosBasis(coeff.sigma))
    assert est.total > 0
    assert np.sum(est.jump**2) > np.sum(est.volume**2)


# --- stochastic part ----------------------------------------------------------------


def test_eta_sto_trivial_cases():
    field = zero_field(2)
    mesh = unit_square(0.5)
    coeff = expand_lognormal(field, ModeScaling(field.gamma_sup, 1.0, 0.3), (3, 3), mesh, 1)
    sp = FESpace(mesh, 1)
    lam = MultiIndexSet((2, 1))
    basis = ChaosBasis(coeff.sigma)
    W = np.random.default_rng(0).standard_normal((sp.n_free, lam.size))
    assert eta_sto(W, sp, coeff, lam, basis) == 0.0
    assert eta_sto(W, sp, coeff, lam, basis, delta=[[2, 0], [0, 1]]) == 0.0
    sp, coeff, lam, basis, W = setup(M=2, dims=(2, 1), dhat=(3, 2))
    assert eta_sto(W, sp, coeff, lam, basis, delta=np.zeros((0, 2), dtype=int)) == 0.0
    with pytest.raises(IndexNotInBoundary):
        eta_sto(W, sp, coeff, lam, basis, delta=[[1, 0]])
    with pytest.raises(IndexNotInBoundary):
        eta_sto(W, sp, coeff, lam, basis, delta=[[4, 0]])


def _zeta_sq_quadrature(sigma, n):
    # int g zeta^2 dpi_0 = sqrt(v) / sigma^2 E_v[g] with v = sigma^2 / (2 - sigma^2)
    v = sigma**2 / (2 - sigma**2)
    y, w = hermite_quadrature(n, v)
    return y, w * math.sqrt(v) / sigma**2


@pytest.mark.parametrize("theta", [0.0, 0.3])
@pytest.mark.parametrize("p", [1, 2])
def test_eta_sto_vs_quadrature_1d(theta, p):
    sp, coeff, lam, basis, W = setup(M=1, dims=(2,), dhat=(2,), theta=theta, p=p)
    s2 = coeff.sigma[0] ** 2
    yq, wq = hermite_quadrature(20, s2)
    qp, qw = triangle_quadrature(2 * (coeff.space.p + p - 1))
    tris = np.arange(sp.mesh.n_triangles)
    flux = pointwise_flux(sp, coeff, lam, W, tris, qp, yq[:, None])  # (ny, t, q, 2)
    box = 3
    r = np.stack([np.einsum("y,ytqd->tqd", wq * orthonormal_hermite(mu, yq, s2), flux) for mu in range(box)], -1)
    wx = qw[None, :] * np.abs(sp.det)[:, None]
    yz, wz = _zeta_sq_quadrature(coeff.sigma[0], 30)
    Pz = np.stack([orthonormal_hermite(mu, yz, s2) for mu in range(box)], -1)
    for delta in ([[2]], None):
        mus = [2]
        g = np.einsum("tqdb,yb->ytqd", r[..., mus], Pz[:, mus])
        ref = math.sqrt(np.einsum("y,tq,ytqd->", wz, wx, g**2))
        assert eta_sto(W, sp, coeff, lam, basis, delta=delta) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("p", [1, 2])
@pytest.mark.parametrize("dims", [(2, 1, 1), (2, 2, 1), (1, 1, 1), (3, 2, 2)])
def test_structured_boundary_matches_explicit(dims, p):
    sp, coeff, lam, basis, W = setup(M=3, dims=dims, dhat=(3, 2, 3), p=p, refine=True)
    a = eta_sto(W, sp, coeff, lam, basis)
    b = eta_sto_explicit_boundary(W, sp, coeff, lam, basis)
    assert a == pytest.approx(b, rel=1e-10)


def test_slabs():
    sp, coeff, lam, basis, W = setup(M=2, dims=(2, 1), dhat=(3, 3))
    s = eta_slabs(W, sp, coeff, lam, basis, 1)
    assert s[0] == pytest.approx(eta_sto(W, sp, coeff, lam, basis, delta=[[2, 0]]), rel=1e-12)
    assert s[1] == pytest.approx(eta_sto(W, sp, coeff, lam, basis, delta=[[0, 1], [1, 1]]), rel=1e-12)
    s2 = eta_slabs(W, sp, coeff, lam, basis, [2, 1])
    assert s2[0] >= s[0]
    with pytest.raises(ValueError):
        eta_slabs(W, sp, coeff, lam, basis, 0)


# --- totals -----------------------------------------------------------------------


def test_eta_total():
    det = DetEstimate(np.array([3.0]), np.array([0.0]))
    assert eta_total(det, 4.0, 5.0).eta == pytest.approx(math.sqrt(409))
    assert eta_total(det, 0.0, 5.0).eta == pytest.approx(3.0)
    with pytest.raises(ValueError):
        eta_total(det, 1.0, 0.0)
    sp, coeff, lam, basis, W = setup(M=2, dims=(2, 1), dhat=(3, 3))
    rep = estimate(W, sp, coeff, lam, basis, q=1, c_eq=5.0)
    assert rep.eta**2 == pytest.approx(rep.eta_det**2 + 25 * rep.eta_sto**2, rel=1e-14)
    assert len(rep.slabs) == 2


# --- quasi additivity -------------------------------------------------------------


def test_additivity_exact_without_weight():
    sp, coeff, lam, basis, W = setup(M=2, dims=(2, 1), dhat=(3, 2), theta=0.0)
    d1 = [[2, 0], [3, 0]]
    d2 = [[0, 1], [1, 1]]
    e1 = eta_sto(W, sp, coeff, lam, basis, delta=d1)
    e2 = eta_sto(W, sp, coeff, lam, basis, delta=d2)
    e12 = eta_sto(W, sp, coeff, lam, basis, delta=d1 + d2)
    assert e1**2 + e2**2 == pytest.approx(e12**2, rel=1e-12)
    defect, _ = additivity_terms(W, sp, coeff, lam, basis, d1)
    assert defect <= 1e-12 * eta_sto(W, sp, coeff, lam, basis) ** 2


@pytest.mark.parametrize("seed", range(3))
def test_additivity_bound_weighted(seed):
    sp, coeff, lam, basis, W = setup(M=2, dims=(2, 1), dhat=(3, 2), theta=0.2, boost=1.0, seed=seed)
    for delta in ([[2, 0]], [[0, 1], [1, 1]], [[3, 0], [0, 1]]):
        defect, bound = additivity_terms(W, sp, coeff, lam, basis, delta)
        assert defect <= bound * (1 + 1e-10)
    with pytest.raises(IndexNotInBoundary):
        additivity_terms(W, sp, coeff, lam, basis, [[0, 0]])


# --- Lipschitz diagnostics -------------------------------------------------------


def test_lipschitz_unit_coefficient():
    field = zero_field(2)
    coeff = expand_lognormal(field, ModeScaling(field.gamma_sup, 1.0, 0.0), (3, 3), unit_square(0.5), 1)
    basis = ChaosBasis(coeff.sigma)
    for dims in [(1, 1), (2, 3), (4, 1)]:
        lam = MultiIndexSet(dims)
        assert lipschitz_diagnostic(lam, coeff, basis).c_det ** 2 == pytest.approx(lam.size, rel=1e-12)


def test_lipschitz_monotone_and_norms():
    field = benchmark_modes(2)
    coeff = expand_lognormal(field, ModeScaling(field.gamma_sup, 1.0, 0.3), (4, 3), unit_square(0.5), 1)
    basis = ChaosBasis(coeff.sigma)
    c = [lipschitz_diagnostic(MultiIndexSet(d), coeff, basis).c_det for d in [(1, 1), (2, 1), (2, 2), (4, 3)]]
    assert all(a <= b for a, b in zip(c, c[1:]))
    norms = lipschitz_diagnostic(MultiIndexSet((4, 3)), coeff, basis).mode_norms
    for nrm in norms:
        assert np.all(np.diff(nrm) > 0)


def test_lipschitz_empirical():
    sp, coeff, lam, basis, _ = setup(M=2, dims=(2, 2), dhat=(3, 2), theta=0.3)
    c_sto = lipschitz_diagnostic(lam, coeff, basis).c_sto
    K = sp.laplace_matrix()[sp.free][:, sp.free]
    rng = np.random.default_rng(7)
    for _ in range(10):
        v, w = rng.standard_normal((2, sp.n_free, lam.size))
        e = v - w
        energy = math.sqrt(np.sum(e * (K @ e)))
        diff = abs(eta_sto(v, sp, coeff, lam, basis) - eta_sto(w, sp, coeff, lam, basis))
        assert diff <= c_sto * energy


def test_det_over_sto_ratio_stable():
    sp, coeff, lam, basis, _ = setup(M=2, dims=(2, 1), dhat=(3, 2), theta=0.3)
    delta = [[2, 0], [0, 1]]
    rng = np.random.default_rng(11)
    ratios = []
    for _ in range(20):
        v = rng.standard_normal((sp.n_free, lam.size))
        ratios.append(eta_det(v, sp, coeff, lam, basis, f=None, restrict=delta).total
                      / eta_sto(v, sp, coeff, lam, basis, delta=delta))
    ratios = np.array(ratios)
    assert np.all(np.isfinite(ratios)) and np.all(ratios > 0)
    # the inverse-estimate constant on this mesh: ratios stay within a narrow band
    assert ratios.max() / ratios.min() < 3.0
