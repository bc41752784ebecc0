import itertools
import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st
from scipy import integrate

from sgfem.chaos import (
    ChaosBasis,
    DivergentMoment,
    IndexOutOfRange,
    InvalidLookahead,
    ModeScaling,
    MultiIndexSet,
    doubly_orthogonal,
    hermite_eval,
    index_set_boundary,
    lookahead_slab,
    triple_product_1d,
    triple_product_table,
    weighted_sq_norm,
    zeta,
    zeta_defect,
    zeta_moment,
)
from sgfem.oracles import triple_products


def _quad_gauss(fn, variance=1.0, zeta_power=0.0, sigma=1.0):
    """Integral of ``fn * zeta^zeta_power`` against N(0, variance) by adaptive quadrature.

    The weight and the density are combined in one exponent so that the
    tails do not overflow.
    """
    a = 0.5 / variance - zeta_power * 0.5 * (1.0 - 1.0 / sigma**2)
    c = -0.5 * math.log(2 * math.pi * variance) - zeta_power * math.log(sigma)
    f = lambda y: fn(y) * math.exp(c - a * y * y)
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)[0]


def _closed_triple(i, j, k):
    s2 = i + j + k
    if s2 % 2:
        return 0.0
    s = s2 // 2
    if max(i, j, k) > s:
        return 0.0
    f = math.factorial
    return math.sqrt(f(i) * f(j) * f(k)) / (f(s - i) * f(s - j) * f(s - k))


# --- index sets -------------------------------------------------------------


def test_multiindex_order_and_membership():
    lam = MultiIndexSet((2, 3))
    idx = lam.indices()
    assert lam.size == 6
    assert idx.tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]
    assert (0, 0, 0) in lam
    assert (1, 2) in lam and (2, 0) not in lam and (0, 0, 1) not in lam
    assert lam.position((1, 1)) == 4


def test_multiindex_rejects_zero_degree():
    with pytest.raises(ValueError):
        MultiIndexSet((2, 0))


def test_grow_activates_modes():
    assert MultiIndexSet((2,)).grow([0, 0, 1]).dims == (2, 1, 2)
    assert MultiIndexSet((2, 3)).grow([1, 0]).dims == (3, 3)


def test_boundary_examples():
    assert index_set_boundary(MultiIndexSet((2,)), (3,)).tolist() == [[2], [3]]
    b = index_set_boundary(MultiIndexSet((2, 2)), (2, 2))
    assert len(b) == 5 and all(max(mu) == 2 for mu in b.tolist())
    assert len(index_set_boundary(MultiIndexSet((3, 2)), (1, 1))) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4))
def test_boundary_partition(pairs):
    d = tuple(p[0] for p in pairs)
    dh = tuple(p[1] for p in pairs)
    lam = MultiIndexSet(d)
    b = {tuple(mu) for mu in index_set_boundary(lam, dh).tolist()}
    inner = {tuple(mu) for mu in lam.indices().tolist()}
    outer = set(itertools.product(*[range(a + c - 1) for a, c in zip(d, dh)]))
    assert not (b & inner)
    assert b | inner == outer


def test_lookahead_examples():
    assert lookahead_slab(MultiIndexSet((2,)), 0, 1, 3).tolist() == [[2]]
    got = {tuple(r) for r in lookahead_slab(MultiIndexSet((2, 2)), 1, 2, 4).tolist()}
    assert got == {(0, 2), (1, 2), (0, 3), (1, 3)}
    assert lookahead_slab(MultiIndexSet((2,)), 1, 1, 3).tolist() == [[0, 1], [1, 1]]
    with pytest.raises(InvalidLookahead):
        lookahead_slab(MultiIndexSet((2,)), 0, 3, 3)
    with pytest.raises(InvalidLookahead):
        lookahead_slab(MultiIndexSet((2,)), 0, 0, 3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 3), min_size=1, max_size=3), st.integers(0, 2), st.integers(2, 4))
def test_slab_inside_boundary(d, mode, cap):
    lam = MultiIndexSet(tuple(d))
    n = max(len(d), mode + 1)
    dh = [cap] * n
    q = cap - 1
    slab = {tuple(r) for r in lookahead_slab(lam, mode, q, cap).tolist()}
    bd = {tuple(r) for r in index_set_boundary(lam, dh).tolist()}
    assert slab <= bd


# --- scalings and zeta ------------------------------------------------------


def test_mode_scaling():
    sc = ModeScaling(np.array([0.2, 0.0]), rho=1.0, theta=0.5)
    assert np.allclose(sc.sigma(0.0), 1.0)
    assert np.allclose(sc.weight_sigma, [math.exp(0.1), 1.0])
    assert np.all(sc.sigma(1.0) >= 1)


def test_zeta_moment_trivial():
    assert zeta_moment(0, [1.3, 1.1]) == pytest.approx(1.0, abs=1e-15)
    assert zeta_moment(1, [1.3, 1.1]) == pytest.approx(1.0, abs=1e-15)
    assert zeta_moment(2, [1.1]) == pytest.approx(1 / (1.1 * math.sqrt(2 - 1.21)), rel=1e-14)


@pytest.mark.parametrize("alpha", [0.5, 2, 3, 4])
@pytest.mark.parametrize("sigma", [1.0, 1.1, 1.2, 1.3])
def test_zeta_moment_vs_quadrature(alpha, sigma):
    if alpha + (1 - alpha) * sigma**2 <= 0:
        with pytest.raises(DivergentMoment):
            zeta_moment(alpha, [sigma])
        return
    ref = _quad_gauss(lambda y: 1.0, zeta_power=alpha, sigma=sigma)
    assert abs(zeta_moment(alpha, [sigma]) - ref) <= 1e-10


def test_zeta_moment_divergent():
    with pytest.raises(DivergentMoment):
        zeta_moment(2, [1.5])
    with pytest.raises(DivergentMoment):
        zeta_defect([1.2])  # fourth moment needs sigma^2 < 4/3


def test_zeta_defect():
    assert zeta_defect([1.0, 1.0]) == 0.0
    s = 1.05
    sq = _quad_gauss(lambda y: 1.0, zeta_power=4, sigma=s) + _quad_gauss(lambda y: 1.0, zeta_power=2, sigma=s)
    ref = math.sqrt(sq - 2 * _quad_gauss(lambda y: 1.0, zeta_power=3, sigma=s))
    assert zeta_defect([s]) == pytest.approx(ref, rel=1e-8)
    vals = [zeta_defect([math.exp(t * 0.4)]) for t in (0.3, 0.2, 0.1, 0.05, 0.0)]
    assert all(a > b for a, b in zip(vals, vals[1:])) and vals[-1] == 0.0


# --- Hermite polynomials and triple products --------------------------------


def test_hermite_trivial():
    assert hermite_eval(1.0, 0, 3.7) == 1.0
    assert hermite_eval(1.0, 1, 2.0) == pytest.approx(2.0)


def test_hermite_gram_schmidt_oracle():
    y = sympy.symbols("y")
    var = 4
    dens = sympy.exp(-(y**2) / (2 * var)) / sympy.sqrt(2 * sympy.pi * var)
    inner = lambda a, b: sympy.integrate(a * b * dens, (y, -sympy.oo, sympy.oo))
    basis = []
    for mono in (1, y, y**2):
        v = mono - sum(inner(mono, b) * b for b in basis)
        basis.append(sympy.simplify(v / sympy.sqrt(inner(v, v))))
    ref = float(basis[2].subs(y, 2))
    assert hermite_eval(4.0, 2, 2.0) == pytest.approx(ref, abs=1e-14)


@pytest.mark.parametrize("variance", [1.0, 1.21, 4.0])
def test_hermite_orthonormal_by_quadrature(variance):
    from sgfem.oracles import hermite_quadrature

    y, w = hermite_quadrature(40, variance)
    P = np.stack([np.atleast_1d(hermite_eval(variance, k, y)) for k in range(12)])
    assert np.allclose((P * w) @ P.T, np.eye(12), atol=1e-11)


def test_triple_examples():
    for v in (1.0, 2.5):
        assert triple_product_1d(v, 0, 0, 0) == pytest.approx(1.0)
        assert triple_product_1d(v, 0, 1, 1) == pytest.approx(1.0)
        assert triple_product_1d(v, 1, 1, 1) == 0.0
    assert triple_product_1d(1.0, 1, 1, 2) == pytest.approx(math.sqrt(2), abs=1e-14)


@pytest.mark.parametrize("variance", [1.0, 1.21, 4.0])
def test_triple_products_vs_64_node_oracle(variance):
    ref = triple_products(17, variance)
    for i, j, k in itertools.product(range(17), repeat=3):
        if i + j + k > 16:
            continue
        assert abs(triple_product_1d(variance, i, j, k) - ref[i, j, k]) <= 1e-10
    tab = triple_product_table(17, 17, 17, variance)
    # degrees up to 16 each: values reach 1e6, so compare relative to max(1, |tau|)
    assert np.max(np.abs(tab - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-10


def test_triple_closed_form_and_support():
    tab = triple_product_table(9, 9, 9)
    for i, j, k in itertools.product(range(9), repeat=3):
        c = _closed_triple(i, j, k)
        assert tab[i, j, k] == pytest.approx(c, rel=1e-12, abs=1e-12)
        if c == 0.0:
            assert tab[i, j, k] == 0.0
    assert np.array_equal(tab, tab.transpose(1, 0, 2))
    assert np.array_equal(tab, tab.transpose(2, 1, 0))


# --- doubly orthogonal transforms -------------------------------------------


def test_transform_trivial():
    t = doubly_orthogonal(1.0, 5)
    assert np.array_equal(t.Z, np.eye(5)) and np.array_equal(t.c, np.ones(5))


def test_transform_scalar_block():
    s = 1.2
    t = doubly_orthogonal(s, 1)
    g1 = _quad_gauss(lambda y: 1.0, zeta_power=1, sigma=s)
    g2 = _quad_gauss(lambda y: 1.0, zeta_power=2, sigma=s)
    assert t.c[0] == pytest.approx(math.sqrt(g2 / g1), rel=1e-10)


@pytest.mark.parametrize("sigma", [1.0, 1.1, 1.25, 1.3, 1.4, 1.41])
@pytest.mark.parametrize("n", [1, 4, 8, 12])
def test_transform_diagonalizes(sigma, n):
    # c^2 grows like (sigma^2 / (2 - sigma^2))^n, so the zeta^2 residual is
    # measured against the largest entry it could carry
    t = doubly_orthogonal(sigma, n)
    assert np.max(np.abs(t.Z.T @ t.G1 @ t.Z - np.eye(n))) <= 1e-10
    scale = max(1.0, float(t.c.max() ** 2))
    assert np.max(np.abs(t.Z.T @ t.G2 @ t.Z - np.diag(t.c**2))) <= 1e-10 * scale
    assert np.all(t.c > 0) and np.all(np.diff(t.c) >= 0)


@pytest.mark.parametrize("sigma", [1.4143, 1.45, 1.5])
def test_transform_undefined_beyond_sqrt2(sigma):
    # the zeta^2 moment diverges for sigma^2 >= 2
    with pytest.raises(DivergentMoment):
        doubly_orthogonal(sigma, 3)


def test_transform_constants_increase():
    c = doubly_orthogonal(1.1, 6).c
    assert np.all(np.diff(c) > 0)


def test_gram_entries_vs_quadrature():
    s = 1.15
    t = doubly_orthogonal(s, 4)
    for i, j in itertools.product(range(4), repeat=2):
        f = lambda y: hermite_eval(s * s, i, y) * hermite_eval(s * s, j, y)
        assert t.G2[i, j] == pytest.approx(_quad_gauss(f, zeta_power=2, sigma=s), abs=1e-11)


def test_weighted_sq_norm():
    t0 = doubly_orthogonal(1.0, 4)
    assert weighted_sq_norm([[0]], [1.0], [t0]) == pytest.approx(1.0)
    v = np.array([0.3, -1.2, 2.0])
    assert weighted_sq_norm([[0], [1], [3]], v, [t0]) == pytest.approx(np.sum(v**2))
    s = 1.1
    t = doubly_orthogonal(s, 3)
    v = np.array([0.7, -0.4])
    f = lambda y: (v[0] * hermite_eval(s * s, 0, y) + v[1] * hermite_eval(s * s, 2, y)) ** 2
    assert weighted_sq_norm([[0], [2]], v, [t]) == pytest.approx(_quad_gauss(f, zeta_power=2, sigma=s), rel=1e-10)
    with pytest.raises(IndexOutOfRange):
        weighted_sq_norm([[3]], [1.0], [t])


def test_basis_evaluate_matches_product():
    basis = ChaosBasis(np.array([1.1, 1.3]))
    y = np.array([[0.3, -1.2], [2.0, 0.5]])
    idx = np.array([[0, 0], [2, 1], [1, 3]])
    P = basis.evaluate(idx, y)
    for n in range(2):
        for k, (a, b) in enumerate(idx):
            ref = hermite_eval(1.21, a, y[n, 0]) * hermite_eval(1.69, b, y[n, 1])
            assert P[n, k] == pytest.approx(ref, rel=1e-13)
