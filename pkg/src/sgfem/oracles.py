"""Independent reference computations used to freeze golden values.

Nothing here shares code paths with the production algorithms beyond the
finite element primitives: triple products come from numpy's Hermite-Gauss
rule, the Galerkin system is assembled densely by tensor quadrature in the
parameters, and the markers are checked against all subsets.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
from numpy.polynomial import hermite_e

from .chaos import ModeScaling, MultiIndexSet
from .fe import FESpace, stiffness_matrix, triangle_quadrature
from .field import DiscreteCoefficient, benchmark_modes, expand_lognormal
from .galerkin import assemble_rhs
from .mesh import unit_square


def hermite_quadrature(n: int, variance: float = 1.0):
    """Nodes and probability weights for ``N(0, variance)``."""
    x, w = hermite_e.hermegauss(n)
    return x * math.sqrt(variance), w / w.sum()


def orthonormal_hermite(k: int, y, variance: float = 1.0) -> np.ndarray:
    """``He_k(y / s) / sqrt(k!)`` through numpy's series evaluation."""
    c = np.zeros(k + 1)
    c[k] = 1.0
    return hermite_e.hermeval(np.asarray(y) / math.sqrt(variance), c) / math.sqrt(math.factorial(k))


def triple_products(n: int, variance: float = 1.0, nodes: int = 64) -> np.ndarray:
    """``tau[i, j, k] = E[P_i P_j P_k]`` for degrees below ``n`` by ``nodes``-point quadrature."""
    y, w = hermite_quadrature(nodes, variance)
    P = np.stack([orthonormal_hermite(k, y, variance) for k in range(n)])
    return np.einsum("q,iq,jq,kq->ijk", w, P, P, P)


def dense_galerkin(space: FESpace, coeff: DiscreteCoefficient, lam: MultiIndexSet, f=1.0, n_gh: int | None = None):
    """Galerkin matrix and load by tensor Gauss-Hermite quadrature in ``y``.

    The coefficient ``a_N(x, y)`` is evaluated pointwise from its nodal
    realization, so the only shared ingredient with the matrix-free
    operator is the finite element space.
    """
    M = coeff.n_modes
    dims = lam.padded(M)
    if n_gh is None:
        n_gh = max(2 * d + dh for d, dh in zip(dims, coeff.dhat)) // 2 + 2
    rules = [hermite_quadrature(n_gh, s**2) for s in coeff.sigma]
    idx = lam.indices(M)
    anc = coeff.ancestors(space.mesh)
    cs = coeff.space
    qp, qw = triangle_quadrature(2 * (space.p - 1) + coeff.space.p)
    T = space.mesh.n_triangles
    xq = space.map_points(np.arange(T), qp)
    xi = cs.to_reference(anc, xq)
    psi = cs.element.values(xi.reshape(-1, 2)).reshape(T, len(qw), -1)
    cdofs = cs.elem_dofs[anc]
    nf = space.n_free
    A = np.zeros((nf * len(idx), nf * len(idx)))
    for node in itertools.product(range(n_gh), repeat=M):
        y = np.array([rules[m][0][node[m]] for m in range(M)])
        w = np.prod([rules[m][1][node[m]] for m in range(M)])
        a = coeff.realization(y[None])[0]
        aq = np.einsum("tqk,tk->tq", psi, a[cdofs])
        K = stiffness_matrix(space, aq, qp, qw)[space.free][:, space.free].toarray()
        P = np.ones(len(idx))
        for m in range(M):
            table = np.array([orthonormal_hermite(k, y[m], coeff.sigma[m] ** 2) for k in range(dims[m])])
            P = P * table[idx[:, m]]
        # row-major (dof, index) ordering matches a C-order (n_free, |Lambda|) tensor
        A += w * np.kron(K, np.outer(P, P))
    b = assemble_rhs(space, f, lam, M).ravel()
    return A, b


def exhaustive_min_det(values, theta: float) -> int:
    """Smallest cardinality of a subset whose root sum of squares reaches ``theta`` of the total."""
    v = np.asarray(values, dtype=float) ** 2
    target = theta**2 * v.sum()
    for k in range(len(v) + 1):
        for sub in itertools.combinations(range(len(v)), k):
            if v[list(sub)].sum() >= target * (1 - 1e-14):
                return k
    raise AssertionError("full set always qualifies")


def exhaustive_min_sto(values, theta: float, total: float):
    """Smallest cardinality whose plain sum reaches ``theta * total``; ``None`` if unreachable."""
    v = np.asarray(values, dtype=float)
    target = theta * total
    for k in range(len(v) + 1):
        for sub in itertools.combinations(range(len(v)), k):
            if v[list(sub)].sum() >= target * (1 - 1e-14):
                return k
    return None


# ---------------------------------------------------------------------------
# golden files
# ---------------------------------------------------------------------------

SUITES = ("triple", "galerkin", "marking")


def golden_triple(out: Path) -> Path:
    data = {str(v): triple_products(17, v).tolist() for v in (1.0, 1.21, 4.0)}
    path = out / "triple_products.json"
    path.write_text(json.dumps({"max_degree": 16, "nodes": 64, "tables": data}))
    return path


def golden_galerkin(out: Path) -> Path:
    field = benchmark_modes(2, 2.0)
    scaling = ModeScaling(field.gamma_sup, 1.0, 0.1)
    mesh = unit_square(0.25)
    coeff = expand_lognormal(field, scaling, (3, 3), mesh, 1)
    lam = MultiIndexSet((2, 2))
    A, b = dense_galerkin(FESpace(mesh, 1), coeff, lam)
    x = np.linalg.solve(A, b)
    path = out / "galerkin_dense.npz"
    np.savez(path, A=A, b=b, x=x, dims=np.array(lam.dims), dhat=np.array(coeff.dhat))
    return path


def golden_marking(out: Path, count: int = 100, seed: int = 0) -> Path:
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        n = int(rng.integers(1, 13))
        vals = rng.random(n) ** 2
        for theta in (0.1, 0.3, 0.5, 1.0):
            total = float(rng.uniform(0.5, 1.5) * vals.sum())
            cases.append({"values": vals.tolist(), "theta": theta, "total": total,
                          "det": exhaustive_min_det(vals, theta), "sto": exhaustive_min_sto(vals, theta, total)})
    path = out / "marking.json"
    path.write_text(json.dumps(cases))
    return path


def write_golden(suite: str, out) -> list:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = {"triple": golden_triple, "galerkin": golden_galerkin, "marking": golden_marking}
    names = SUITES if suite == "all" else (suite,)
    if any(n not in table for n in names):
        raise ValueError(f"unknown oracle suite {suite!r}; choose from {SUITES + ('all',)}")
    return [table[n](out) for n in names]


__all__ = [
    "dense_galerkin",
    "exhaustive_min_det",
    "exhaustive_min_sto",
    "hermite_quadrature",
    "orthonormal_hermite",
    "triple_products",
    "write_golden",
]
