"""Tensorized Hermite chaos on weighted Gaussian product measures.

Every mode ``m`` carries a Gaussian measure ``N(0, s_m^2)`` under which the
polynomials ``P_k`` are orthonormal.  The ratio of that measure to the
standard Gaussian is the weight ``zeta``; the weighted norms used by the
error estimator are evaluated through a per-mode doubly orthogonal basis.

Modes are indexed from 0 throughout the Python API.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from numpy.polynomial.hermite_e import hermegauss

MAX_DEGREE = 30


class DivergentMoment(ValueError):
    """A moment of the weight does not exist for the given scaling."""


class NumericalBreakdown(RuntimeError):
    """A Gram matrix that must be positive definite is not."""


class IndexOutOfRange(IndexError):
    """A multi-index lies outside the block covered by a transform."""


class InvalidLookahead(ValueError):
    """Look-ahead depth outside the admissible range."""


# ---------------------------------------------------------------------------
# index sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiIndexSet:
    """Full tensor index set ``{mu : mu_m < d_m}``.

    Parameters
    ----------
    dims : tuple of int
        Per-mode degrees ``d_m >= 1``.  Modes beyond ``len(dims)`` are
        implicitly padded with ``d_m = 1``.
    """

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 0:
            dims = (1,)
        if any(d < 1 for d in dims):
            raise ValueError(f"all degrees must be >= 1, got {dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def M(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def __len__(self):
        return self.size

    def padded(self, n: int) -> tuple:
        """Degrees padded with ones to length ``n``."""
        if n < self.M:
            raise ValueError("cannot pad to fewer modes than are active")
        return self.dims + (1,) * (n - self.M)

    def indices(self, n_modes: int | None = None) -> np.ndarray:
        """All members as rows, lexicographic with the last mode fastest."""
        dims = self.dims if n_modes is None else self.padded(n_modes)
        return box_indices(dims)

    def __contains__(self, mu) -> bool:
        mu = np.asarray(mu, dtype=int).ravel()
        if np.any(mu < 0):
            return False
        dims = self.padded(max(len(mu), self.M))
        mu = np.concatenate([mu, np.zeros(len(dims) - len(mu), dtype=int)])
        return bool(np.all(mu < np.asarray(dims)))

    def position(self, mu) -> int:
        """Position of ``mu`` in the enumeration."""
        mu = np.asarray(mu, dtype=int).ravel()
        if mu not in self:
            raise KeyError(f"{tuple(mu)} not in index set with dims {self.dims}")
        return int(np.ravel_multi_index(tuple(mu[: self.M]), self.dims))

    def grow(self, increments) -> "MultiIndexSet":
        """Componentwise increment of the degrees, activating modes as needed."""
        inc = np.asarray(increments, dtype=int)
        n = max(self.M, len(inc))
        dims = np.asarray(self.padded(n)) + np.concatenate([inc, np.zeros(n - len(inc), dtype=int)])
        return MultiIndexSet(tuple(trim_dims(dims)))


def trim_dims(dims) -> tuple:
    """Drop trailing unit degrees (keeping at least one mode)."""
    dims = list(int(d) for d in dims)
    while len(dims) > 1 and dims[-1] == 1:
        dims.pop()
    return tuple(dims)


def box_indices(dims) -> np.ndarray:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        return np.zeros((1, 0), dtype=int)
    grid = np.indices(dims).reshape(len(dims), -1).T
    return np.ascontiguousarray(grid)


def index_set_boundary(lam: MultiIndexSet, dhat) -> np.ndarray:
    """Boundary ``Lambda_{d + dhat - 1} minus Lambda_d``.

    Returns
    -------
    ndarray of shape (K, n_modes)
        Members in lexicographic order, ``n_modes = max(M, len(dhat))``.
    """
    dhat = tuple(int(x) for x in dhat)
    if any(x < 1 for x in dhat):
        raise ValueError("dhat entries must be >= 1")
    n = max(lam.M, len(dhat))
    d = np.asarray(lam.padded(n))
    dh = np.asarray(dhat + (1,) * (n - len(dhat)))
    outer = box_indices(d + dh - 1)
    inside = np.all(outer < d, axis=1)
    return outer[~inside]


def lookahead_slab(lam: MultiIndexSet, mode: int, q: int, cap: int) -> np.ndarray:
    """Look-ahead slab of depth ``q`` in direction ``mode``.

    Other active modes keep their ranges ``[0, d_j)``, inactive modes are
    fixed to 0, and mode ``mode`` ranges over ``[d_m, d_m + q)``.
    """
    if not 1 <= q <= cap - 1:
        raise InvalidLookahead(f"look-ahead q={q} outside [1, {cap - 1}] for mode {mode}")
    n = max(lam.M, mode + 1)
    d = list(lam.padded(n))
    ranges = [np.arange(dj) for dj in d]
    ranges[mode] = np.arange(d[mode], d[mode] + q)
    grid = np.meshgrid(*ranges, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


# ---------------------------------------------------------------------------
# scalings and the weight zeta
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModeScaling:
    """Per-mode scalings ``sigma_m(t) = exp(t * ||gamma_m||_inf)``."""

    gamma_sup: np.ndarray
    rho: float = 1.0
    theta: float = 0.1

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gamma_sup, dtype=float))
        if np.any(g < 0):
            raise ValueError("sup-norms must be nonnegative")
        object.__setattr__(self, "gamma_sup", g)

    @property
    def n_modes(self) -> int:
        return len(self.gamma_sup)

    def sigma(self, t: float) -> np.ndarray:
        return np.exp(t * self.gamma_sup)

    @property
    def weight_sigma(self) -> np.ndarray:
        """``sigma_m(theta * rho)``, standard deviations of the orthonormality measure."""
        return self.sigma(self.theta * self.rho)


def zeta(y, sigma):
    """Density ratio of ``N(0, sigma^2)`` against ``N(0, 1)`` (one mode)."""
    y = np.asarray(y, dtype=float)
    return np.exp(0.5 * y**2 - 0.5 * y**2 / sigma**2) / sigma


def _moment_constants(alpha: float, sigma) -> np.ndarray:
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    arg = alpha + (1.0 - alpha) * sigma**2
    if np.any(arg <= 0):
        raise DivergentMoment(f"moment of order {alpha} diverges for sigma={sigma.max():.4g}")
    return sigma ** (alpha - 1.0) * np.sqrt(arg)


def zeta_moment(alpha: float, sigma) -> float:
    """Integral of ``zeta^alpha`` against the standard Gaussian product measure.

    Parameters
    ----------
    alpha : float
        Moment order, ``alpha >= 0``.
    sigma : array_like
        Per-mode ``sigma_m(theta * rho)``.
    """
    return float(np.prod(1.0 / _moment_constants(alpha, sigma)))


def zeta_defect(sigma) -> float:
    """``|| zeta^2 - zeta ||`` in L2 of the standard Gaussian product measure."""
    val = zeta_moment(4, sigma) + zeta_moment(2, sigma) - 2 * zeta_moment(3, sigma)
    return float(np.sqrt(max(val, 0.0)))


# ---------------------------------------------------------------------------
# Hermite polynomials and quadrature
# ---------------------------------------------------------------------------


def hermite_table(variance: float, n: int, y) -> np.ndarray:
    """Values ``P_0(y), ..., P_{n-1}(y)`` stacked on a trailing axis.

    ``P_k`` is orthonormal under ``N(0, variance)``; computed by the
    normalized three-term recurrence in ``t = y / sqrt(variance)``.
    """
    if n - 1 > MAX_DEGREE:
        raise ValueError(f"degree {n - 1} exceeds the cap {MAX_DEGREE}")
    t = np.asarray(y, dtype=float) / np.sqrt(variance)
    out = np.empty(t.shape + (max(n, 1),))
    out[..., 0] = 1.0
    if n > 1:
        out[..., 1] = t
    for k in range(1, n - 1):
        out[..., k + 1] = (t * out[..., k] - np.sqrt(k) * out[..., k - 1]) / np.sqrt(k + 1)
    return out[..., :n]


def hermite_eval(variance: float, degree: int, y):
    """Orthonormal Hermite polynomial ``P_degree`` under ``N(0, variance)``."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    val = hermite_table(variance, degree + 1, y)[..., degree]
    return val if np.ndim(val) else float(val)


def gauss_hermite(n: int, variance: float = 1.0):
    """Nodes and probability weights exact for ``N(0, variance)`` up to degree ``2n-1``."""
    t, w = hermegauss(n)
    return np.sqrt(variance) * t, w / np.sqrt(2 * np.pi)


def _support_mask(ni, nj, nk) -> np.ndarray:
    i, j, k = np.ix_(np.arange(ni), np.arange(nj), np.arange(nk))
    total = i + j + k
    half = total // 2
    return (total % 2 == 0) & (i <= half) & (j <= half) & (k <= half)


@lru_cache(maxsize=256)
def _triple_table(ni: int, nj: int, nk: int) -> np.ndarray:
    nmax = max(ni, nj, nk)
    y, w = gauss_hermite(-(-(3 * nmax - 3) // 2) + 2)
    P = hermite_table(1.0, nmax, y)
    cube = np.einsum("q,qi,qj,qk->ijk", w, P, P, P)
    # read every entry from its sorted representative so the table is exactly symmetric
    idx = np.sort(np.stack(np.meshgrid(np.arange(ni), np.arange(nj), np.arange(nk), indexing="ij")), axis=0)
    tau = cube[idx[0], idx[1], idx[2]]
    tau[~_support_mask(ni, nj, nk)] = 0.0
    tau.setflags(write=False)
    return tau


def triple_product_table(ni: int, nj: int, nk: int, variance: float = 1.0) -> np.ndarray:
    """Array ``tau[i, j, k] = int P_i P_j P_k`` for ``i < ni, j < nj, k < nk``.

    The values do not depend on the variance because the polynomials are
    orthonormal for each variance; it is accepted for symmetry with
    :func:`triple_product_1d`.  Entries outside the support rule (odd
    total degree, or one degree above the half sum) are exactly zero.
    """
    if variance <= 0:
        raise ValueError("variance must be positive")
    return _triple_table(int(ni), int(nj), int(nk))


def triple_product_1d(variance: float, i: int, j: int, k: int) -> float:
    """``int P_i P_j P_k dN(0, variance)`` by Gauss-Hermite quadrature."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    s = i + j + k
    if s % 2 or max(i, j, k) > s // 2:
        return 0.0
    y, w = gauss_hermite(-(-s // 2) + 2, variance)
    P = hermite_table(variance, max(i, j, k) + 1, y)
    return float(np.sum(w * P[:, i] * P[:, j] * P[:, k]))


# ---------------------------------------------------------------------------
# doubly orthogonal transforms
# ---------------------------------------------------------------------------


def weighted_gram(sigma: float, alpha: float, n: int) -> np.ndarray:
    """``G[i, j] = int P_i P_j zeta^alpha dN(0, 1)`` for ``i, j < n``.

    ``zeta^alpha`` times the standard Gaussian is proportional to a
    Gaussian density, so Gauss-Hermite quadrature of that density is exact.
    """
    c = _moment_constants(alpha, sigma)[0]
    var = sigma**2 / (alpha + (1.0 - alpha) * sigma**2)
    y, w = gauss_hermite(n + 1, var)
    P = hermite_table(sigma**2, n, y)
    return (P.T * w) @ P / c


@dataclass(frozen=True)
class DoublyOrthogonalTransform:
    """Per-mode block ``Z`` with ``Z^T G1 Z = I`` and ``Z^T G2 Z = diag(c^2)``.

    Attributes
    ----------
    Z : ndarray (n, n)
        Column ``nu`` holds the coefficients ``z_{mu nu}``.
    c : ndarray (n,)
        Positive scalars, ascending.
    G1, G2 : ndarray (n, n)
        Gram matrices with weights ``zeta`` and ``zeta^2``.
    """

    Z: np.ndarray
    c: np.ndarray
    G1: np.ndarray
    G2: np.ndarray

    @property
    def size(self) -> int:
        return len(self.c)

    @property
    def gram(self) -> np.ndarray:
        """Gram matrix of ``P_mu zeta`` in L2 of the standard Gaussian."""
        return (self.Z * self.c**2) @ self.Z.T


def doubly_orthogonal(sigma: float, n: int) -> DoublyOrthogonalTransform:
    """Doubly orthogonal transform of size ``n`` for one mode.

    Parameters
    ----------
    sigma : float
        ``sigma_m(theta * rho)`` of the mode.
    n : int
        Number of polynomial degrees in the block.
    """
    if n < 1:
        raise ValueError("block size must be >= 1")
    G1 = weighted_gram(sigma, 1.0, n)
    G2 = weighted_gram(sigma, 2.0, n)
    G1 = 0.5 * (G1 + G1.T)
    G2 = 0.5 * (G2 + G2.T)
    if np.linalg.eigvalsh(G1).min() <= 1e-10:
        raise NumericalBreakdown("Gram matrix of the zeta-weighted measure is not positive definite")
    if np.max(np.abs(G2 - G1)) < 1e-14:
        return DoublyOrthogonalTransform(np.eye(n), np.ones(n), G1, G2)
    # G2 = B^T B with B the weighted quadrature matrix; an SVD of B (after
    # whitening by G1) resolves the small c to eps * c_max instead of the
    # eps * c_max^2 an eigensolver on G2 would give.
    R = scipy.linalg.cholesky(G1)
    var = sigma**2 / (2.0 - sigma**2)
    y, w = gauss_hermite(n + 1, var)
    B = np.sqrt(w / _moment_constants(2.0, sigma)[0])[:, None] * hermite_table(sigma**2, n, y)
    _, sv, Vt = np.linalg.svd(scipy.linalg.solve_triangular(R, B.T, trans="T").T, full_matrices=False)
    order = np.argsort(sv)
    lam = sv[order] ** 2
    Z = scipy.linalg.solve_triangular(R, Vt.T[:, order])
    if lam.min() <= 0:
        raise NumericalBreakdown("zeta^2 Gram matrix is not positive definite")
    for col in range(n):
        nz = np.flatnonzero(np.abs(Z[:, col]) > 1e-12)
        if len(nz) and Z[nz[0], col] < 0:
            Z[:, col] *= -1
    return DoublyOrthogonalTransform(Z, np.sqrt(lam), G1, G2)


def weighted_sq_norm(indices, values, transforms) -> np.ndarray | float:
    """``sum_nu c_nu^2 (sum_mu v_mu z_{mu nu})^2`` over tensorized transforms.

    Parameters
    ----------
    indices : array_like (K, M)
        Multi-indices ``mu``.
    values : array_like (K,) or (K, P)
        Coefficients ``v_mu``; a trailing axis is kept (per-point usage).
    transforms : sequence of DoublyOrthogonalTransform
        One block per mode; ``len(transforms) >= M``.
    """
    idx = np.atleast_2d(np.asarray(indices, dtype=int))
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    if idx.shape[0] != v.shape[0]:
        raise ValueError("indices and values disagree in length")
    n = len(transforms)
    if idx.shape[1] > n:
        if np.any(idx[:, n:] != 0):
            raise IndexOutOfRange("multi-index uses a mode without a transform")
        idx = idx[:, :n]
    idx = np.pad(idx, ((0, 0), (0, n - idx.shape[1])))
    sizes = np.array([t.size for t in transforms])
    if np.any(idx >= sizes) or np.any(idx < 0):
        raise IndexOutOfRange("multi-index exceeds the transform block")
    dense = np.zeros(tuple(sizes) + (v.shape[1],))
    np.add.at(dense, tuple(idx.T), v)
    for m, t in enumerate(transforms):
        dense = np.moveaxis(np.tensordot(dense, t.Z, axes=([m], [0])), -1, m)
        shape = [1] * (n + 1)
        shape[m] = t.size
        dense = dense * t.c.reshape(shape)
    out = np.sum(dense**2, axis=tuple(range(n)))
    return float(out[0]) if squeeze else out


# ---------------------------------------------------------------------------
# multi-mode basis
# ---------------------------------------------------------------------------


@dataclass
class ChaosBasis:
    """Hermite chaos for all modes with cached transforms and Gram blocks.

    Parameters
    ----------
    sigma : array_like
        Per-mode ``sigma_m(theta * rho)``.
    """

    sigma: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))

    @property
    def n_modes(self) -> int:
        return len(self.sigma)

    def variance(self, m: int) -> float:
        return float(self.sigma[m] ** 2)

    def transform(self, m: int, n: int) -> DoublyOrthogonalTransform:
        key = ("T", m, n)
        if key not in self._cache:
            self._cache[key] = doubly_orthogonal(self.sigma[m], n)
        return self._cache[key]

    def gram(self, m: int, n: int) -> np.ndarray:
        """Gram block of ``P_k zeta`` for mode ``m``, ``k < n``."""
        key = ("G", m, n)
        if key not in self._cache:
            g = self.transform(m, n).gram
            self._cache[key] = 0.5 * (g + g.T)
        return self._cache[key]

    def basis_norms(self, indices) -> np.ndarray:
        """``||P_mu zeta||`` in L2 of the standard Gaussian, per row of ``indices``."""
        idx = np.atleast_2d(np.asarray(indices, dtype=int))
        out = np.ones(idx.shape[0])
        for m in range(idx.shape[1]):
            n = idx[:, m].max() + 1
            out *= np.sqrt(np.diag(self.gram(m, n)))[idx[:, m]]
        return out

    def zeta_moment(self, alpha: float) -> float:
        return zeta_moment(alpha, self.sigma)

    def zeta_defect(self) -> float:
        return zeta_defect(self.sigma)

    def evaluate(self, indices, y) -> np.ndarray:
        """``P_mu(y)`` for sample rows ``y`` (N, n_modes); returns (N, K)."""
        idx = np.atleast_2d(np.asarray(indices, dtype=int))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.ones((y.shape[0], idx.shape[0]))
        for m in range(idx.shape[1]):
            top = idx[:, m].max()
            if top == 0:
                continue
            P = hermite_table(self.variance(m), top + 1, y[:, m])
            out *= P[:, idx[:, m]]
        return out
