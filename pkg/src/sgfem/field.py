"""Lognormal diffusion coefficient and its Hermite chaos discretization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .chaos import MAX_DEGREE, ModeScaling, MultiIndexSet, hermite_table
from .fe import FESpace
from .mesh import Mesh2D


@dataclass
class AffineField:
    """Gaussian exponent ``gamma(x, y) = gamma_0(x) + sum_m gamma_m(x) y_m``.

    Parameters
    ----------
    modes : sequence of callables
        ``gamma_m(X)`` for points ``X`` of shape (n, 2).
    gamma_sup : array_like
        Per-mode ``||gamma_m||_inf``.
    mean : callable, optional
        Deterministic part ``gamma_0``; zero if omitted.
    """

    modes: Sequence[Callable]
    gamma_sup: np.ndarray
    mean: Callable | None = None

    def __post_init__(self):
        self.gamma_sup = np.atleast_1d(np.asarray(self.gamma_sup, dtype=float))
        if len(self.gamma_sup) != len(self.modes):
            raise ValueError("need one sup-norm per mode")
        if np.any(self.gamma_sup < 0):
            raise ValueError("sup-norms must be nonnegative")

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mode_values(self, X) -> np.ndarray:
        """``gamma_m(x)`` for all modes, shape (n, M_hat)."""
        X = np.atleast_2d(X)
        return np.stack([np.broadcast_to(g(X), (len(X),)) for g in self.modes], axis=1)

    def mean_values(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.zeros(len(X)) if self.mean is None else np.broadcast_to(self.mean(X), (len(X),)).astype(float)

    def exponent(self, X, y) -> np.ndarray:
        """``gamma(x, y)`` at points (n, 2) for one parameter vector ``y``."""
        y = np.asarray(y, dtype=float)[: self.n_modes]
        return self.mean_values(X) + self.mode_values(X) @ y

    def coefficient(self, X, y) -> np.ndarray:
        return np.exp(self.exponent(X, y))

    @classmethod
    def from_functions(cls, modes, sample_points, mean=None, safety: float = 2.0):
        """Field with sup-norms estimated on sample points times a safety factor."""
        vals = np.stack([np.abs(g(sample_points)) for g in modes], axis=1)
        return cls(list(modes), safety * vals.max(axis=0), mean)


def riemann_zeta(s: float, tol: float = 1e-12) -> float:
    """``sum_n n^-s`` by partial sums with an Euler-Maclaurin tail."""
    if s <= 1:
        raise ValueError("series diverges for s <= 1")
    N = 10
    while True:
        n = np.arange(1, N, dtype=float)
        head = np.sum(n[::-1] ** -s)
        tail = N ** (1 - s) / (s - 1) + 0.5 * N**-s + s * N ** (-s - 1) / 12
        err = s * (s + 1) * (s + 2) * N ** (-s - 3) / 720
        if err < tol or N > 10**7:
            return float(head + tail)
        N *= 2


def mode_orders(m: int) -> tuple[int, int, int]:
    """Total order ``k`` and the split ``(beta1, beta2)`` of Fourier mode ``m >= 1``."""
    k = int(np.floor(-0.5 + np.sqrt(0.25 + 2 * m)))
    b1 = m - k * (k + 1) // 2
    return k, b1, k - b1


def benchmark_modes(M_hat: int, sigma: float = 2.0) -> AffineField:
    """Planar cosine modes with algebraic decay ``m^-sigma``."""
    if M_hat < 1:
        raise ValueError("need at least one mode")
    if sigma <= 1:
        raise ValueError("decay must exceed 1")
    amp = 0.9 / riemann_zeta(sigma)
    modes, sups = [], []
    for m in range(1, M_hat + 1):
        _, b1, b2 = mode_orders(m)
        a = amp * m**-sigma

        def g(X, a=a, b1=b1, b2=b2):
            return a * np.cos(2 * np.pi * b1 * X[:, 0]) * np.cos(2 * np.pi * b2 * X[:, 1])

        modes.append(g)
        sups.append(a)
    return AffineField(modes, np.array(sups))


def zero_field(M_hat: int = 1) -> AffineField:
    """``gamma = 0``, i.e. the coefficient is identically one."""
    return AffineField([lambda X: np.zeros(len(X))] * M_hat, np.zeros(M_hat))


# ---------------------------------------------------------------------------
# chaos expansion of exp(gamma)
# ---------------------------------------------------------------------------


def mode_factors(b, s: float, n: int) -> np.ndarray:
    """``exp(b^2 s^2 / 2) (b s)^k / sqrt(k!)`` for ``k < n``; shape (len(b), n)."""
    bs = np.asarray(b, dtype=float) * s
    out = np.empty(bs.shape + (n,))
    out[..., 0] = np.exp(0.5 * bs**2)
    for k in range(1, n):
        out[..., k] = out[..., k - 1] * bs / np.sqrt(k)
    return out


def truncation_degrees(field: AffineField, scaling: ModeScaling, threshold: float = 1e-8,
                       minimum: int = 2, cap: int = MAX_DEGREE + 1) -> tuple:
    """Per-mode ``dhat_m``: the first degree whose factor at the sup-norm drops below ``threshold``."""
    s = scaling.weight_sigma
    out = []
    for m in range(field.n_modes):
        f = mode_factors(np.array([field.gamma_sup[m]]), s[m], cap)[0]
        below = np.flatnonzero(f < threshold)
        k = int(below[0]) if len(below) else cap
        out.append(min(max(k, minimum), cap))
    return tuple(out)


@dataclass
class DiscreteCoefficient:
    """Nodal chaos coefficients ``a_N[j, mu] = scale_j prod_m A_m[j, mu_m]``.

    The tensor over the full index set ``Lambda_dhat`` is stored through its
    exact per-node product structure; :meth:`dense` materializes it.

    Attributes
    ----------
    space : FESpace
        Lagrange space on the coefficient mesh.
    factors : list of ndarray (n_dofs, dhat_m)
    scale : ndarray (n_dofs,)
        ``exp(gamma_0)`` at the nodes.
    sigma : ndarray
        ``sigma_m(theta * rho)`` used for the expansion.
    kind : str
        ``"initial"`` if solution meshes descend from the coefficient mesh,
        ``"current"`` if they coincide with it.
    """

    space: FESpace
    factors: list
    scale: np.ndarray
    sigma: np.ndarray
    kind: str = "initial"

    @property
    def dhat(self) -> tuple:
        return tuple(A.shape[1] for A in self.factors)

    @property
    def n_modes(self) -> int:
        return len(self.factors)

    @property
    def index_set(self) -> MultiIndexSet:
        return MultiIndexSet(self.dhat)

    def ancestors(self, mesh: Mesh2D) -> np.ndarray:
        """Coefficient-mesh triangle containing each triangle of ``mesh``."""
        if self.kind == "current" or mesh is self.space.mesh:
            if mesh.n_triangles != self.space.mesh.n_triangles:
                raise ValueError("coefficient lives on a different mesh")
            return np.arange(mesh.n_triangles)
        if mesh.root.max() >= self.space.mesh.n_triangles:
            raise ValueError("mesh does not descend from the coefficient mesh")
        return mesh.root

    def mode(self, alpha) -> np.ndarray:
        """Nodal values of the chaos coefficient ``a_alpha``."""
        alpha = list(alpha) + [0] * (self.n_modes - len(alpha))
        out = self.scale.copy()
        for A, k in zip(self.factors, alpha):
            out = out * (A[:, k] if k < A.shape[1] else 0.0)
        return out

    def mean(self) -> np.ndarray:
        return self.mode([0] * self.n_modes)

    def dense(self) -> np.ndarray:
        """Full tensor ``(n_dofs, |Lambda_dhat|)`` in lexicographic order."""
        out = self.scale[:, None]
        for A in self.factors:
            out = (out[:, :, None] * A[:, None, :]).reshape(len(out), -1)
        return out

    def sup_factors(self) -> list:
        """``max_j |A_m[j, k]|`` per mode (with ``scale`` folded into mode 0)."""
        out = [np.abs(A).max(axis=0) for A in self.factors]
        out[0] = (np.abs(self.scale)[:, None] * np.abs(self.factors[0])).max(axis=0)
        return out

    def realization(self, y) -> np.ndarray:
        """Nodal values of ``a_N(x_j, y)`` for samples ``y`` (N, M_hat); shape (N, n_dofs)."""
        y = np.atleast_2d(y)
        out = np.broadcast_to(self.scale, (len(y), len(self.scale))).copy()
        for m, A in enumerate(self.factors):
            P = hermite_table(self.sigma[m] ** 2, A.shape[1], y[:, m])
            out *= P @ A.T
        return out


def expand_lognormal(field: AffineField, scaling: ModeScaling, dhat, mesh: Mesh2D, p: int = 1,
                     kind: str = "initial") -> DiscreteCoefficient:
    """Nodal chaos coefficients of ``exp(gamma)`` in the order-``p`` space on ``mesh``.

    Parameters
    ----------
    dhat : tuple or MultiIndexSet
        Truncation degrees per mode (padded with ones).
    kind : {"initial", "current"}
        Whether later solution meshes refine ``mesh`` or coincide with it.
    """
    if isinstance(dhat, MultiIndexSet):
        dhat = dhat.padded(field.n_modes)
    dhat = tuple(dhat) + (1,) * (field.n_modes - len(dhat))
    space = FESpace(mesh, p)
    X = space.coords
    b = field.mode_values(X)
    s = scaling.weight_sigma
    factors = [mode_factors(b[:, m], s[m], dhat[m]) for m in range(field.n_modes)]
    scale = np.exp(field.mean_values(X))
    return DiscreteCoefficient(space, factors, scale, np.asarray(s, dtype=float), kind)


def truncation_residual(field: AffineField, coeff: DiscreteCoefficient, sample_count: int = 200,
                        seed: int = 0) -> float:
    """Relative Monte Carlo error of ``a_N`` against ``exp(gamma)``.

    The sup over the coefficient nodes stands in for the sup over the
    domain; samples are standard Gaussian.
    """
    if sample_count < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((sample_count, field.n_modes))
    X = coeff.space.coords
    g = field.mode_values(X)
    exact = np.exp(field.mean_values(X)[None, :] + y @ g.T)
    approx = coeff.realization(y)
    num = np.mean(np.max(np.abs(exact - approx), axis=1) ** 2)
    den = np.mean(np.max(np.abs(exact), axis=1) ** 2)
    return float(np.sqrt(num / den))


def positivity_audit(coeff: DiscreteCoefficient, sample_count: int = 100, seed: int = 0,
                     warn: bool = True) -> int:
    """Number of sampled realizations of ``a_N`` with a nonpositive nodal value."""
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((sample_count, coeff.n_modes))
    bad = int(np.sum(coeff.realization(y).min(axis=1) <= 0))
    if bad and warn:
        warnings.warn(f"{bad} of {sample_count} sampled coefficient realizations are not positive", RuntimeWarning)
    return bad
