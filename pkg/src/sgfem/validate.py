"""Monte Carlo estimate of the energy error against sampled reference solves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .chaos import ChaosBasis, ModeScaling, MultiIndexSet
from .fe import FESpace, stiffness_matrix, triangle_quadrature
from .field import AffineField
from .galerkin import assemble_rhs, free_prolongation


@dataclass
class MCConfig:
    """Sampling setup.

    Parameters
    ----------
    n_samples : int
        ``N_MC``.
    seed : int
        Sample ``i`` uses ``default_rng(seed + i)``.
    uplifts : int
        Uniform refinements (two bisection sweeps each) of the finest
        adaptive mesh that form the reference mesh.
    measure : {"pi0", "weighted"}
        Standard Gaussian or ``N(0, sigma_m(theta rho)^2)`` per mode.
    """

    n_samples: int = 100
    seed: int = 0
    uplifts: int = 1
    measure: str = "pi0"

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        if self.uplifts < 0:
            raise ValueError("uplifts must be nonnegative")
        if self.measure not in ("pi0", "weighted"):
            raise ValueError(f"unknown measure {self.measure!r}")


def sample_parameter(rng: np.random.Generator, scaling: ModeScaling, measure: str = "pi0", size=None) -> np.ndarray:
    """Centered Gaussian parameters, unit variance or ``sigma_m(theta rho)^2`` per mode."""
    M = scaling.n_modes
    shape = (M,) if size is None else (size, M)
    y = rng.standard_normal(shape)
    if measure == "weighted":
        y = y * scaling.weight_sigma
    elif measure != "pi0":
        raise ValueError(f"unknown measure {measure!r}")
    return y


def sample_stream(cfg: MCConfig, scaling: ModeScaling) -> np.ndarray:
    """The common sample set ``y^(i)``, i.e. ``(N_MC, M_hat)``."""
    return np.stack([sample_parameter(np.random.default_rng(cfg.seed + i), scaling, cfg.measure)
                     for i in range(cfg.n_samples)])


def reference_solve(y, field: AffineField, space: FESpace, f=1.0, degree: int | None = None) -> np.ndarray:
    """Deterministic solve with ``exp(gamma(., y))`` evaluated at quadrature points.

    Returns the free-dof vector.
    """
    qp, qw = triangle_quadrature(degree if degree is not None else 2 * space.p + 2)
    T = space.mesh.n_triangles
    x = space.map_points(np.arange(T), qp).reshape(-1, 2)
    a = field.coefficient(x, y).reshape(T, -1)
    K = stiffness_matrix(space, a, qp, qw)[space.free][:, space.free]
    b = assemble_rhs(space, f, MultiIndexSet((1,)))[:, 0]
    return spla.spsolve(K.tocsc(), b)


@dataclass
class MCResult:
    """Per-iterate sampled errors.

    ``squares[l, i]`` is ``||grad(u_hat(y_i) - u_l(y_i))||^2``;
    ``error = sqrt(mean)`` and ``stderr`` is the standard error of the mean
    of the squares (same units as ``error**2``).
    """

    squares: np.ndarray

    @property
    def error_sq(self) -> np.ndarray:
        return self.squares.mean(axis=1)

    @property
    def error(self) -> np.ndarray:
        return np.sqrt(self.error_sq)

    @property
    def stderr(self) -> np.ndarray:
        n = self.squares.shape[1]
        if n < 2:
            return np.zeros(self.squares.shape[0])
        return self.squares.std(axis=1, ddof=1) / np.sqrt(n)


def mc_errors(iterates, field: AffineField, scaling: ModeScaling, ref_space: FESpace, cfg: MCConfig, f=1.0,
              reference=None) -> MCResult:
    """Sampled energy errors of several iterates against shared reference solves.

    Parameters
    ----------
    iterates : list of (FESpace, ancestors, U, MultiIndexSet)
        Discrete solutions with the map from reference triangles to their
        mesh's triangles.
    reference : ndarray, optional
        Precomputed reference solutions (N_MC, n_free of ``ref_space``).
    """
    Y = sample_stream(cfg, scaling)
    if reference is None:
        reference = np.stack([reference_solve(y, field, ref_space, f) for y in Y])
    K = ref_space.laplace_matrix()[ref_space.free][:, ref_space.free]
    basis = ChaosBasis(scaling.weight_sigma)
    out = np.zeros((len(iterates), len(Y)))
    for j, (space, anc, U, lam) in enumerate(iterates):
        P = free_prolongation(space, ref_space, anc)
        PU = P @ np.asarray(U).reshape(space.n_free, lam.size)
        Pm = basis.evaluate(lam.indices(scaling.n_modes), Y)  # (N, |Lambda|)
        E = PU @ Pm.T - reference.T
        out[j] = np.einsum("in,in->n", E, K @ E)
    return MCResult(out)


def mc_error(U, space: FESpace, lam: MultiIndexSet, field: AffineField, scaling: ModeScaling, ref_space: FESpace,
             ancestors, cfg: MCConfig, f=1.0) -> tuple[float, float]:
    """``(E, stderr)`` for a single iterate."""
    res = mc_errors([(space, ancestors, U, lam)], field, scaling, ref_space, cfg, f)
    return float(res.error[0]), float(res.stderr[0])
