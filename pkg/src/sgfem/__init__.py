"""Adaptive stochastic Galerkin FEM for lognormal diffusion on planar domains.

Submodules: ``chaos`` (Hermite chaos algebra), ``mesh`` (triangulations and
newest vertex bisection), ``fe`` (Lagrange elements), ``field`` (lognormal
coefficient), ``galerkin`` (matrix-free operator and CG), ``estimator``
(residual estimator), ``adapt`` (marking and the adaptive loop),
``validate`` (Monte Carlo errors), ``oracles`` and ``cli``.

Submodules are not imported here so that ``sgfem.cli`` can set BLAS thread
counts before numpy loads.
"""

__version__ = "0.1.0"
