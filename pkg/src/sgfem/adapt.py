"""Adaptive loop: solve, estimate, mark, refine, with a quasi-error ledger."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .chaos import ChaosBasis, ModeScaling, MultiIndexSet
from .estimator import EstimatorReport, estimate
from .fe import FESpace
from .field import AffineField, DiscreteCoefficient, expand_lognormal, positivity_audit, truncation_degrees
from .galerkin import (
    GalerkinOperator,
    NoConvergence,
    assemble_rhs,
    free_prolongation,
    prolongate_tensor,
    solve,
)
from .mesh import Mesh2D, bisect, compose_parents, uniform_refine
from .validate import MCConfig, mc_errors, reference_solve, sample_stream

log = logging.getLogger(__name__)


class EmptyIndicators(ValueError):
    """Marking was requested on an empty indicator set."""


class UnreachableThreshold(ValueError):
    """The slab values cannot reach the requested fraction of the total."""


# ---------------------------------------------------------------------------
# marking
# ---------------------------------------------------------------------------


def _as_items(values):
    if isinstance(values, dict):
        ids = np.asarray(list(values.keys()))
        vals = np.asarray(list(values.values()), dtype=float)
    else:
        vals = np.asarray(values, dtype=float).ravel()
        ids = np.arange(len(vals))
    return ids, vals


def doerfler_mark_det(indicators, theta: float) -> np.ndarray:
    """Smallest set whose root sum of squares reaches ``theta`` times the total.

    ``indicators`` is an array indexed by triangle id or a mapping id -> value.
    Ties are broken by ascending id.
    """
    ids, vals = _as_items(indicators)
    if len(vals) == 0:
        raise EmptyIndicators("no indicators to mark")
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if not np.all(np.isfinite(vals)):
        raise ValueError("indicators must be finite")
    order = np.lexsort((ids, -np.abs(vals)))
    cs = np.cumsum(vals[order] ** 2)
    if cs[-1] == 0:
        return np.zeros(0, dtype=ids.dtype)
    k = int(np.argmax(np.sqrt(cs) >= theta * np.sqrt(cs[-1])))
    return np.sort(ids[order[: k + 1]])


def doerfler_mark_sto(slabs, theta: float, total: float) -> np.ndarray:
    """Smallest set of modes whose plain slab sum reaches ``theta * total``."""
    ids, vals = _as_items(slabs)
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if not np.all(np.isfinite(vals)) or not np.isfinite(total) or total < 0:
        raise ValueError("slab values and total must be finite, total nonnegative")
    target = theta * total
    if target <= 0:
        return np.zeros(0, dtype=ids.dtype)
    order = np.lexsort((ids, -vals))
    cs = np.cumsum(vals[order])
    if len(cs) == 0 or cs[-1] < target:
        raise UnreachableThreshold(f"slabs sum to {cs[-1] if len(cs) else 0:.3e} < {target:.3e}")
    k = int(np.argmax(cs >= target))
    return np.sort(ids[order[: k + 1]])


# ---------------------------------------------------------------------------
# configuration and problem
# ---------------------------------------------------------------------------


@dataclass
class AdaptConfig:
    theta_det: float = 0.3
    theta_sto: float = 0.5
    c_eq: float = 5.0
    q: int | tuple = 1
    max_iter: int = 10
    tol: float = 1e-10
    maxit: int = 10000
    p: int = 1
    d0: tuple = (1,)
    omega: float = 1.0
    tau: float = 4.0
    eta_tol: float | None = None
    max_dofs: int | None = None
    check_orthogonality: bool = True

    def __post_init__(self):
        for name in ("theta_det", "theta_sto"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.c_eq <= 0:
            raise ValueError("c_eq must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.p < 1:
            raise ValueError("FE order must be >= 1")
        if self.omega <= 0 or self.tau < 0:
            raise ValueError("omega must be positive and tau nonnegative")
        if np.any(np.asarray(self.q) < 1):
            raise ValueError("look-ahead depths must be >= 1")


@dataclass
class Problem:
    """Everything the loop needs besides the marking parameters.

    ``coeff_mesh`` selects where the discrete coefficient lives: ``"initial"``
    keeps it on ``mesh0`` for the whole run (the discrete problems are then
    nested), ``"current"`` re-interpolates it on every mesh.
    """

    field: AffineField
    scaling: ModeScaling
    mesh0: Mesh2D
    f: float | Callable = 1.0
    tail_threshold: float = 1e-8
    coeff_order: int = 3
    coeff_mesh: str = "initial"
    dhat: tuple | None = None

    def __post_init__(self):
        if self.coeff_mesh not in ("initial", "current"):
            raise ValueError("coeff_mesh must be 'initial' or 'current'")
        if self.dhat is None:
            self.dhat = truncation_degrees(self.field, self.scaling, self.tail_threshold)

    def coefficient(self, mesh: Mesh2D) -> DiscreteCoefficient:
        target = self.mesh0 if self.coeff_mesh == "initial" else mesh
        return expand_lognormal(self.field, self.scaling, self.dhat, target, self.coeff_order, kind=self.coeff_mesh)


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


@dataclass
class LedgerRow:
    iter: int
    branch: str
    n_triangles: int
    dims: tuple
    dofs: int
    eta_det: float
    eta_sto: float
    eta: float
    slabs: tuple = ()
    n_marked: int = 0
    fallback: bool = False
    energy: float = float("nan")
    increment: float = float("nan")
    orth_ratio: float = float("nan")
    iterations: int = 0
    mc_error: float = float("nan")
    mc_stderr: float = float("nan")
    quasi_err: float = float("nan")
    delta: float = float("nan")
    delta_band: float = float("nan")  # upper end of delta over the MC bands


@dataclass
class Snapshot:
    mesh: Mesh2D
    lam: MultiIndexSet
    U: np.ndarray
    parent: np.ndarray | None = None  # map to the previous mesh


@dataclass
class AdaptResult:
    rows: list
    snapshots: list
    config: AdaptConfig
    problem: Problem
    mc: MCConfig | None = None
    error: str | None = None
    notes: dict = field(default_factory=dict)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])


class AdaptAborted(RuntimeError):
    """Raised when the loop stops early; carries the partial result."""

    def __init__(self, message, partial: AdaptResult):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def _column_positions(old: MultiIndexSet, new: MultiIndexSet, n_modes: int) -> np.ndarray:
    return np.ravel_multi_index(tuple(old.indices(n_modes).T), new.padded(n_modes))


def orthogonality_ratio(op_new: GalerkinOperator, U_new, op_old: GalerkinOperator, U_old, P) -> float:
    """``max |B(u_new - u_old, v)| / (||u_new||_B ||v||_B)`` over prolongated coarse basis functions."""
    M = op_new.coeff.n_modes
    E = U_new - prolongate_tensor(P, U_old, op_old.lam, op_new.lam, M)
    R = P.T @ op_new.apply(E)
    R = R[:, _column_positions(op_old.lam, op_new.lam, M)]
    vnorm = np.sqrt(op_old.diag())
    unorm = math.sqrt(max(op_new.energy(U_new), 0.0))
    if unorm == 0:
        return 0.0
    return float(np.max(np.abs(R) / vnorm) / unorm)


def run(problem: Problem, config: AdaptConfig, mc: MCConfig | None = None,
        progress: Callable[[LedgerRow, Snapshot], None] | None = None) -> AdaptResult:
    """Solve-estimate-mark-refine for ``config.max_iter`` iterations.

    Sampled errors (and with them the quasi-error columns) are filled in
    after the loop when ``mc`` is given, since the reference mesh refines
    the final adaptive mesh.
    """
    M = problem.field.n_modes
    basis = ChaosBasis(problem.scaling.weight_sigma)
    q = tuple(int(v) for v in np.broadcast_to(np.asarray(config.q, dtype=int), (M,)))
    mesh = problem.mesh0
    lam = MultiIndexSet(tuple(config.d0))
    if lam.M > M:
        raise ValueError("initial dims use more modes than the field has")
    result = AdaptResult([], [], config, problem, mc)
    coeff = problem.coefficient(mesh)
    result.notes["dhat"] = list(problem.dhat)
    result.notes["positivity_failures"] = positivity_audit(coeff, warn=True)
    prev = None  # (op, U, space)
    parent = None
    ell = 0
    while True:
        ell += 1
        if problem.coeff_mesh == "current" and ell > 1:
            coeff = problem.coefficient(mesh)
        space = FESpace(mesh, config.p)
        op = GalerkinOperator(space, coeff, lam)
        rhs = assemble_rhs(space, problem.f, op.lam)
        x0 = None
        P = None
        if prev is not None:
            P = free_prolongation(prev[2], space, parent)
            x0 = prolongate_tensor(P, prev[1], prev[0].lam, op.lam, M)
        try:
            U, info = solve(op, rhs, config.tol, config.maxit, x0=x0, return_info=True)
        except NoConvergence as exc:
            result.error = str(exc)
            raise AdaptAborted(str(exc), result) from exc
        energy = float(np.sum(rhs * U))
        report: EstimatorReport = estimate(U, space, coeff, op.lam, basis, f=problem.f, q=q, c_eq=config.c_eq)
        row = LedgerRow(
            iter=ell, branch="", n_triangles=mesh.n_triangles, dims=lam.dims,
            dofs=space.n_free * op.lam.size, eta_det=report.eta_det, eta_sto=report.eta_sto, eta=report.eta,
            slabs=tuple(report.slabs), energy=energy, iterations=info.iterations,
        )
        if prev is not None:
            row.increment = math.sqrt(max(energy - result.rows[-1].energy, 0.0))
            if config.check_orthogonality:
                row.orth_ratio = orthogonality_ratio(op, U, prev[0], prev[1], P)
        result.snapshots.append(Snapshot(mesh, op.lam, U, parent))
        result.rows.append(row)
        det_branch = report.eta_det >= config.c_eq * report.eta_sto
        row.branch = "det" if det_branch else "sto"
        stop = ell >= config.max_iter
        if config.eta_tol is not None and report.eta <= config.eta_tol:
            stop = True
        if config.max_dofs is not None and row.dofs >= config.max_dofs:
            stop = True
        log.info("iter %d %s T=%d dims=%s eta_det=%.3e eta_sto=%.3e cg=%d", ell, row.branch, mesh.n_triangles,
                 row.dims, report.eta_det, report.eta_sto, info.iterations)
        if stop:
            if progress:
                progress(row, result.snapshots[-1])
            break
        if det_branch:
            marked = doerfler_mark_det(report.det.per_element, config.theta_det)
            row.n_marked = len(marked)
            new_mesh, rmap = bisect(mesh, marked)
            parent = rmap.parent
            mesh = new_mesh
        else:
            try:
                modes = doerfler_mark_sto(report.slabs, config.theta_sto, report.eta_sto)
            except UnreachableThreshold:
                modes = np.arange(M)
                row.fallback = True
            row.n_marked = len(modes)
            inc = np.zeros(M, dtype=int)
            inc[modes] = np.asarray(q)[modes]
            lam = lam.grow(inc)
            parent = np.arange(mesh.n_triangles)
        if progress:
            progress(row, result.snapshots[-1])
        prev = (op, U, space)

    if mc is not None:
        attach_mc(result, mc)
    return result


def reference_space(result: AdaptResult, mc: MCConfig):
    """Reference space on the uplifted final mesh and the ancestor maps of every iterate."""
    final = result.snapshots[-1].mesh
    ref_mesh, anc = uniform_refine(final, 2 * mc.uplifts, return_parents=True)
    ref = FESpace(ref_mesh, result.config.p)
    maps = [None] * len(result.snapshots)
    maps[-1] = anc
    for j in range(len(result.snapshots) - 1, 0, -1):
        maps[j - 1] = compose_parents(result.snapshots[j].parent, maps[j])
    return ref, maps


def attach_mc(result: AdaptResult, mc: MCConfig, cadence: int = 1) -> None:
    """Fill sampled errors, quasi-errors and reduction factors into the ledger."""
    problem, cfg = result.problem, result.config
    ref, maps = reference_space(result, mc)
    Y = sample_stream(mc, problem.scaling)
    refs = np.stack([reference_solve(y, problem.field, ref, problem.f) for y in Y])
    pick = [j for j in range(len(result.snapshots)) if j % cadence == 0 or j == len(result.snapshots) - 1]
    iterates = [
        (FESpace(result.snapshots[j].mesh, cfg.p), maps[j], result.snapshots[j].U, result.snapshots[j].lam)
        for j in pick
    ]
    res = mc_errors(iterates, problem.field, problem.scaling, ref, mc, problem.f, reference=refs)
    for j, E, se in zip(pick, res.error, res.stderr):
        row = result.rows[j]
        row.mc_error = float(E)
        row.mc_stderr = float(se)
        row.quasi_err = quasi_error(row, cfg)
    for a, b in zip(result.rows[:-1], result.rows[1:]):
        if np.isfinite(a.quasi_err) and np.isfinite(b.quasi_err):
            a.delta = b.quasi_err**2 / a.quasi_err**2
            # worst case over the +-2 stderr bands of both sampled errors
            num = b.mc_error**2 + 2 * b.mc_stderr + _est_part(b, cfg)
            den = max(a.mc_error**2 - 2 * a.mc_stderr, 0.0) + _est_part(a, cfg)
            a.delta_band = num / den if den > 0 else float("inf")
    result.notes["reference_triangles"] = ref.mesh.n_triangles


def _est_part(row: LedgerRow, cfg: AdaptConfig) -> float:
    return cfg.omega * row.eta_det**2 + cfg.omega * cfg.tau * row.eta_sto**2


def quasi_error(row: LedgerRow, cfg: AdaptConfig) -> float:
    """``sqrt(E^2 + omega eta_det^2 + omega tau eta_sto^2)``."""
    return float(math.sqrt(row.mc_error**2 + _est_part(row, cfg)))
