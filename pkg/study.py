#!/usr/bin/env python3
"""
Manufactured-solution convergence study for the three-field (3F) and
multipoint vorticity (MV) mixed methods.

Usage:
    python study.py --dim 2 --base 8 --levels 4 --methods mv,3f --format md
    python study.py --dim 3 --base 2 --levels 3 --perturb-pressure --assert

Exit codes: 0 success, 1 bad configuration or I/O, 2 solver failure,
3 invariant failure (with --assert).
"""
import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from dotenv import load_dotenv

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import quadrature
from assembly import (
    RhsVectors,
    assemble_curl,
    assemble_div,
    assemble_exact_vorticity_mass,
    assemble_gradient_forcing,
    assemble_quadrature_vorticity_mass,
    assemble_rhs,
    local_mass_matrices,
)
from fespace import P0, RT0, FeSpace, build_space, differential, evaluate, vorticity_kind
from hybridization import build_reduced_system, invert_vertex_blocks, reconstruct_vorticity
from mesh import build_structured_mesh, mesh_size
from mms import boundary_data, exact_fields, perturbation_potential, vorticity_curl
from solver import (
    METHODS as SOLVER_METHODS,
    SOLVER_TOL,
    SolverError,
    reduced_saddle_system,
    solve_saddle,
    three_field_system,
)

logger = logging.getLogger(__name__)

OUTPUT_DIR = os.environ.get('STUDY_OUTPUT_DIR', 'results')
LOG_LEVEL = os.environ.get('STUDY_LOG_LEVEL', 'INFO')

THREE_FIELD = '3f'
MULTIPOINT = 'mv'
STUDY_METHODS = (THREE_FIELD, MULTIPOINT)

# Exact norms below this switch relative errors to absolute ones
ZERO_NORM = 1e-14
# Slack on recorded norm-equivalence intervals
BOUND_SLACK = 1e-10


class StudyError(RuntimeError):
    """Invalid configuration, mismatched solutions or a failed level."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level

    def __reduce__(self):
        return type(self), (self.args[0], self.level)


@dataclass
class StudyConfig:
    """Parameters of one convergence run and every tolerance it asserts."""
    dim: int = 2
    base: int = 8
    levels: int = 4
    methods: Tuple[str, ...] = (MULTIPOINT, THREE_FIELD)
    mu: float = 1.0
    tol: float = SOLVER_TOL
    perturb_pressure: bool = False
    fmt: str = 'csv'
    out: Optional[str] = None
    vtk_dir: Optional[str] = None
    step: int = 1
    workers: int = 1
    database: Optional[str] = None
    solver: str = 'direct'
    quad_degree: int = quadrature.QUAD_DEGREE
    samples: int = 100
    seed: int = 0
    inv_tol: float = 1e-9
    div_tol: float = 1e-10
    perturb_tol: float = 1e-9
    perturb_min_dp: float = 1e-3

    def validate(self):
        if self.dim not in (2, 3):
            raise StudyError(f"dim must be 2 or 3, got {self.dim}")
        if self.base < 1:
            raise StudyError(f"base resolution must be positive, got {self.base}")
        if self.levels < 2:
            raise StudyError("at least 2 levels are needed to compute rates")
        if self.step < 1:
            raise StudyError("3D level step must be positive")
        if not self.methods or any(m not in STUDY_METHODS for m in self.methods):
            raise StudyError(f"methods must be a non-empty subset of {STUDY_METHODS}, got {self.methods}")
        if not self.mu > 0:
            raise StudyError(f"viscosity must be positive, got {self.mu}")
        if not self.tol > 0:
            raise StudyError("solver tolerance must be positive")
        if self.fmt not in ('csv', 'md'):
            raise StudyError(f"unknown report format {self.fmt!r}")
        if self.solver not in SOLVER_METHODS:
            raise StudyError(f"unknown solver {self.solver!r}")
        if self.workers < 1:
            raise StudyError("workers must be positive")
        if self.quad_degree < 6:
            raise StudyError("error norms need a quadrature degree of at least 6")
        return self

    def resolutions(self):
        """n per level: doubling in 2D, ``step`` increments in 3D."""
        if self.dim == 2:
            return [self.base * 2 ** k for k in range(self.levels)]
        return [self.base + self.step * k for k in range(self.levels)]

    def tolerances(self):
        return {
            'solver_tol': self.tol,
            'inv_tol': self.inv_tol,
            'div_tol': self.div_tol,
            'perturb_tol': self.perturb_tol,
            'perturb_min_dp': self.perturb_min_dp,
            'quad_degree': self.quad_degree,
        }


@dataclass
class L2Error:
    value: float
    relative: bool


@dataclass
class Discretization:
    """Mesh, spaces and assembled operators of one level."""
    n: int
    mu: float
    mesh: object
    space_r: FeSpace
    space_q: FeSpace
    space_p: FeSpace
    A: sp.csr_array
    A_h: object
    B_r: sp.csr_array
    B_q: sp.csr_array
    rhs: RhsVectors

    @property
    def dim(self):
        return self.mesh.dim


@dataclass
class Solution:
    method: str
    r: np.ndarray
    q: np.ndarray
    p: np.ndarray
    space_r: FeSpace
    space_q: FeSpace
    space_p: FeSpace
    n_dof: int
    residual: float
    seconds: float = 0.0


@dataclass
class InvariantRecord:
    inv_p: float
    inv_curl: float
    inv_r2d: Optional[float]
    max_div: float
    q_gap: float
    p_scale: float
    curl_scale: float
    r_scale: float
    pert_dq: Optional[float] = None
    pert_dr: Optional[float] = None
    pert_dp: Optional[float] = None


@dataclass
class NormEquivalence:
    """Sampled Rayleigh ratios r^T A_h r / r^T A r and the local eigenvalue envelope."""
    ratio_min: float
    ratio_max: float
    lower: float
    upper: float


@dataclass
class LevelResult:
    method: str
    dim: int
    level: int
    n: int
    h: float
    n_dof: int
    err_r: float
    err_q: float
    err_p: float
    err_curl_r: float
    err_div_q: float
    err_energy: float
    err_p_center: float
    max_div: float
    residual: float
    wall_time: float
    rate_r: Optional[float] = None
    rate_q: Optional[float] = None
    rate_p: Optional[float] = None
    rate_energy: Optional[float] = None
    rate_p_center: Optional[float] = None
    inv_p: Optional[float] = None
    inv_curl: Optional[float] = None
    inv_r2d: Optional[float] = None
    q_gap: Optional[float] = None
    rate_q_gap: Optional[float] = None
    pert_dq: Optional[float] = None
    pert_dr: Optional[float] = None
    pert_dp: Optional[float] = None
    norm_ratio_min: Optional[float] = None
    norm_ratio_max: Optional[float] = None
    norm_lower: Optional[float] = None
    norm_upper: Optional[float] = None
    absolute: List[str] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)


@dataclass
class ConvergenceReport:
    config: StudyConfig
    rows: List[LevelResult] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)
    wall_time: float = 0.0
    run_id: Optional[int] = None

    def rows_for(self, method):
        return [row for row in self.rows if row.method == method]

    def tolerances(self):
        return self.config.tolerances()


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

def _field_values(func, points):
    shape = points.shape[:-1]
    return np.asarray(func(points.reshape(-1, points.shape[-1])), dtype=float).reshape(shape + (-1,))


def compute_L2_error(space, coefficients, exact=None, relative=True, differential_error=False, degree=None):
    """
    L2 error of a discrete field (or of its curl/divergence) against ``exact``.

    ``exact=None`` stands for the zero field, which turns the result into the
    norm of the discrete field. Relative errors fall back to absolute ones
    when the exact norm vanishes; ``L2Error.relative`` records which one it is.
    """
    mesh = space.mesh
    degree = quadrature.QUAD_DEGREE if degree is None else degree
    rule = quadrature.simplex_rule(mesh.dim, degree)

    if differential_error:
        discrete = differential(space, coefficients)[:, None, :]
    else:
        discrete = evaluate(space, coefficients, rule.points)
    if exact is None:
        reference = np.zeros_like(discrete)
    else:
        reference = _field_values(exact, mesh.cell_points(rule.points))
    discrete = np.broadcast_to(discrete, reference.shape)

    weights = rule.weights[None, :] * mesh.cell_volumes[:, None]
    error = float(np.sqrt(np.sum(weights * np.sum((discrete - reference) ** 2, axis=-1))))
    if not relative:
        return L2Error(error, False)
    norm = float(np.sqrt(np.sum(weights * np.sum(reference ** 2, axis=-1))))
    if norm < ZERO_NORM:
        if exact is not None:
            logger.warning("Exact %s norm %.1e is below %.0e; reporting the absolute error",
                           getattr(exact, 'name', 'field'), norm, ZERO_NORM)
        return L2Error(error, False)
    return L2Error(error / norm, True)


def _norm(space, coefficients, differential_error=False, degree=None):
    return compute_L2_error(space, coefficients, None, relative=False,
                            differential_error=differential_error, degree=degree).value


def cell_center_pressure_error(space_p, p_h, p_exact, degree=None):
    """Relative discrete L2 error of p_h against p sampled at the cell centers."""
    mesh = space_p.mesh
    at_centers = _field_values(p_exact, mesh.cell_centers)[:, 0]
    error = np.sqrt(np.sum(mesh.cell_volumes * (p_h - at_centers) ** 2))
    norm = compute_L2_error(space_p, np.zeros(space_p.n_dofs), p_exact, relative=False,
                            degree=degree).value
    return float(error / norm) if norm >= ZERO_NORM else float(error)


def max_divergence(solution):
    """max over cells of |div q_h|, evaluated exactly (cellwise constant)."""
    return float(np.max(np.abs(differential(solution.space_q, solution.q))))


def convergence_rate(e_coarse, e_fine, h_coarse, h_fine):
    if e_coarse is None or e_fine is None or e_coarse <= 0 or e_fine <= 0:
        return None
    return float(np.log(e_coarse / e_fine) / np.log(h_coarse / h_fine))


# ---------------------------------------------------------------------------
# Discretization and solves
# ---------------------------------------------------------------------------

def discretize(dim, n, mu=1.0, degree=None, mesh=None):
    """Build the spaces and assemble every operator of one level."""
    mesh = build_structured_mesh(dim, n) if mesh is None else mesh
    space_r = build_space(mesh, vorticity_kind(dim))
    space_q = build_space(mesh, RT0)
    space_p = build_space(mesh, P0)
    _, _, _, g = exact_fields(dim, mu)
    q0, p0 = boundary_data(dim)
    return Discretization(
        n=n,
        mu=mu,
        mesh=mesh,
        space_r=space_r,
        space_q=space_q,
        space_p=space_p,
        A=assemble_exact_vorticity_mass(space_r, mu),
        A_h=assemble_quadrature_vorticity_mass(space_r, mu),
        B_r=assemble_curl(space_r, space_q),
        B_q=assemble_div(space_q, space_p),
        rhs=assemble_rhs(g, p0, q0, space_r, space_q, degree),
    )


def _flags(*spaces):
    flags = np.concatenate([s.essential for s in spaces])
    return flags if flags.any() else None


def solve_three_field(disc, tol=SOLVER_TOL, method='direct', rhs=None, A=None, name=THREE_FIELD):
    """Monolithic solve of the three-field system with vorticity mass ``A`` (default: exact)."""
    rhs = disc.rhs if rhs is None else rhs
    A = disc.A if A is None else A
    start = time.perf_counter()
    system = three_field_system(A, disc.B_r, disc.B_q, rhs,
                                _flags(disc.space_r, disc.space_q, disc.space_p))
    x, residual = solve_saddle(system, tol, method)
    parts = system.split(x)
    return Solution(name, parts['r'], parts['q'], parts['p'],
                    disc.space_r, disc.space_q, disc.space_p,
                    n_dof=system.size, residual=residual,
                    seconds=time.perf_counter() - start)


def solve_augmented(disc, tol=SOLVER_TOL, method='direct', rhs=None):
    """Three-field system with A replaced by A_h, solved without elimination."""
    return solve_three_field(disc, tol, method, rhs, A=disc.A_h.to_sparse(), name='augmented')


def solve_multipoint(disc, tol=SOLVER_TOL, method='direct', rhs=None):
    """Reduced (q, p) solve followed by vertex-local vorticity reconstruction."""
    rhs = disc.rhs if rhs is None else rhs
    start = time.perf_counter()
    free = ~disc.space_r.essential
    A_h_inv = invert_vertex_blocks(disc.A_h.restrict(free))
    B_r = disc.B_r
    if not free.all():
        B_r = (B_r @ sp.diags_array(free.astype(float))).tocsr()
        rhs = RhsVectors(np.where(free, rhs.f_r, 0.0), rhs.f_q, rhs.f_p)
    reduced = build_reduced_system(B_r, disc.B_q, A_h_inv, rhs)
    system = reduced_saddle_system(reduced, _flags(disc.space_q, disc.space_p))
    x, residual = solve_saddle(system, tol, method)
    parts = system.split(x)
    r = reconstruct_vorticity(A_h_inv, B_r, rhs.f_r, parts['q'], disc.space_r)
    return Solution(MULTIPOINT, r.coefficients, parts['q'], parts['p'],
                    disc.space_r, disc.space_q, disc.space_p,
                    n_dof=system.size, residual=residual,
                    seconds=time.perf_counter() - start)


SOLVERS = {
    THREE_FIELD: solve_three_field,
    MULTIPOINT: solve_multipoint,
}


def perturbed_rhs(disc, degree=None):
    """Right-hand side with the body force shifted by grad(phi)."""
    shift = assemble_gradient_forcing(disc.space_q, perturbation_potential(disc.dim), degree)
    return RhsVectors(disc.rhs.f_r, disc.rhs.f_q + shift, disc.rhs.f_p)


# ---------------------------------------------------------------------------
# Invariants
# ---------------------------------------------------------------------------

def perturbation_deltas(solution, perturbed, degree=None):
    return (
        _norm(solution.space_q, solution.q - perturbed.q, degree=degree),
        _norm(solution.space_r, solution.r - perturbed.r, degree=degree),
        _norm(solution.space_p, solution.p - perturbed.p, degree=degree),
    )


def check_invariants(sol_3f, sol_mv, perturbed_mv=None, degree=None):
    """
    Differences between the two methods on identical spaces: pressures,
    vorticity curls, (2D) vorticities and velocities, the largest cellwise
    divergence of the MV velocity, and optionally the effect of a gradient
    perturbation of the forcing on the MV solution.
    """
    for name in ('space_r', 'space_q', 'space_p'):
        if getattr(sol_3f, name) is not getattr(sol_mv, name):
            raise StudyError(f"solutions live on different {name[-1]} spaces")

    dim = sol_3f.space_r.dim
    record = InvariantRecord(
        inv_p=_norm(sol_3f.space_p, sol_3f.p - sol_mv.p, degree=degree),
        inv_curl=_norm(sol_3f.space_r, sol_3f.r - sol_mv.r, differential_error=True, degree=degree),
        inv_r2d=_norm(sol_3f.space_r, sol_3f.r - sol_mv.r, degree=degree) if dim == 2 else None,
        max_div=max_divergence(sol_mv),
        q_gap=_norm(sol_3f.space_q, sol_3f.q - sol_mv.q, degree=degree),
        p_scale=max(1.0, _norm(sol_3f.space_p, sol_3f.p, degree=degree)),
        curl_scale=max(1.0, _norm(sol_3f.space_r, sol_3f.r, differential_error=True, degree=degree)),
        r_scale=_norm(sol_3f.space_r, sol_3f.r, degree=degree),
    )
    if perturbed_mv is not None:
        record.pert_dq, record.pert_dr, record.pert_dp = perturbation_deltas(sol_mv, perturbed_mv, degree)
    return record


def invariant_failures(record, config):
    failures = []
    if record.inv_p > config.inv_tol * record.p_scale:
        failures.append(f"pressure mismatch {record.inv_p:.3e}")
    if record.inv_curl > config.inv_tol * record.curl_scale:
        failures.append(f"vorticity curl mismatch {record.inv_curl:.3e}")
    if record.inv_r2d is not None and record.inv_r2d > config.inv_tol * record.r_scale:
        failures.append(f"2D vorticity mismatch {record.inv_r2d:.3e}")
    failures.extend(_perturbation_failures(record.pert_dq, record.pert_dr, record.pert_dp, config))
    return failures


def _perturbation_failures(dq, dr, dp, config):
    if dq is None:
        return []
    failures = []
    if dq > config.perturb_tol or dr > config.perturb_tol:
        failures.append(f"gradient forcing moved velocity/vorticity by {dq:.3e}/{dr:.3e}")
    if not dp > config.perturb_min_dp:
        failures.append(f"gradient forcing moved the pressure by only {dp:.3e}")
    return failures


def norm_equivalence(disc, samples=100, seed=0):
    """
    Compare the quadrature and exact vorticity norms.

    The local generalized eigenvalues of (A_h|cell, A|cell) bound every global
    ratio r^T A_h r / r^T A r, since both forms are sums of cell contributions.
    """
    space = disc.space_r
    local_exact = local_mass_matrices(space, quadrature.simplex_rule(space.dim, 2), disc.mu)
    local_lumped = local_mass_matrices(space, quadrature.vertex_rule(space.dim), disc.mu)
    chol = np.linalg.cholesky(local_exact)
    left = np.linalg.solve(chol, local_lumped)
    congruent = np.linalg.solve(chol, np.swapaxes(left, 1, 2))
    eigenvalues = np.linalg.eigvalsh(0.5 * (congruent + np.swapaxes(congruent, 1, 2)))

    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((space.n_dofs, samples))
    lumped = np.sum(vectors * (disc.A_h.to_sparse() @ vectors), axis=0)
    exact = np.sum(vectors * (disc.A @ vectors), axis=0)
    ratios = lumped / exact
    return NormEquivalence(float(ratios.min()), float(ratios.max()),
                           float(eigenvalues.min()), float(eigenvalues.max()))


# ---------------------------------------------------------------------------
# Convergence runs
# ---------------------------------------------------------------------------

def _errors(solution, disc, row_args, degree=None):
    dim, mu = disc.dim, disc.mu
    q, p, r, _ = exact_fields(dim, mu)
    curl_r = vorticity_curl(dim, mu)
    absolute = []

    def tracked(name, *args, **kwargs):
        result = compute_L2_error(*args, degree=degree, **kwargs)
        if not result.relative:
            absolute.append(name)
        return result.value

    err_r = tracked('err_r', solution.space_r, solution.r, r)
    err_q = tracked('err_q', solution.space_q, solution.q, q)
    err_p = tracked('err_p', solution.space_p, solution.p, p)
    err_curl = tracked('err_curl_r', solution.space_r, solution.r, curl_r, differential_error=True)
    err_div = tracked('err_div_q', solution.space_q, solution.q, None, differential_error=True)

    energy = np.sqrt(sum(
        compute_L2_error(*args, relative=False, differential_error=diff, degree=degree).value ** 2
        for args, diff in (
            ((solution.space_r, solution.r, r), False),
            ((solution.space_r, solution.r, curl_r), True),
            ((solution.space_q, solution.q, q), False),
            ((solution.space_q, solution.q, None), True),
            ((solution.space_p, solution.p, p), False),
        )
    ))
    return LevelResult(
        method=solution.method,
        n_dof=solution.n_dof,
        err_r=err_r,
        err_q=err_q,
        err_p=err_p,
        err_curl_r=err_curl,
        err_div_q=err_div,
        err_energy=float(energy),
        err_p_center=cell_center_pressure_error(solution.space_p, solution.p, p, degree),
        max_div=max_divergence(solution),
        residual=solution.residual,
        wall_time=solution.seconds,
        absolute=absolute,
        **row_args,
    )


def _export_level(config, disc, solution):
    from report import export_vtk

    centroid = np.full((1, disc.dim + 1), 1.0 / (disc.dim + 1))
    fields = {
        'p_h': solution.p,
        'div_q_h': np.abs(differential(solution.space_q, solution.q)[:, 0]),
        'q_h': evaluate(solution.space_q, solution.q, centroid)[:, 0, :],
    }
    path = os.path.join(config.vtk_dir, f"{solution.method}_d{disc.dim}_n{disc.n}.vtk")
    export_vtk(disc.mesh, fields, path)


def run_level(config, index):
    """Solve one level with every requested method and return its rows."""
    n = config.resolutions()[index]
    level = index + 1
    start = time.perf_counter()
    try:
        disc = discretize(config.dim, n, config.mu, config.quad_degree)
        solutions = {m: SOLVERS[m](disc, config.tol, config.solver) for m in config.methods}
        perturbed = {}
        if config.perturb_pressure:
            rhs = perturbed_rhs(disc, config.quad_degree)
            perturbed = {m: SOLVERS[m](disc, config.tol, config.solver, rhs) for m in config.methods}
    except SolverError as e:
        raise SolverError(f"level {level} (n={n}): {e}", residuals=e.residuals, pivot=e.pivot) from e

    h = mesh_size(disc.mesh)
    equivalence = norm_equivalence(disc, config.samples, config.seed + index)
    record = None
    if THREE_FIELD in solutions and MULTIPOINT in solutions:
        record = check_invariants(solutions[THREE_FIELD], solutions[MULTIPOINT],
                                  degree=config.quad_degree)

    rows = []
    for method in config.methods:
        solution = solutions[method]
        row_args = dict(dim=config.dim, level=level, n=n, h=h)
        row = _errors(solution, disc, row_args, config.quad_degree)
        row.norm_ratio_min, row.norm_ratio_max = equivalence.ratio_min, equivalence.ratio_max
        row.norm_lower, row.norm_upper = equivalence.lower, equivalence.upper
        if method in perturbed:
            row.pert_dq, row.pert_dr, row.pert_dp = perturbation_deltas(
                solution, perturbed[method], config.quad_degree)
            row.failures.extend(_perturbation_failures(row.pert_dq, row.pert_dr, row.pert_dp, config))
        if record is not None:
            row.inv_p, row.inv_curl, row.inv_r2d = record.inv_p, record.inv_curl, record.inv_r2d
            if method == MULTIPOINT:
                row.q_gap = record.q_gap
                row.failures.extend(invariant_failures(record, config))
        if row.max_div > config.div_tol:
            row.failures.append(f"max |div q_h| = {row.max_div:.3e}")
        if config.vtk_dir:
            _export_level(config, disc, solution)
        rows.append(row)

    logger.info("Level %d: n=%d h=%.3e dofs=%s in %.2fs", level, n, h,
                {row.method: row.n_dof for row in rows}, time.perf_counter() - start)
    return rows


def compute_rates(rows):
    """Fill the rate columns from consecutive levels of each method."""
    pairs = [('err_r', 'rate_r'), ('err_q', 'rate_q'), ('err_p', 'rate_p'),
             ('err_energy', 'rate_energy'), ('err_p_center', 'rate_p_center'),
             ('q_gap', 'rate_q_gap')]
    by_method: Dict[str, List[LevelResult]] = {}
    for row in rows:
        by_method.setdefault(row.method, []).append(row)
    for method_rows in by_method.values():
        method_rows.sort(key=lambda row: row.level)
        for coarse, fine in zip(method_rows, method_rows[1:]):
            for error, rate in pairs:
                setattr(fine, rate, convergence_rate(
                    getattr(coarse, error), getattr(fine, error), coarse.h, fine.h))
    return rows


def _check_norm_bounds(report, path):
    import database as db

    rows = [row for row in report.rows if row.norm_lower is not None]
    if not rows:
        return []
    dim = report.config.dim
    stored = db.get_norm_bounds(dim, path)
    if stored is None:
        lower = min(row.norm_lower for row in rows)
        upper = max(row.norm_upper for row in rows)
        db.record_norm_bounds(dim, lower, upper, path)
        logger.info("Recorded %dD norm-equivalence interval [%.6f, %.6f]", dim, lower, upper)
        stored = {'lower': lower, 'upper': upper}
    failures = []
    for row in rows:
        if (row.norm_ratio_min < stored['lower'] * (1 - BOUND_SLACK)
                or row.norm_ratio_max > stored['upper'] * (1 + BOUND_SLACK)):
            failures.append(
                f"{row.method} level {row.level}: norm ratios [{row.norm_ratio_min:.6f}, "
                f"{row.norm_ratio_max:.6f}] leave the recorded interval "
                f"[{stored['lower']:.6f}, {stored['upper']:.6f}]")
    return failures


def run_convergence(config):
    """
    Run every level of ``config`` (concurrently with ``workers`` > 1) and
    merge the rows in level order.

    Raises:
        StudyError: invalid configuration.
        SolverError: a solve failed; the message names the level.
    """
    config.validate()
    start = time.perf_counter()
    indices = range(config.levels)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_level = list(pool.map(run_level, [config] * config.levels, indices))
    else:
        per_level = [run_level(config, i) for i in indices]

    rows = compute_rates([row for level_rows in per_level for row in level_rows])
    report = ConvergenceReport(config=config, rows=rows)
    for row in rows:
        report.failures.extend(f"{row.method} level {row.level}: {msg}" for msg in row.failures)

    if config.database:
        import database as db

        report.failures.extend(_check_norm_bounds(report, config.database))
    report.wall_time = time.perf_counter() - start
    if config.database:
        report.run_id = db.save_report(report, config.database)
    logger.info("Study finished in %.2fs with %d failure(s)", report.wall_time, len(report.failures))
    return report


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _parse_methods(text):
    return tuple(m.strip().lower() for m in text.split(',') if m.strip())


def build_parser():
    parser = argparse.ArgumentParser(
        prog='study',
        description='Convergence study of the three-field and multipoint vorticity methods.')
    parser.add_argument('--dim', type=int, choices=(2, 3), default=2)
    parser.add_argument('--base', type=int, default=None,
                        help='resolution of the first level (default 8 in 2D, 2 in 3D)')
    parser.add_argument('--levels', type=int, default=None,
                        help='number of levels (default 4 in 2D, 3 in 3D)')
    parser.add_argument('--step', type=int, default=1, help='3D resolution increment per level')
    parser.add_argument('--methods', type=_parse_methods, default=(MULTIPOINT, THREE_FIELD))
    parser.add_argument('--mu', type=float, default=1.0)
    parser.add_argument('--tol', type=float, default=SOLVER_TOL)
    parser.add_argument('--solver', choices=SOLVER_METHODS, default='direct')
    parser.add_argument('--perturb-pressure', action='store_true')
    parser.add_argument('--format', dest='fmt', choices=('csv', 'md'), default='csv')
    parser.add_argument('--out', default=None)
    parser.add_argument('--vtk-dir', default=None)
    parser.add_argument('--workers', type=int, default=1)
    parser.add_argument('--db', dest='database', default=None,
                        help='sqlite file that stores the run and the norm-equivalence interval')
    parser.add_argument('--assert', dest='check', action='store_true',
                        help='exit with code 3 when an invariant fails')
    return parser


def _output_path(path):
    """Bare file names go to OUTPUT_DIR; paths with a directory are kept."""
    if path and not os.path.dirname(path):
        return os.path.join(OUTPUT_DIR, path)
    return path


def config_from_args(args):
    dim = args.dim
    return StudyConfig(
        dim=dim,
        base=args.base if args.base is not None else (8 if dim == 2 else 2),
        levels=args.levels if args.levels is not None else (4 if dim == 2 else 3),
        methods=args.methods,
        mu=args.mu,
        tol=args.tol,
        perturb_pressure=args.perturb_pressure,
        fmt=args.fmt,
        out=_output_path(args.out),
        vtk_dir=args.vtk_dir,
        step=args.step,
        workers=args.workers,
        database=args.database,
        solver=args.solver,
    )


def main(argv=None):
    load_dotenv()
    logging.basicConfig(level=os.environ.get('STUDY_LOG_LEVEL', LOG_LEVEL),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    args = build_parser().parse_args(argv)

    from report import emit_report, render_report

    try:
        config = config_from_args(args).validate()
        report = run_convergence(config)
        if config.out:
            emit_report(report, config.fmt, config.out)
        else:
            print(render_report(report, config.fmt))
    except SolverError as e:
        print(f"Error: solver failure: {e}")
        if e.residuals:
            print(f"  residual history: {', '.join(f'{r:.3e}' for r in e.residuals)}")
        return 2
    except (StudyError, OSError) as e:
        print(f"Error: {e}")
        return 1

    print("-------------------------------------------")
    print(f"  {len(config.resolutions())} levels, methods {', '.join(config.methods)}")
    if config.out:
        print(f"  Report:   {config.out}")
    if report.run_id is not None:
        print(f"  Run id:   {report.run_id}")
    print(f"  Failures: {len(report.failures)}")
    for failure in report.failures:
        print(f"    - {failure}")
    print("-------------------------------------------")

    if args.check and report.failures:
        return 3
    return 0


if __name__ == '__main__':
    sys.exit(main())
