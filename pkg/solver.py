"""
Saddle-point systems of both methods and their solution.

The default path is a sparse LU (SuperLU) with a COLAMD column ordering
followed by a few steps of iterative refinement; MINRES is
available for the symmetric indefinite systems as an alternative.
"""

import logging
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgWarning, lu_factor
from scipy.sparse.linalg import minres, splu

from assembly import apply_essential_bc

logger = logging.getLogger(__name__)

SOLVER_TOL = float(os.environ.get('STUDY_SOLVER_TOL', '1e-10'))
METHODS = ('direct', 'minres')
MAX_REFINEMENTS = 3
# SuperLU column ordering
PERMC_SPEC = 'COLAMD'
# Largest system for which a dense LU is used to locate a zero pivot
DENSE_PIVOT_LIMIT = 4000


class SolverError(RuntimeError):
    """Breakdown, non-convergence or singular factorization."""

    def __init__(self, message, residuals=None, pivot=None):
        super().__init__(message)
        self.residuals = list(residuals or [])
        self.pivot = pivot

    def __reduce__(self):
        return type(self), (self.args[0], self.residuals, self.pivot)


@dataclass
class SaddleSystem:
    """Symmetric indefinite system with named, contiguous unknown blocks."""
    matrix: sp.csr_array
    rhs: np.ndarray
    blocks: Dict[str, slice] = field(default_factory=dict)

    @property
    def size(self):
        return self.matrix.shape[0]

    def split(self, x):
        return {name: x[span] for name, span in self.blocks.items()}


def _layout(**sizes):
    blocks, offset = {}, 0
    for name, size in sizes.items():
        blocks[name] = slice(offset, offset + size)
        offset += size
    return blocks


def three_field_system(A, B_r, B_q, rhs, flags=None):
    """
    Symmetrized three-field system in (r, q, p):

        [ A     -B_r^T   0    ]       [ f_r ]
        [ -B_r   0       B_q^T]  and  [-f_q ]
        [ 0      B_q     0    ]       [ 0   ]

    ``A`` is the exact vorticity mass for the three-field method, or A_h
    (as a sparse matrix) for the augmented multipoint system.
    """
    A = sp.csr_array(A)
    B_r, B_q = sp.csr_array(B_r), sp.csr_array(B_q)
    matrix = sp.block_array([
        [A, -B_r.T, None],
        [-B_r, None, B_q.T],
        [None, B_q, None],
    ], format='csr')
    b = np.concatenate([rhs.f_r, -rhs.f_q, rhs.f_p])
    if flags is not None:
        matrix, b = apply_essential_bc(matrix, b, flags)
    return SaddleSystem(matrix, b, _layout(r=A.shape[0], q=B_r.shape[0], p=B_q.shape[0]))


def reduced_saddle_system(reduced, flags=None):
    """[[S, -B_q^T], [-B_q, 0]] in (q, p) with right-hand side [rhs_q, 0]."""
    B_q = reduced.B_q
    matrix = sp.block_array([
        [reduced.S, -B_q.T],
        [-B_q, None],
    ], format='csr')
    b = np.concatenate([reduced.rhs_q, reduced.rhs_p])
    if flags is not None:
        matrix, b = apply_essential_bc(matrix, b, flags)
    return SaddleSystem(matrix, b, _layout(q=B_q.shape[1], p=B_q.shape[0]))


def _residual(matrix, x, b, scale):
    return float(np.linalg.norm(b - matrix @ x)) / scale


def _zero_pivot(matrix):
    """Index of the smallest pivot of a dense LU, or None for large systems."""
    if matrix.shape[0] > DENSE_PIVOT_LIMIT:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', LinAlgWarning)
        lu, _ = lu_factor(matrix.toarray(), check_finite=False)
    return int(np.argmin(np.abs(np.diag(lu))))


def factorize(matrix):
    """Sparse LU factors of a saddle matrix (SuperLU object)."""
    return splu(sp.csc_array(matrix), permc_spec=PERMC_SPEC)


def _solve_direct(matrix, b, tol, scale):
    try:
        lu = factorize(matrix)
    except RuntimeError as e:
        pivot = _zero_pivot(matrix)
        raise SolverError(f"singular factorization ({e}); pivot {pivot}", pivot=pivot) from e

    x = lu.solve(b)
    history = [_residual(matrix, x, b, scale)]
    for _ in range(MAX_REFINEMENTS):
        if history[-1] <= tol or not np.isfinite(history[-1]):
            break
        x = x + lu.solve(b - matrix @ x)
        history.append(_residual(matrix, x, b, scale))
        logger.warning("Refinement step: residual %.3e", history[-1])
    return x, history


def _solve_minres(matrix, b, tol, scale):
    history: List[float] = []

    def record(xk):
        history.append(_residual(matrix, xk, b, scale))

    x, info = minres(matrix, b, rtol=0.1 * tol, maxiter=10 * matrix.shape[0], callback=record)
    history.append(_residual(matrix, x, b, scale))
    if info < 0:
        raise SolverError(f"MINRES breakdown (info={info})", residuals=history)
    return x, history


def solve_saddle(system, tol=SOLVER_TOL, method='direct'):
    """
    Solve ``system`` to relative residual ``tol``.

    Returns:
        (x, residual) with residual = |b - Mx| / |b| (0 for a zero rhs).

    Raises:
        SolverError: singular factorization (with the pivot index when it can
            be located) or residual above ``tol`` (with the residual history).
    """
    if method not in METHODS:
        raise SolverError(f"unknown solver method {method!r}")
    matrix, b = system.matrix, np.asarray(system.rhs, dtype=float)
    if len(b) != matrix.shape[0]:
        raise SolverError(f"rhs of length {len(b)} for a system of size {matrix.shape[0]}")
    scale = float(np.linalg.norm(b))
    if scale == 0.0:
        return np.zeros(len(b)), 0.0

    if method == 'direct':
        x, history = _solve_direct(matrix, b, tol, scale)
    else:
        x, history = _solve_minres(matrix, b, tol, scale)

    residual = history[-1]
    if not residual <= tol:
        raise SolverError(
            f"{method} solve reached relative residual {residual:.3e} > {tol:.1e}",
            residuals=history)
    logger.debug("Solved %d unknowns with %s: residual %.3e", len(b), method, residual)
    return x, residual


def system_rank(system) -> Optional[int]:
    """Dense rank of small systems (diagnostics only)."""
    if system.size > DENSE_PIVOT_LIMIT:
        return None
    return int(np.linalg.matrix_rank(system.matrix.toarray()))
