"""
Vertex-local elimination of the vorticity.

With A replaced by the block-diagonal A_h, the first row of the augmented
system gives r_h = A_h^-1 (f_r + B_r^T q_h). Substituting into the second
row leaves a symmetric saddle system in (q_h, p_h) only:

    [ B_r A_h^-1 B_r^T   -B_q^T ] [q_h]   [f_q - B_r A_h^-1 f_r]
    [ -B_q                 0    ] [p_h] = [0                   ]
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from assembly import RhsVectors, VertexBlockMatrix
from fespace import DofVector

logger = logging.getLogger(__name__)


class HybridizationError(ValueError):
    """Singular vertex block or inconsistent operator dimensions."""

    def __init__(self, message, vertex=None):
        super().__init__(message)
        self.vertex = vertex


@dataclass
class ReducedSystem:
    S: sp.csr_array
    B_q: sp.csr_array
    rhs_q: np.ndarray
    rhs_p: np.ndarray


def invert_vertex_blocks(A_h):
    """Invert every vertex block through its Cholesky factor."""
    inverse = VertexBlockMatrix(A_h.n_dofs)
    for block, dofs, vertex in zip(A_h.blocks, A_h.dofs, A_h.vertices):
        try:
            factor = cho_factor(block, lower=True, check_finite=False)
        except LinAlgError as e:
            raise HybridizationError(
                f"vertex {vertex}: block of size {len(dofs)} is not positive definite ({e})",
                vertex=vertex) from e
        block_inv = cho_solve(factor, np.eye(len(dofs)), check_finite=False)
        inverse.blocks.append(0.5 * (block_inv + block_inv.T))
        inverse.dofs.append(dofs)
        inverse.vertices.append(vertex)
    logger.debug("Inverted %d vertex blocks", inverse.n_blocks)
    return inverse


def _check_shapes(B_r, B_q, A_h_inv, f):
    n_q, n_r = B_r.shape
    if n_r != A_h_inv.n_dofs:
        raise HybridizationError(f"B_r has {n_r} columns, A_h has {A_h_inv.n_dofs} dofs")
    if B_q.shape[1] != n_q:
        raise HybridizationError(f"B_q has {B_q.shape[1]} columns, B_r has {n_q} rows")
    if len(f.f_r) != n_r or len(f.f_q) != n_q or len(f.f_p) != B_q.shape[0]:
        raise HybridizationError("right-hand side lengths do not match the operators")


def build_reduced_system(B_r, B_q, A_h_inv, f: RhsVectors):
    """
    S = B_r A_h^-1 B_r^T, the sum of per-vertex contributions
    B_r[:, V] A_V^-1 B_r[:, V]^T, and the condensed right-hand side.
    """
    _check_shapes(B_r, B_q, A_h_inv, f)
    B_r = sp.csr_array(B_r)
    inverse = A_h_inv.to_sparse()
    S = (B_r @ inverse @ B_r.T).tocsr()
    # Exact symmetry of the stored values
    S = ((S + S.T) * 0.5).tocsr()
    S.sum_duplicates()
    rhs_q = f.f_q - B_r @ A_h_inv.matvec(f.f_r)
    logger.debug("Reduced system: %d velocity dofs, %d nonzeros", S.shape[0], S.nnz)
    return ReducedSystem(S=S, B_q=sp.csr_array(B_q), rhs_q=rhs_q, rhs_p=np.zeros(B_q.shape[0]))


def apply_schur(B_r, A_h_inv, q):
    """S q evaluated factor by factor, without forming S."""
    return B_r @ A_h_inv.matvec(B_r.T @ q)


def reconstruct_vorticity(A_h_inv, B_r, f_r, q_h, space_r):
    """r_h = A_h^-1 (f_r + B_r^T q_h) in ``space_r``; dofs outside every block stay 0."""
    return DofVector(space_r, A_h_inv.matvec(f_r + B_r.T @ q_h))
