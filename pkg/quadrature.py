"""
Quadrature rules on simplices.

Rules are stored in barycentric coordinates with weights normalized to sum
to one, so the physical rule on a cell is ``points -> sum_i bary_i x_i`` and
``weights * |cell|``.

The general-degree rule is a collapsed (Duffy) tensor product of Gauss-Jacobi
rules, which is exact for every polynomial of total degree <= ``degree``.
"""

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

# Degree for data terms, interpolation and error norms
QUAD_DEGREE = int(os.environ.get('STUDY_QUAD_DEGREE', '6'))


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points (nq, dim+1) and weights (nq,) summing to 1."""
    dim: int
    degree: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def size(self):
        return len(self.weights)


def _readonly(array):
    array = np.ascontiguousarray(array, dtype=float)
    array.setflags(write=False)
    return array


def _gauss_jacobi_unit(m, alpha):
    """Gauss-Jacobi nodes/weights on [0, 1] for the weight (1 - t)^alpha."""
    x, w = roots_jacobi(m, alpha, 0.0)
    return (x + 1.0) / 2.0, w / 2.0 ** (alpha + 1)


@lru_cache(maxsize=None)
def simplex_rule(dim, degree):
    """
    Collapsed Gauss-Jacobi rule on the reference ``dim``-simplex.

    Args:
        dim: 1, 2 or 3.
        degree: polynomial degree the rule integrates exactly.

    Returns:
        QuadratureRule with ((degree + 2) // 2) ** dim points.
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"unsupported simplex dimension {dim}")
    if degree < 0:
        raise ValueError("quadrature degree must be non-negative")

    m = max(1, (degree + 2) // 2)
    # Coordinate k carries the Jacobian factor (1 - t_k)^(dim - 1 - k)
    factors = [_gauss_jacobi_unit(m, float(dim - 1 - k)) for k in range(dim)]

    grids = np.meshgrid(*[f[0] for f in factors], indexing="ij")
    wgrids = np.meshgrid(*[f[1] for f in factors], indexing="ij")
    t = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)

    x = np.empty_like(t)
    scale = np.ones(len(t))
    for k in range(dim):
        x[:, k] = t[:, k] * scale
        scale = scale * (1.0 - t[:, k])

    bary = np.column_stack([1.0 - x.sum(axis=1), x])
    # Weights integrate to the reference volume 1/dim!
    weights = weights * math.factorial(dim)
    return QuadratureRule(dim, degree, _readonly(bary), _readonly(weights))


@lru_cache(maxsize=None)
def vertex_rule(dim):
    """Vertex (trapezoidal) rule: each vertex weighted 1/(dim+1), exact for degree 1."""
    points = np.eye(dim + 1)
    weights = np.full(dim + 1, 1.0 / (dim + 1))
    return QuadratureRule(dim, 1, _readonly(points), _readonly(weights))


@lru_cache(maxsize=None)
def facet_rule(dim, degree):
    """
    Facet rules embedded in cell barycentric coordinates.

    Returns a tuple of ``dim + 1`` rules; rule ``i`` lives on the facet
    opposite local vertex ``i`` (its ``i``-th barycentric coordinate is 0).
    """
    if dim not in (2, 3):
        raise ValueError(f"unsupported cell dimension {dim}")
    base = simplex_rule(dim - 1, degree)
    rules = []
    for i in range(dim + 1):
        points = np.insert(base.points, i, 0.0, axis=1)
        weights = base.weights
        rules.append(QuadratureRule(dim, degree, _readonly(points), _readonly(weights)))
    return tuple(rules)
