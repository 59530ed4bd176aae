"""
Manufactured solutions on the unit square/cube.

The velocity is the curl of a polynomial bubble, so it is solenoidal and
vanishes on the boundary; the pressure vanishes on the boundary as well,
which makes the homogeneous data q0 = 0, p0 = 0 on the whole boundary
consistent. For constant viscosity the body force is

    g = -div(2 mu eps(q) - p I) = curl r + grad p,   r = mu curl q.

All expressions are closed forms written in terms of the one-dimensional
factors below.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class AnalyticField:
    """Pointwise evaluator of a scalar or vector field on points of shape (N, dim)."""
    dim: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    degree: Optional[int] = None
    components: int = 1
    name: str = ''

    def __call__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return self.evaluator(points)


# a(t) = t^2 (t - 1)^2 and derivatives
def _a(t):
    return t ** 2 * (t - 1.0) ** 2


def _da(t):
    return 2.0 * t * (t - 1.0) * (2.0 * t - 1.0)


def _d2a(t):
    return 12.0 * t ** 2 - 12.0 * t + 2.0


def _d3a(t):
    return 24.0 * t - 12.0


# b(t) = t (1 - t)
def _b(t):
    return t * (1.0 - t)


def _db(t):
    return 1.0 - 2.0 * t


def _check(dim, mu):
    if dim not in (2, 3):
        raise ValueError(f"unsupported dimension {dim}")
    if mu <= 0:
        raise ValueError(f"viscosity must be positive, got {mu}")


def _fields_2d(mu):
    def q(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack([_a(x) * _da(y), -_da(x) * _a(y)])

    def p(pts):
        x, y = pts[:, 0], pts[:, 1]
        return _b(x) * _b(y)

    def r(pts):
        x, y = pts[:, 0], pts[:, 1]
        return -mu * (_d2a(x) * _a(y) + _a(x) * _d2a(y))

    def curl_r(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack([
            -mu * (_d2a(x) * _da(y) + _a(x) * _d3a(y)),
            mu * (_d3a(x) * _a(y) + _da(x) * _d2a(y)),
        ])

    def grad_p(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.column_stack([_db(x) * _b(y), _b(x) * _db(y)])

    return q, p, r, curl_r, grad_p


def _fields_3d(mu):
    def q(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return np.column_stack([
            np.zeros_like(x),
            _b(x) * _a(y) * _da(z),
            -_b(x) * _da(y) * _a(z),
        ])

    def p(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return _b(x) * _b(y) * _b(z)

    def r(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return mu * np.column_stack([
            -_b(x) * (_d2a(y) * _a(z) + _a(y) * _d2a(z)),
            _db(x) * _da(y) * _a(z),
            _db(x) * _a(y) * _da(z),
        ])

    def curl_r(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return mu * np.column_stack([
            np.zeros_like(x),
            -_b(x) * (_d2a(y) * _da(z) + _a(y) * _d3a(z)) + 2.0 * _a(y) * _da(z),
            _b(x) * (_d3a(y) * _a(z) + _da(y) * _d2a(z)) - 2.0 * _da(y) * _a(z),
        ])

    def grad_p(pts):
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        return np.column_stack([
            _db(x) * _b(y) * _b(z),
            _b(x) * _db(y) * _b(z),
            _b(x) * _b(y) * _db(z),
        ])

    return q, p, r, curl_r, grad_p


# Declared polynomial degrees of (q, p, r, curl r, g) per dimension
_DEGREES = {
    2: (7, 4, 6, 5, 5),
    3: (9, 6, 8, 7, 7),
}


def _analytic(dim, mu):
    _check(dim, mu)
    return _fields_2d(mu) if dim == 2 else _fields_3d(mu)


def exact_fields(dim, mu=1.0):
    """
    Exact velocity, pressure, vorticity and body force.

    Returns:
        (q, p, r, g) AnalyticFields; r is scalar in 2D and a vector in 3D.
    """
    q, p, r, curl_r, grad_p = _analytic(dim, mu)
    dq, dp, dr, _, dg = _DEGREES[dim]

    def g(pts):
        return curl_r(pts) + grad_p(pts)

    r_components = 1 if dim == 2 else 3
    return (
        AnalyticField(dim, q, dq, dim, 'q'),
        AnalyticField(dim, p, dp, 1, 'p'),
        AnalyticField(dim, r, dr, r_components, 'r'),
        AnalyticField(dim, g, dg, dim, 'g'),
    )


def vorticity_curl(dim, mu=1.0):
    """curl r of the exact vorticity (a vector field in 2D and 3D)."""
    _, _, _, curl_r, _ = _analytic(dim, mu)
    return AnalyticField(dim, curl_r, _DEGREES[dim][3], dim, 'curl_r')


def pressure_gradient(dim):
    """grad p of the exact pressure."""
    _, _, _, _, grad_p = _analytic(dim, 1.0)
    return AnalyticField(dim, grad_p, _DEGREES[dim][1] - 1, dim, 'grad_p')


def perturbation_potential(dim):
    """phi = prod_i sin(pi x_i), vanishing on the boundary of the unit domain."""
    if dim not in (2, 3):
        raise ValueError(f"unsupported dimension {dim}")

    def phi(pts):
        return np.prod(np.sin(np.pi * pts[:, :dim]), axis=1)

    return AnalyticField(dim, phi, None, 1, 'phi')


def gradient_perturbation(dim):
    """grad phi for the pressure-robustness check (phi from perturbation_potential)."""
    if dim not in (2, 3):
        raise ValueError(f"unsupported dimension {dim}")

    def grad_phi(pts):
        s = np.sin(np.pi * pts[:, :dim])
        c = np.cos(np.pi * pts[:, :dim])
        columns = []
        for i in range(dim):
            others = np.prod(np.delete(s, i, axis=1), axis=1)
            columns.append(np.pi * c[:, i] * others)
        return np.column_stack(columns)

    return AnalyticField(dim, grad_phi, None, dim, 'grad_phi')


def boundary_data(dim):
    """Homogeneous boundary data (q0, p0) used with the manufactured solutions."""
    q0 = AnalyticField(dim, lambda pts: np.zeros((len(pts), dim)), 0, dim, 'q0')
    p0 = AnalyticField(dim, lambda pts: np.zeros(len(pts)), 0, 1, 'p0')
    return q0, p0
