"""
Finite element spaces of lowest order on simplicial meshes.

Kinds:
    Lagrange1  continuous P1 scalars (2D vorticity)
    Nedelec2   full-linear H(curl) vectors, two vertex-associated dofs per edge (3D vorticity)
    RT0        lowest-order Raviart-Thomas, one flux dof per facet (velocity)
    P0         piecewise constants (pressure)
    P0vec      piecewise constant fields with k_n components (k_2 = 1, k_3 = 3)

Nedelec2 basis: for an edge (a, b) the dof associated with vertex v in {a, b}
has basis lambda_v grad(lambda_w), w the other endpoint, and its value is the
tangential component r(x_v) . (x_w - x_v). Each dof therefore belongs to
exactly one vertex, which is what makes the vertex quadrature block-diagonal.

RT0 dofs are facet flux integrals against the global facet normal.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

import quadrature
from mesh import LOCAL_EDGES, Q_BOUNDARY

logger = logging.getLogger(__name__)

LAGRANGE1 = 'Lagrange1'
NEDELEC2 = 'Nedelec2'
RT0 = 'RT0'
P0 = 'P0'
P0VEC = 'P0vec'

KINDS = (LAGRANGE1, NEDELEC2, RT0, P0, P0VEC)

BARY_TOL = 1e-12


class SpaceError(ValueError):
    """Unsupported space request or invalid evaluation."""


@dataclass
class FeSpace:
    """Dof layout of one finite element family on a mesh."""
    kind: str
    mesh: object
    n_dofs: int
    cell_dofs: np.ndarray
    essential: np.ndarray
    value_dim: int
    dof_vertex: Optional[np.ndarray] = None
    local_pairs: Optional[np.ndarray] = None

    @property
    def n_local(self):
        return self.cell_dofs.shape[1]

    @property
    def dim(self):
        return self.mesh.dim


@dataclass
class DofVector:
    """Coefficients of a discrete field in ``space``."""
    space: FeSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.n_dofs,):
            raise SpaceError(
                f"{self.space.kind} vector needs {self.space.n_dofs} coefficients, "
                f"got shape {self.coefficients.shape}")


def vorticity_kind(dim):
    return LAGRANGE1 if dim == 2 else NEDELEC2


def build_space(mesh, kind):
    """Build the dof maps and essential-BC flags of ``kind`` on ``mesh``."""
    if kind not in KINDS:
        raise SpaceError(f"unknown space kind {kind!r}")
    dim = mesh.dim
    if kind == NEDELEC2 and dim != 3:
        raise SpaceError("Nedelec2 is only provided in 3D")
    if kind == LAGRANGE1 and dim != 2:
        raise SpaceError("Lagrange1 vorticity is only provided in 2D")

    q_facets = mesh.boundary_facets(Q_BOUNDARY)
    dof_vertex = None
    local_pairs = None

    if kind == LAGRANGE1:
        n_dofs = mesh.n_vertices
        cell_dofs = mesh.cells.copy()
        essential = np.zeros(n_dofs, dtype=bool)
        essential[mesh.facets[q_facets].ravel()] = True
        dof_vertex = np.arange(n_dofs)
        value_dim = 1
    elif kind == NEDELEC2:
        n_dofs = 2 * mesh.n_edges
        ends = LOCAL_EDGES[3]
        gi, gj = mesh.cells[:, ends[:, 0]], mesh.cells[:, ends[:, 1]]
        low = np.where(gi < gj, ends[:, 0], ends[:, 1])
        high = np.where(gi < gj, ends[:, 1], ends[:, 0])
        local_pairs = np.stack(
            [np.stack([low, high], axis=-1), np.stack([high, low], axis=-1)], axis=2
        ).reshape(mesh.n_cells, 12, 2)
        cell_dofs = np.stack([2 * mesh.cell_edges, 2 * mesh.cell_edges + 1], axis=-1).reshape(mesh.n_cells, 12)
        dof_vertex = mesh.edges.ravel().copy()
        essential = np.zeros(n_dofs, dtype=bool)
        q_edges = mesh.face_edges[q_facets].ravel()
        essential[2 * q_edges] = True
        essential[2 * q_edges + 1] = True
        value_dim = 3
    elif kind == RT0:
        n_dofs = mesh.n_facets
        cell_dofs = mesh.cell_facets.copy()
        essential = np.zeros(n_dofs, dtype=bool)
        essential[q_facets] = True
        value_dim = dim
    elif kind == P0:
        n_dofs = mesh.n_cells
        cell_dofs = np.arange(n_dofs)[:, None]
        essential = np.zeros(n_dofs, dtype=bool)
        value_dim = 1
    else:
        k = 1 if dim == 2 else 3
        n_dofs = k * mesh.n_cells
        cell_dofs = np.arange(n_dofs).reshape(mesh.n_cells, k)
        essential = np.zeros(n_dofs, dtype=bool)
        value_dim = k

    logger.debug("Built %s space with %d dofs", kind, n_dofs)
    return FeSpace(kind=kind, mesh=mesh, n_dofs=n_dofs, cell_dofs=cell_dofs,
                   essential=essential, value_dim=value_dim,
                   dof_vertex=dof_vertex, local_pairs=local_pairs)


def _cells(space, cells):
    return np.arange(space.mesh.n_cells) if cells is None else np.asarray(cells)


def tabulate(space, bary, cells=None):
    """
    Basis values at barycentric points ``bary`` (nq, dim+1) of the selected cells.

    Returns:
        np.ndarray of shape (n_cells, nq, n_local, value_dim).
    """
    mesh = space.mesh
    cells = _cells(space, cells)
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    nq, nsel = len(bary), len(cells)

    if space.kind == LAGRANGE1:
        return np.broadcast_to(bary[None, :, :, None], (nsel, nq, 3, 1)).copy()
    if space.kind == NEDELEC2:
        pairs = space.local_pairs[cells]
        lam = np.transpose(bary[:, pairs[..., 0]], (1, 0, 2))
        grads = np.take_along_axis(mesh.cell_gradients[cells], pairs[..., 1][..., None], axis=1)
        return lam[..., None] * grads[:, None, :, :]
    if space.kind == RT0:
        d = mesh.dim
        x = mesh.cell_points(bary, cells)
        corners = mesh.vertices[mesh.cells[cells]]
        scale = mesh.cell_facet_signs[cells] / (d * mesh.cell_volumes[cells][:, None])
        return scale[:, None, :, None] * (x[:, :, None, :] - corners[:, None, :, :])
    k = space.value_dim
    return np.broadcast_to(np.eye(k)[None, None], (nsel, nq, k, k)).copy()


def differentials(space, cells=None):
    """
    Cellwise-constant differentials of the basis: curl for vorticity spaces,
    divergence for RT0. Shape (n_cells, n_local, differential_dim).
    """
    mesh = space.mesh
    cells = _cells(space, cells)
    if space.kind == LAGRANGE1:
        grads = mesh.cell_gradients[cells]
        # 2D curl of a scalar: [d2, -d1]
        return np.stack([grads[..., 1], -grads[..., 0]], axis=-1)
    if space.kind == NEDELEC2:
        pairs = space.local_pairs[cells]
        grads = mesh.cell_gradients[cells]
        gv = np.take_along_axis(grads, pairs[..., 0][..., None], axis=1)
        gw = np.take_along_axis(grads, pairs[..., 1][..., None], axis=1)
        return np.cross(gv, gw)
    if space.kind == RT0:
        div = mesh.cell_facet_signs[cells] / mesh.cell_volumes[cells][:, None]
        return div[..., None]
    raise SpaceError(f"{space.kind} has no differential")


def barycentric(mesh, cell, point):
    """Barycentric coordinates of ``point`` in ``cell``."""
    x0 = mesh.vertices[mesh.cells[cell, 0]]
    bary = mesh.cell_gradients[cell] @ (np.asarray(point, dtype=float) - x0)
    bary[0] += 1.0
    return bary


def eval_basis(space, cell, point):
    """
    Local basis values and differentials at a physical point inside ``cell``.

    Returns:
        (values, diffs): values has shape (n_local,) for scalar spaces and
        (n_local, value_dim) otherwise; diffs is the curl (vorticity spaces),
        the divergence (RT0, shape (n_local,)) or None (P0, P0vec).
    """
    bary = barycentric(space.mesh, cell, point)
    if np.any(bary < -BARY_TOL):
        raise SpaceError(f"point {point} lies outside cell {cell}")
    values = tabulate(space, bary[None, :], [cell])[0, 0]
    if space.kind in (LAGRANGE1, P0):
        values = values[:, 0]
    if space.kind in (P0, P0VEC):
        return values, None
    diffs = differentials(space, [cell])[0]
    if space.kind == RT0:
        diffs = diffs[:, 0]
    return values, diffs


def evaluate(space, coefficients, bary, cells=None):
    """Discrete field at barycentric points, shape (n_cells, nq, value_dim)."""
    cells = _cells(space, cells)
    coefficients = np.asarray(coefficients, dtype=float)
    values = tabulate(space, bary, cells)
    return np.einsum('cqiv,ci->cqv', values, coefficients[space.cell_dofs[cells]])


def differential(space, coefficients):
    """Cellwise curl (vorticity spaces) or divergence (RT0), shape (n_cells, differential_dim)."""
    coefficients = np.asarray(coefficients, dtype=float)
    return np.einsum('civ,ci->cv', differentials(space), coefficients[space.cell_dofs])


def _field_values(field, points):
    """Evaluate ``field`` on points (..., dim), returning (..., components)."""
    shape = points.shape[:-1]
    values = np.asarray(field(points.reshape(-1, points.shape[-1])), dtype=float)
    return values.reshape(shape + (-1,))


def _degree(field, degree):
    declared = getattr(field, 'degree', None) or 0
    return max(quadrature.QUAD_DEGREE if degree is None else degree, declared)


def interpolate(space, field, degree=None):
    """
    Canonical interpolant of an analytic field.

    Lagrange1: vertex values. Nedelec2: tangential components at the edge
    endpoints. RT0: facet flux integrals. P0/P0vec: cell averages (L2
    projection). Integrals use rules of at least the declared field degree.
    """
    mesh = space.mesh
    degree = _degree(field, degree)

    if space.kind == LAGRANGE1:
        coeffs = _field_values(field, mesh.vertices)[:, 0]
    elif space.kind == NEDELEC2:
        xa, xb = mesh.vertices[mesh.edges[:, 0]], mesh.vertices[mesh.edges[:, 1]]
        tangent = xb - xa
        fa, fb = _field_values(field, xa), _field_values(field, xb)
        coeffs = np.column_stack([
            np.einsum('ed,ed->e', fa, tangent),
            -np.einsum('ed,ed->e', fb, tangent),
        ]).ravel()
    elif space.kind == RT0:
        rule = quadrature.simplex_rule(mesh.dim - 1, degree)
        points = np.einsum('qi,fid->fqd', rule.points, mesh.vertices[mesh.facets])
        normal_flux = np.einsum('fqd,fd->fq', _field_values(field, points), mesh.facet_normals)
        coeffs = mesh.facet_measures * (normal_flux @ rule.weights)
    else:
        rule = quadrature.simplex_rule(mesh.dim, degree)
        values = _field_values(field, mesh.cell_points(rule.points))
        averages = np.einsum('cqk,q->ck', values, rule.weights)
        if averages.shape[1] != space.value_dim:
            raise SpaceError(
                f"{space.kind} needs {space.value_dim} components, field has {averages.shape[1]}")
        coeffs = averages.ravel()

    return DofVector(space, coeffs)
