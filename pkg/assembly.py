"""
Assembly of the operators and functionals of the vorticity-velocity-pressure
weak form.

Orientation: B_r maps vorticity dofs to velocity functionals (rows = RT0 dofs),
B_q maps velocity dofs to pressure functionals (rows = cells). Adjoints are
plain transposes.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.sparse as sp

import quadrature
from fespace import LAGRANGE1, NEDELEC2, P0, RT0, tabulate, differentials
from mesh import P_BOUNDARY

logger = logging.getLogger(__name__)

# Bilinear forms with linear x linear integrands
BILINEAR_DEGREE = 2

VORTICITY_KINDS = (LAGRANGE1, NEDELEC2)


class AssemblyError(ValueError):
    """Invalid assembly input: viscosity, space kinds or meshes."""


@dataclass
class VertexBlockMatrix:
    """
    Block-diagonal matrix with one dense block per vertex.

    ``dofs[k]`` lists the global dofs of block ``k`` (in block order) and
    ``vertices[k]`` the vertex it belongs to.
    """
    n_dofs: int
    blocks: List[np.ndarray] = field(default_factory=list)
    dofs: List[np.ndarray] = field(default_factory=list)
    vertices: List[int] = field(default_factory=list)

    @property
    def n_blocks(self):
        return len(self.blocks)

    def to_sparse(self):
        if not self.blocks:
            return sp.csr_array((self.n_dofs, self.n_dofs))
        rows = np.concatenate([np.repeat(d, len(d)) for d in self.dofs])
        cols = np.concatenate([np.tile(d, len(d)) for d in self.dofs])
        data = np.concatenate([b.ravel() for b in self.blocks])
        return sp.coo_array((data, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        y = np.zeros(self.n_dofs)
        for block, dofs in zip(self.blocks, self.dofs):
            y[dofs] = block @ x[dofs]
        return y

    def trace(self):
        return float(sum(np.trace(b) for b in self.blocks))

    def restrict(self, keep):
        """Drop the dofs where ``keep`` is False; emptied blocks are removed."""
        keep = np.asarray(keep, dtype=bool)
        out = VertexBlockMatrix(self.n_dofs)
        for block, dofs, vertex in zip(self.blocks, self.dofs, self.vertices):
            mask = keep[dofs]
            if not mask.any():
                continue
            out.blocks.append(block[np.ix_(mask, mask)])
            out.dofs.append(dofs[mask])
            out.vertices.append(vertex)
        return out


@dataclass
class RhsVectors:
    f_r: np.ndarray
    f_q: np.ndarray
    f_p: np.ndarray


def _check_mu(mu):
    if not mu > 0:
        raise AssemblyError(f"viscosity must be positive, got {mu}")


def _check_kind(space, kinds, role):
    if space.kind not in kinds:
        raise AssemblyError(f"{role} space must be one of {kinds}, got {space.kind}")


def _check_same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise AssemblyError(f"{a.kind} and {b.kind} spaces live on different meshes")


def _scatter(row_dofs, col_dofs, local, shape):
    """Cellwise scatter-add of local matrices (nc, nr, nc') into a CSR matrix."""
    n_rows, n_cols = row_dofs.shape[1], col_dofs.shape[1]
    rows = np.repeat(row_dofs, n_cols, axis=1).ravel()
    cols = np.tile(col_dofs, (1, n_rows)).ravel()
    return sp.coo_array((local.ravel(), (rows, cols)), shape=shape).tocsr()


def local_mass_matrices(space, rule, mu=1.0):
    """Per-cell mass matrices mu^-1 (phi_i, phi_j) under ``rule``, shape (nc, nloc, nloc)."""
    values = tabulate(space, rule.points)
    local = np.einsum('q,cqiv,cqjv->cij', rule.weights, values, values)
    return local * (space.mesh.cell_volumes / mu)[:, None, None]


def assemble_exact_vorticity_mass(space_R, mu):
    """A: mu^-1 (r, r~), integrated exactly."""
    _check_mu(mu)
    _check_kind(space_R, VORTICITY_KINDS, 'vorticity')
    rule = quadrature.simplex_rule(space_R.dim, BILINEAR_DEGREE)
    local = local_mass_matrices(space_R, rule, mu)
    return _scatter(space_R.cell_dofs, space_R.cell_dofs, local, (space_R.n_dofs,) * 2)


def assemble_quadrature_vorticity_mass(space_R, mu):
    """
    A_h: mu^-1 (r, r~)_h under the vertex rule, grouped into per-vertex blocks.

    Each vorticity basis function is nonzero at exactly one vertex, so the
    vertex rule couples only dofs of the same vertex.
    """
    _check_mu(mu)
    _check_kind(space_R, VORTICITY_KINDS, 'vorticity')
    rule = quadrature.vertex_rule(space_R.dim)
    local = local_mass_matrices(space_R, rule, mu)
    matrix = _scatter(space_R.cell_dofs, space_R.cell_dofs, local, (space_R.n_dofs,) * 2).tocoo()

    owner = space_R.dof_vertex
    row_v, col_v = owner[matrix.row], owner[matrix.col]
    coupled = row_v != col_v
    if np.any(matrix.data[coupled] != 0.0):
        raise AssemblyError("vertex quadrature couples dofs of different vertices")

    n_vertices = space_R.mesh.n_vertices
    order = np.argsort(owner, kind='stable')
    counts = np.bincount(owner, minlength=n_vertices)
    starts = np.concatenate([[0], np.cumsum(counts)])
    position = np.empty(space_R.n_dofs, dtype=np.int64)
    position[order] = np.arange(space_R.n_dofs) - starts[owner[order]]

    rows, cols, data = matrix.row[~coupled], matrix.col[~coupled], matrix.data[~coupled]
    entry_order = np.argsort(row_v[~coupled], kind='stable')
    rows, cols, data = rows[entry_order], cols[entry_order], data[entry_order]
    entry_starts = np.searchsorted(owner[rows], np.arange(n_vertices + 1))

    result = VertexBlockMatrix(space_R.n_dofs)
    for v in range(n_vertices):
        if counts[v] == 0:
            continue
        block = np.zeros((counts[v], counts[v]))
        span = slice(entry_starts[v], entry_starts[v + 1])
        block[position[rows[span]], position[cols[span]]] = data[span]
        result.blocks.append(block)
        result.dofs.append(order[starts[v]:starts[v + 1]])
        result.vertices.append(v)

    logger.debug("A_h: %d vertex blocks, largest %d", result.n_blocks, counts.max())
    return result


def assemble_curl(space_R, space_Q):
    """B_r with entries (curl r~_j, q~_k): rows velocity dofs, cols vorticity dofs."""
    _check_kind(space_R, VORTICITY_KINDS, 'vorticity')
    _check_kind(space_Q, (RT0,), 'velocity')
    _check_same_mesh(space_R, space_Q)
    mesh = space_R.mesh
    rule = quadrature.simplex_rule(mesh.dim, BILINEAR_DEGREE)
    curls = differentials(space_R)
    values = tabulate(space_Q, rule.points)
    local = np.einsum('q,cqkd,cjd->ckj', rule.weights, values, curls)
    local *= mesh.cell_volumes[:, None, None]
    return _scatter(space_Q.cell_dofs, space_R.cell_dofs, local, (space_Q.n_dofs, space_R.n_dofs))


def assemble_div(space_Q, space_P):
    """B_q with entries (div q~_k, p~_c): the facet orientation signs of each cell."""
    _check_kind(space_Q, (RT0,), 'velocity')
    _check_kind(space_P, (P0,), 'pressure')
    _check_same_mesh(space_Q, space_P)
    mesh = space_Q.mesh
    local = mesh.cell_facet_signs.astype(float)[:, None, :]
    return _scatter(space_P.cell_dofs, space_Q.cell_dofs, local, (space_P.n_dofs, space_Q.n_dofs))


def _boundary_groups(mesh, facets):
    """Yield (local facet index, facets, owning cells) for boundary ``facets``."""
    cells = mesh.facet_cells[facets, 0]
    local = np.argmax(mesh.cell_facets[cells] == facets[:, None], axis=1)
    for i in range(mesh.dim + 1):
        mask = local == i
        if mask.any():
            yield i, facets[mask], cells[mask]


def _values(field, points):
    shape = points.shape[:-1]
    return np.asarray(field(points.reshape(-1, points.shape[-1])), dtype=float).reshape(shape + (-1,))


def assemble_rhs(g, p0, q0, space_R, space_Q, degree=None):
    """
    f_q = (g, q~) - <p0, nu.q~> and f_r = <q0, nu x r~>, boundary terms over
    the p-boundary. ``p0`` or ``q0`` may be None for homogeneous data.
    """
    _check_kind(space_R, VORTICITY_KINDS, 'vorticity')
    _check_kind(space_Q, (RT0,), 'velocity')
    _check_same_mesh(space_R, space_Q)
    mesh = space_Q.mesh
    degree = quadrature.QUAD_DEGREE if degree is None else degree

    f_q = np.zeros(space_Q.n_dofs)
    f_r = np.zeros(space_R.n_dofs)

    if g is not None:
        rule = quadrature.simplex_rule(mesh.dim, degree)
        g_values = _values(g, mesh.cell_points(rule.points))
        local = np.einsum('q,cqd,cqkd->ck', rule.weights, g_values, tabulate(space_Q, rule.points))
        np.add.at(f_q, space_Q.cell_dofs, local * mesh.cell_volumes[:, None])

    facets = mesh.boundary_facets(P_BOUNDARY)
    if len(facets) and (p0 is not None or q0 is not None):
        rules = quadrature.facet_rule(mesh.dim, degree)
        for i, group, cells in _boundary_groups(mesh, facets):
            rule = rules[i]
            x = mesh.cell_points(rule.points, cells)
            outward = (mesh.cell_facet_signs[cells, i][:, None] * mesh.facet_normals[group])
            scale = mesh.facet_measures[group][:, None]
            if p0 is not None:
                p_values = _values(p0, x)[..., 0]
                flux = np.einsum('cqkd,cd->cqk', tabulate(space_Q, rule.points, cells), outward)
                local = -np.einsum('q,cq,cqk->ck', rule.weights, p_values, flux) * scale
                np.add.at(f_q, space_Q.cell_dofs[cells], local)
            if q0 is not None:
                q_values = _values(q0, x)
                r_values = tabulate(space_R, rule.points, cells)
                # q0 . (nu x r~) = r~ . (q0 x nu); in 2D both sides are scalar
                if mesh.dim == 2:
                    cross = (q_values[..., 0] * outward[:, None, 1]
                             - q_values[..., 1] * outward[:, None, 0])[..., None]
                else:
                    cross = np.cross(q_values, outward[:, None, :])
                local = np.einsum('q,cqv,cqjv->cj', rule.weights, cross, r_values) * scale
                np.add.at(f_r, space_R.cell_dofs[cells], local)

    return RhsVectors(f_r=f_r, f_q=f_q, f_p=np.zeros(mesh.n_cells))


def assemble_gradient_forcing(space_Q, phi, degree=None):
    """
    Velocity functional of a gradient force grad(phi), integrated by parts:

        (grad phi, q~) = <phi, nu.q~>_boundary - (phi, div q~).

    Only cell and facet means of phi enter, so the result lies in the range of
    the discrete gradient up to the boundary term.
    """
    _check_kind(space_Q, (RT0,), 'velocity')
    mesh = space_Q.mesh
    degree = quadrature.QUAD_DEGREE if degree is None else degree

    rule = quadrature.simplex_rule(mesh.dim, degree)
    cell_means = _values(phi, mesh.cell_points(rule.points))[..., 0] @ rule.weights
    forcing = np.zeros(space_Q.n_dofs)
    np.add.at(forcing, mesh.cell_facets, -mesh.cell_facet_signs * cell_means[:, None])

    facets = mesh.boundary_facets()
    if len(facets):
        frule = quadrature.simplex_rule(mesh.dim - 1, degree)
        points = np.einsum('qi,fid->fqd', frule.points, mesh.vertices[mesh.facets[facets]])
        facet_means = _values(phi, points)[..., 0] @ frule.weights
        cells = mesh.facet_cells[facets, 0]
        local = np.argmax(mesh.cell_facets[cells] == facets[:, None], axis=1)
        forcing[facets] += mesh.cell_facet_signs[cells, local] * facet_means
    return forcing


def apply_essential_bc(matrix, rhs, flags):
    """
    Symmetric elimination of flagged dofs: their rows and columns become
    identity rows with zero right-hand side. Homogeneous data only.
    """
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return matrix, rhs
    if len(flags) != matrix.shape[0]:
        raise AssemblyError(f"{len(flags)} flags for a system of size {matrix.shape[0]}")
    keep = sp.diags_array((~flags).astype(float))
    constrained = (keep @ matrix @ keep + sp.diags_array(flags.astype(float))).tocsr()
    rhs = np.where(flags, 0.0, rhs)
    logger.debug("Eliminated %d essential dofs", int(flags.sum()))
    return constrained, rhs


def dump_matrix(matrix, path):
    """Coordinate text dump, one ``row col value`` line per stored entry."""
    coo = sp.coo_array(matrix)
    with open(path, 'w') as f:
        for i, j, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{int(i)} {int(j)} {float(v)!r}\n")
